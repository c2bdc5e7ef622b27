use super::kernels::{col2im_add, gemm, im2col, ConvGeom};
use super::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Silu(Var),
    L2Norm(Var),
    MulSpatial { x: Var, m: Var },
    AddChannel { x: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cout: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<f64> },
    AvgPool { x: Var, k: usize },
    Upsample { x: Var, k: usize },
    Concat { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    ToTokens(Var),
    FromTokens(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    SelectLast { x: Var, idx: Vec<usize> },
    MeanMid(Var),
    Embed { table: Var, ids: Vec<usize> },
    Splice { ctx: Var, v: Var, rows: Vec<(usize, usize)> },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    MinMaxNormRows { x: Var, extrema: Vec<(usize, usize, f64)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// A tape of operations; values are computed eagerly on construction.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the leaves that requested them.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn silu_parts<T: Scalar>(x: T) -> (T, T) {
    let s = T::one() / (T::one() + (-x).exp());
    (x * s, s * (T::one() + x * (T::one() - s)))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(512) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient will be reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor<T>, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |p, q| p + q);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |p, q| p - q);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |p, q| p * q);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = T::lit(s);
        let t = self.nodes[a.0].value.map(|x| x * k);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let k = T::lit(s);
        let t = self.nodes[a.0].value.map(|x| x + k);
        let ng = self.ng(&[a]);
        self.push(t, Op::AddScalar(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * x);
        let ng = self.ng(&[a]);
        self.push(t, Op::Square(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| silu_parts(x).0);
        let ng = self.ng(&[a]);
        self.push(t, Op::Silu(a), ng)
    }

    /// Euclidean norm of all elements; the gradient at the origin is zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = T::lit(self.nodes[a.0].value.sq_norm().sqrt());
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(n), Op::L2Norm(a), ng)
    }

    /// `x[N,C,H,W] * m[N|1,1,H,W]`, broadcasting the mask over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m).to_vec();
        assert_eq!(xs.len(), 4);
        assert!(
            ms.len() == 4 && ms[1] == 1 && ms[2] == xs[2] && ms[3] == xs[3] && (ms[0] == xs[0] || ms[0] == 1),
            "mask shape {ms:?} incompatible with {xs:?}"
        );
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.nodes[x.0].value.data();
        let mv = self.nodes[m.0].value.data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            let mrow = if ms[0] == 1 { &mv[..hw] } else { &mv[i * hw..(i + 1) * hw] };
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = xv[base + p] * mrow[p];
                }
            }
        }
        let ng = self.ng(&[x, m]);
        self.push(Tensor::from_vec(&xs, out), Op::MulSpatial { x, m }, ng)
    }

    /// `x[N,C,H,W] + b[N,C]` broadcast over space.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(self.shape(b), &xs[..2], "channel bias shape");
        let hw = xs[2] * xs[3];
        let bv = self.nodes[b.0].value.data().to_vec();
        let mut out = self.nodes[x.0].value.data().to_vec();
        for (nc, chunk) in out.chunks_mut(hw).enumerate() {
            let bias = bv[nc];
            for o in chunk {
                *o += bias;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(Tensor::from_vec(&xs, out), Op::AddChannel { x, b }, ng)
    }

    /// 2-D convolution, `x[N,Cin,H,W]`, `w[Cout,Cin,k,k]`, `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv input must be NCHW");
        assert!(ws.len() == 4 && ws[1] == xs[1] && ws[2] == ws[3], "conv weight {ws:?} vs input {xs:?}");
        let (n, cout) = (xs[0], ws[0]);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_len = xs[1] * xs[2] * xs[3];
        let mut out = vec![T::zero(); n * cout * cols];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[w.0].value.data();
            for i in 0..n {
                let xi = &xv[i * in_len..(i + 1) * in_len];
                let patches: &[T] = if geom.is_pointwise() {
                    xi
                } else {
                    im2col(xi, &geom, &mut col);
                    &col
                };
                gemm(
                    false,
                    false,
                    cout,
                    cols,
                    rows,
                    T::one(),
                    wv,
                    patches,
                    T::zero(),
                    &mut out[i * cout * cols..(i + 1) * cout * cols],
                );
            }
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                assert_eq!(bv.len(), cout);
                for (nc, chunk) in out.chunks_mut(cols).enumerate() {
                    let bias = bv[nc % cout];
                    for o in chunk {
                        *o += bias;
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        let t = Tensor::from_vec(&[n, cout, geom.ho, geom.wo], out);
        self.push(t, Op::Conv2d { x, w, b, geom, cout }, ng)
    }

    /// Group normalization with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert!(c % groups == 0, "channels {c} not divisible by {groups} groups");
        let hw: usize = xs[2..].iter().product();
        let gsize = c / groups * hw;
        let eps = 1e-5;
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(2 * n * groups);
        for i in 0..n {
            for g in 0..groups {
                let off = (i * c + g * (c / groups)) * hw;
                let seg = &xv[off..off + gsize];
                let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / gsize as f64;
                let var = seg.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / gsize as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                stats.push(mean);
                stats.push(rstd);
                let (tm, tr) = (T::lit(mean), T::lit(rstd));
                for cc in 0..c / groups {
                    let ch = g * (c / groups) + cc;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let o = off + cc * hw;
                    for p in 0..hw {
                        out[o + p] = (xv[o + p] - tm) * tr * ga + be;
                    }
                }
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(Tensor::from_vec(&xs, out), Op::GroupNorm { x, gamma, beta, groups, stats }, ng)
    }

    /// Non-overlapping `k×k` average pooling (area downsampling).
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        assert!(h % k == 0 && w % k == 0);
        let (ho, wo) = (h / k, w / k);
        let xv = self.nodes[x.0].value.data();
        let inv = T::lit(1.0 / (k * k) as f64);
        let mut out = vec![T::zero(); nc * ho * wo];
        for p in 0..nc {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * ho + y / k) * wo + xx / k] += xv[(p * h + y) * w + xx];
                }
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[xs[0], xs[1], ho, wo], out), Op::AvgPool { x, k }, ng)
    }

    /// Nearest-neighbour `k×` upsampling.
    pub fn upsample(&mut self, x: Var, k: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h * k, w * k);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); nc * ho * wo];
        for p in 0..nc {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(p * ho + y) * wo + xx] = xv[(p * h + y / k) * w + xx / k];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[xs[0], xs[1], ho, wo], out), Op::Upsample { x, k }, ng)
    }

    /// Concatenate two NCHW tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat {sa:?} with {sb:?}");
        let hw: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..sa[0] {
            out.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_vec(&shape, out), Op::Concat { a, b }, ng)
    }

    /// `x[..., in] · wᵀ + b`, with `w[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().expect("linear input rank");
        assert_eq!(ws[1], din, "linear weight {ws:?} vs input {xs:?}");
        let rows = xs.iter().product::<usize>() / din;
        let dout = ws[0];
        let mut out = vec![T::zero(); rows * dout];
        gemm(
            false,
            true,
            rows,
            dout,
            din,
            T::one(),
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = dout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, ng)
    }

    /// Batched matrix product over the leading dimension.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0]);
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dims {sa:?} x {sb:?}");
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        for i in 0..batch {
            gemm(
                ta,
                tb,
                m,
                n,
                k,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_vec(&[batch, m, n], out), Op::Bmm { a, b, ta, tb }, ng)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let l = *xs.last().unwrap();
        let mut out = self.nodes[x.0].value.data().to_vec();
        for row in out.chunks_mut(l) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&xs, out), Op::Softmax(x), ng)
    }

    /// `[N,C,H,W] -> [N,H·W,C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
        let out = transpose_last2(self.nodes[x.0].value.data(), n, c, p);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[n, p, c], out), Op::ToTokens(x), ng)
    }

    /// `[N,H·W,C] -> [N,C,H,W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, p, c) = (xs[0], xs[1], xs[2]);
        assert_eq!(p, h * w);
        let out = transpose_last2(self.nodes[x.0].value.data(), n, p, c);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::FromTokens(x), ng)
    }

    /// `[N,P,H·D] -> [N·H,P,D]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, p, hd) = (xs[0], xs[1], xs[2]);
        assert_eq!(hd % heads, 0);
        let d = hd / heads;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for t in 0..p {
                for h in 0..heads {
                    let src = &xv[(i * p + t) * hd + h * d..(i * p + t) * hd + (h + 1) * d];
                    let o = ((i * heads + h) * p + t) * d;
                    out[o..o + d].copy_from_slice(src);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[n * heads, p, d], out), Op::SplitHeads { x, heads }, ng)
    }

    /// `[N·H,P,D] -> [N,P,H·D]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (nh, p, d) = (xs[0], xs[1], xs[2]);
        let n = nh / heads;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for t in 0..p {
                for h in 0..heads {
                    let s = ((i * heads + h) * p + t) * d;
                    let o = (i * p + t) * heads * d + h * d;
                    out[o..o + d].copy_from_slice(&xv[s..s + d]);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[n, p, heads * d], out), Op::MergeHeads { x, heads }, ng)
    }

    /// Pick one column of the last axis per batch row: `[B,P,L] -> [B,P]`.
    pub fn select_last(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, p, l) = (xs[0], xs[1], xs[2]);
        assert_eq!(idx.len(), b);
        let xv = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(b * p);
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < l, "column {j} out of range {l}");
            for t in 0..p {
                out.push(xv[(i * p + t) * l + j]);
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[b, p], out), Op::SelectLast { x, idx }, ng)
    }

    /// Mean over the middle axis: `[A,B,C] -> [A,C]`.
    pub fn mean_mid(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (a, b, c) = (xs[0], xs[1], xs[2]);
        let xv = self.nodes[x.0].value.data();
        let inv = T::lit(1.0 / b as f64);
        let mut out = vec![T::zero(); a * c];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    out[i * c + k] += xv[(i * b + j) * c + k];
                }
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[a, c], out), Op::MeanMid(x), ng)
    }

    /// Row lookup: `ids` has `n·l` entries, result `[n,l,D]`.
    pub fn embed(&mut self, table: Var, ids: Vec<usize>, n: usize, l: usize) -> Var {
        assert_eq!(ids.len(), n * l);
        let ts = self.shape(table).to_vec();
        let d = ts[1];
        let tv = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(n * l * d);
        for &id in &ids {
            assert!(id < ts[0], "token id {id} outside table of {} rows", ts[0]);
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.ng(&[table]);
        self.push(Tensor::from_vec(&[n, l, d], out), Op::Embed { table, ids }, ng)
    }

    /// Overwrite rows `(batch, position)` of `ctx[N,L,D]` with `v[D]`.
    pub fn splice(&mut self, ctx: Var, v: Var, rows: Vec<(usize, usize)>) -> Var {
        let cs = self.shape(ctx).to_vec();
        let d = cs[2];
        assert_eq!(self.value(v).len(), d, "spliced vector width");
        let mut out = self.nodes[ctx.0].value.data().to_vec();
        let vv = self.nodes[v.0].value.data();
        for &(i, p) in &rows {
            assert!(i < cs[0] && p < cs[1]);
            let o = (i * cs[1] + p) * d;
            out[o..o + d].copy_from_slice(vv);
        }
        let ng = self.ng(&[ctx, v]);
        self.push(Tensor::from_vec(&cs, out), Op::Splice { ctx, v, rows }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.nodes[x.0].value.clone().reshape(shape);
        let ng = self.ng(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.sum() / T::lit(v.len() as f64);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Per-row `(x - min) / (max - min)` over `[R,P]`; constant rows map to zero.
    pub fn minmax_norm_rows(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let p = *xs.last().unwrap();
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); xv.len()];
        let mut extrema = Vec::with_capacity(xv.len() / p);
        for (r, row) in xv.chunks(p).enumerate() {
            let (mut imin, mut imax) = (0, 0);
            for (j, v) in row.iter().enumerate() {
                if *v < row[imin] {
                    imin = j;
                }
                if *v > row[imax] {
                    imax = j;
                }
            }
            let range = (row[imax] - row[imin]).as_f64();
            extrema.push((imin, imax, range));
            if range > 0.0 {
                let inv = T::lit(1.0 / range);
                for (o, &v) in out[r * p..(r + 1) * p].iter_mut().zip(row) {
                    *o = (v - row[imin]) * inv;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&xs, out), Op::MinMaxNormRows { x, extrema }, ng)
    }

    /// Reverse-mode sweep from a single-element output.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = gd.iter().zip(val(*b)).map(|(&p, &q)| p * q).collect();
                    self.acc(grads, *a, Tensor::from_vec(g.shape(), d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(val(*a)).map(|(&p, &q)| p * q).collect();
                    self.acc(grads, *b, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::Scale(a, s) => {
                let k = T::lit(*s);
                self.acc(grads, *a, g.map(|x| x * k));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Square(a) => {
                let two = T::lit(2.0);
                let d = gd.iter().zip(val(*a)).map(|(&p, &q)| two * p * q).collect();
                self.acc(grads, *a, Tensor::from_vec(g.shape(), d));
            }
            Op::Silu(a) => {
                let d = gd.iter().zip(val(*a)).map(|(&p, &q)| p * silu_parts(q).1).collect();
                self.acc(grads, *a, Tensor::from_vec(g.shape(), d));
            }
            Op::L2Norm(a) => {
                let n = self.nodes[i].value.item();
                let go = gd[0];
                let t = if n > T::zero() {
                    self.nodes[a.0].value.map(|x| go * x / n)
                } else {
                    Tensor::zeros(&shape_of(*a))
                };
                self.acc(grads, *a, t);
            }
            Op::MulSpatial { x, m } => {
                let xs = shape_of(*x);
                let ms = shape_of(*m);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let (xv, mv) = (val(*x), val(*m));
                if self.wants(*x) {
                    let mut d = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        let mrow = if ms[0] == 1 { &mv[..hw] } else { &mv[b * hw..(b + 1) * hw] };
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for p in 0..hw {
                                d[base + p] = gd[base + p] * mrow[p];
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::from_vec(&xs, d));
                }
                if self.wants(*m) {
                    let mut d = vec![T::zero(); mv.len()];
                    for b in 0..n {
                        let mo = if ms[0] == 1 { 0 } else { b * hw };
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for p in 0..hw {
                                d[mo + p] += gd[base + p] * xv[base + p];
                            }
                        }
                    }
                    self.acc(grads, *m, Tensor::from_vec(&ms, d));
                }
            }
            Op::AddChannel { x, b } => {
                self.acc(grads, *x, g.clone());
                if self.wants(*b) {
                    let xs = shape_of(*x);
                    let hw = xs[2] * xs[3];
                    let d = gd.chunks(hw).map(|c| c.iter().copied().sum()).collect();
                    self.acc(grads, *b, Tensor::from_vec(&xs[..2], d));
                }
            }
            Op::Conv2d { x, w, b, geom, cout } => {
                let xs = shape_of(*x);
                let n = xs[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_len = xs[1] * xs[2] * xs[3];
                let (xv, wv) = (val(*x), val(*w));
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut dw = if want_w { vec![T::zero(); wv.len()] } else { Vec::new() };
                let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
                let mut dcol = if want_x && !geom.is_pointwise() { vec![T::zero(); rows * cols] } else { Vec::new() };
                for s in 0..n {
                    let gs = &gd[s * cout * cols..(s + 1) * cout * cols];
                    let xi = &xv[s * in_len..(s + 1) * in_len];
                    if want_w {
                        let patches: &[T] = if geom.is_pointwise() {
                            xi
                        } else {
                            im2col(xi, geom, &mut col);
                            &col
                        };
                        gemm(false, true, *cout, rows, cols, T::one(), gs, patches, T::one(), &mut dw);
                    }
                    if want_x {
                        let dxi = &mut dx[s * in_len..(s + 1) * in_len];
                        if geom.is_pointwise() {
                            gemm(true, false, rows, cols, *cout, T::one(), wv, gs, T::one(), dxi);
                        } else {
                            gemm(true, false, rows, cols, *cout, T::one(), wv, gs, T::zero(), &mut dcol);
                            col2im_add(&dcol, geom, dxi);
                        }
                    }
                }
                if want_x {
                    self.acc(grads, *x, Tensor::from_vec(&xs, dx));
                }
                if want_w {
                    self.acc(grads, *w, Tensor::from_vec(&shape_of(*w), dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); *cout];
                        for (nc, chunk) in gd.chunks(cols).enumerate() {
                            db[nc % cout] += chunk.iter().copied().sum();
                        }
                        self.acc(grads, *b, Tensor::from_vec(&[*cout], db));
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xs = shape_of(*x);
                let (n, c) = (xs[0], xs[1]);
                let hw: usize = xs[2..].iter().product();
                let cg = c / groups;
                let gsize = (cg * hw) as f64;
                let (xv, gv) = (val(*x), val(*gamma));
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for gi in 0..*groups {
                        let (mean, rstd) = (stats[2 * (s * groups + gi)], stats[2 * (s * groups + gi) + 1]);
                        let off = (s * c + gi * cg) * hw;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            let ga = gv[ch].as_f64();
                            let o = off + cc * hw;
                            let (mut dgs, mut dbs) = (0.0, 0.0);
                            for p in 0..hw {
                                let xhat = (xv[o + p].as_f64() - mean) * rstd;
                                let gg = gd[o + p].as_f64();
                                dgs += gg * xhat;
                                dbs += gg;
                                let dxhat = gg * ga;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            dgamma[ch] += T::lit(dgs);
                            dbeta[ch] += T::lit(dbs);
                        }
                        let m1 = sum_dxhat / gsize;
                        let m2 = sum_dxhat_xhat / gsize;
                        for cc in 0..cg {
                            let ga = gv[gi * cg + cc].as_f64();
                            let o = off + cc * hw;
                            for p in 0..hw {
                                let xhat = (xv[o + p].as_f64() - mean) * rstd;
                                let dxhat = gd[o + p].as_f64() * ga;
                                dx[o + p] = T::lit(rstd * (dxhat - m1 - xhat * m2));
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&xs, dx));
                self.acc(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.acc(grads, *beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::AvgPool { x, k } => {
                let xs = shape_of(*x);
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / k, w / k);
                let inv = T::lit(1.0 / (k * k) as f64);
                let mut d = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..h {
                        for xx in 0..w {
                            d[(p * h + y) * w + xx] = gd[(p * ho + y / k) * wo + xx / k] * inv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&xs, d));
            }
            Op::Upsample { x, k } => {
                let xs = shape_of(*x);
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (ho, wo) = (h * k, w * k);
                let mut d = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..ho {
                        for xx in 0..wo {
                            d[(p * h + y / k) * w + xx / k] += gd[(p * ho + y) * wo + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&xs, d));
            }
            Op::Concat { a, b } => {
                let sa = shape_of(*a);
                let sb = shape_of(*b);
                let hw: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1], sb[1]);
                let mut da = Vec::with_capacity(sa.iter().product());
                let mut db = Vec::with_capacity(sb.iter().product());
                for s in 0..sa[0] {
                    let o = s * (ca + cb) * hw;
                    da.extend_from_slice(&gd[o..o + ca * hw]);
                    db.extend_from_slice(&gd[o + ca * hw..o + (ca + cb) * hw]);
                }
                self.acc(grads, *a, Tensor::from_vec(&sa, da));
                self.acc(grads, *b, Tensor::from_vec(&sb, db));
            }
            Op::Linear { x, w, b } => {
                let xs = shape_of(*x);
                let ws = shape_of(*w);
                let (dout, din) = (ws[0], ws[1]);
                let rows = xs.iter().product::<usize>() / din;
                if self.wants(*x) {
                    let mut d = vec![T::zero(); rows * din];
                    gemm(false, false, rows, din, dout, T::one(), gd, val(*w), T::zero(), &mut d);
                    self.acc(grads, *x, Tensor::from_vec(&xs, d));
                }
                if self.wants(*w) {
                    let mut d = vec![T::zero(); dout * din];
                    gemm(true, false, dout, din, rows, T::one(), gd, val(*x), T::zero(), &mut d);
                    self.acc(grads, *w, Tensor::from_vec(&ws, d));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut d = vec![T::zero(); dout];
                        for row in gd.chunks(dout) {
                            for (o, &v) in d.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        self.acc(grads, *b, Tensor::from_vec(&[dout], d));
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let sa = shape_of(*a);
                let sb = shape_of(*b);
                let batch = sa[0];
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    // dA (stored layout) = dY·Bᵀ, or its transpose when A is stored transposed.
                    let mut d = vec![T::zero(); av.len()];
                    for s in 0..batch {
                        let gs = &gd[s * m * n..(s + 1) * m * n];
                        let bs = &bv[s * k * n..(s + 1) * k * n];
                        let ds = &mut d[s * m * k..(s + 1) * m * k];
                        if *ta {
                            // stored [k,m]: dAᵀ = B·dYᵀ
                            gemm(*tb, true, k, m, n, T::one(), bs, gs, T::zero(), ds);
                        } else {
                            gemm(false, !*tb, m, k, n, T::one(), gs, bs, T::zero(), ds);
                        }
                    }
                    self.acc(grads, *a, Tensor::from_vec(&sa, d));
                }
                if self.wants(*b) {
                    let mut d = vec![T::zero(); bv.len()];
                    for s in 0..batch {
                        let gs = &gd[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let ds = &mut d[s * k * n..(s + 1) * k * n];
                        if *tb {
                            // stored [n,k]: dBᵀ = dYᵀ·A
                            gemm(true, *ta, n, k, m, T::one(), gs, as_, T::zero(), ds);
                        } else {
                            gemm(!*ta, false, k, n, m, T::one(), as_, gs, T::zero(), ds);
                        }
                    }
                    self.acc(grads, *b, Tensor::from_vec(&sb, d));
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let l = *g.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(l).zip(y.chunks(l)).zip(gd.chunks(l)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..l {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(g.shape(), d));
            }
            Op::ToTokens(x) => {
                let xs = shape_of(*x);
                let (n, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
                self.acc(grads, *x, Tensor::from_vec(&xs, transpose_last2(gd, n, p, c)));
            }
            Op::FromTokens(x) => {
                let xs = shape_of(*x);
                let (n, p, c) = (xs[0], xs[1], xs[2]);
                self.acc(grads, *x, Tensor::from_vec(&xs, transpose_last2(gd, n, c, p)));
            }
            Op::SplitHeads { x, heads } => {
                let xs = shape_of(*x);
                let (n, p, hd) = (xs[0], xs[1], xs[2]);
                let d = hd / heads;
                let mut out = vec![T::zero(); gd.len()];
                for s in 0..n {
                    for t in 0..p {
                        for h in 0..*heads {
                            let src = ((s * heads + h) * p + t) * d;
                            let o = (s * p + t) * hd + h * d;
                            out[o..o + d].copy_from_slice(&gd[src..src + d]);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&xs, out));
            }
            Op::MergeHeads { x, heads } => {
                let xs = shape_of(*x);
                let (nh, p, d) = (xs[0], xs[1], xs[2]);
                let n = nh / heads;
                let mut out = vec![T::zero(); gd.len()];
                for s in 0..n {
                    for t in 0..p {
                        for h in 0..*heads {
                            let o = ((s * heads + h) * p + t) * d;
                            let src = (s * p + t) * heads * d + h * d;
                            out[o..o + d].copy_from_slice(&gd[src..src + d]);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&xs, out));
            }
            Op::SelectLast { x, idx } => {
                let xs = shape_of(*x);
                let (p, l) = (xs[1], xs[2]);
                let mut d = vec![T::zero(); xs.iter().product()];
                for (s, &j) in idx.iter().enumerate() {
                    for t in 0..p {
                        d[(s * p + t) * l + j] = gd[s * p + t];
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&xs, d));
            }
            Op::MeanMid(x) => {
                let xs = shape_of(*x);
                let (a, b, c) = (xs[0], xs[1], xs[2]);
                let inv = T::lit(1.0 / b as f64);
                let mut d = vec![T::zero(); a * b * c];
                for s in 0..a {
                    for j in 0..b {
                        for k in 0..c {
                            d[(s * b + j) * c + k] = gd[s * c + k] * inv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&xs, d));
            }
            Op::Embed { table, ids } => {
                let ts = shape_of(*table);
                let dim = ts[1];
                let mut d = vec![T::zero(); ts[0] * dim];
                for (r, &id) in ids.iter().enumerate() {
                    for k in 0..dim {
                        d[id * dim + k] += gd[r * dim + k];
                    }
                }
                self.acc(grads, *table, Tensor::from_vec(&ts, d));
            }
            Op::Splice { ctx, v, rows } => {
                let cs = shape_of(*ctx);
                let dim = cs[2];
                if self.wants(*ctx) {
                    let mut d = gd.to_vec();
                    for &(s, p) in rows {
                        let o = (s * cs[1] + p) * dim;
                        d[o..o + dim].fill(T::zero());
                    }
                    self.acc(grads, *ctx, Tensor::from_vec(&cs, d));
                }
                if self.wants(*v) {
                    let mut d = vec![T::zero(); dim];
                    for &(s, p) in rows {
                        let o = (s * cs[1] + p) * dim;
                        for k in 0..dim {
                            d[k] += gd[o + k];
                        }
                    }
                    let vs = shape_of(*v);
                    self.acc(grads, *v, Tensor::from_vec(&vs, d));
                }
            }
            Op::Reshape(x) => {
                let xs = shape_of(*x);
                self.acc(grads, *x, g.clone().reshape(&xs));
            }
            Op::SumAll(x) => {
                let xs = shape_of(*x);
                self.acc(grads, *x, Tensor::full(&xs, gd[0]));
            }
            Op::MeanAll(x) => {
                let xs = shape_of(*x);
                let n = xs.iter().product::<usize>();
                self.acc(grads, *x, Tensor::full(&xs, gd[0] / T::lit(n as f64)));
            }
            Op::MinMaxNormRows { x, extrema } => {
                let xs = shape_of(*x);
                let p = *xs.last().unwrap();
                let y = self.nodes[i].value.data();
                let mut d = vec![T::zero(); y.len()];
                for (r, &(imin, imax, range)) in extrema.iter().enumerate() {
                    if range <= 0.0 {
                        continue;
                    }
                    let inv = T::lit(1.0 / range);
                    let (mut to_min, mut to_max) = (T::zero(), T::zero());
                    for j in 0..p {
                        let gj = gd[r * p + j];
                        let yj = y[r * p + j];
                        d[r * p + j] += gj * inv;
                        to_min += gj * (yj - T::one()) * inv;
                        to_max -= gj * yj * inv;
                    }
                    d[r * p + imin] += to_min;
                    d[r * p + imax] += to_max;
                }
                self.acc(grads, *x, Tensor::from_vec(&xs, d));
            }
        }
    }
}

/// `[n, a, b] -> [n, b, a]`.
fn transpose_last2<T: Scalar>(x: &[T], n: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        let src = &x[s * a * b..(s + 1) * a * b];
        let dst = &mut out[s * a * b..(s + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}
