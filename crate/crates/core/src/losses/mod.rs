//! Training objectives: masked reconstruction, cross-attention shape loss,
//! embedding-norm regulariser and their weighted sum, plus the aggregation of
//! recorded `[v]` attention into one 16×16 map.
//!
//! Each loss has a graph form used by the trainer and a value form that
//! evaluates the same graph on plain tensors.

use crate::backbone::AttentionRecord;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Resolution of the aggregated attention map.
pub const ATTN_RES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub shape: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { shape: 0.01, reg: 0.001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.shape >= 0.0 && self.reg >= 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// The learned concept embedding `v`, stored outside the embedding table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptToken {
    pub v: Vec<f32>,
    pub class_name: String,
    pub trainable: bool,
}

impl ConceptToken {
    pub fn tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.v.len()], self.v.clone())
    }

    pub fn norm(&self) -> f64 {
        self.v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// Per-step loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub fg: f64,
    pub bg: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossTerms {
    pub const CSV_HEADER: &'static str = "step,l_rec,l_fg,l_bg,l_reg,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{},{}", self.rec, self.fg, self.bg, self.reg, self.total)
    }
}

fn check_finite<T: Scalar>(name: &str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} contains non-finite values")))
    }
}

/// Masked squared error: `Σ M·(ε − ε̂)² / (C·Σ M)` over the batch, i.e. the
/// mean over masked elements. `m` is `[N|1,1,H,W]` and constant. An all-zero
/// mask gives 0.
pub fn rec_loss_graph<T: Scalar>(g: &mut Graph<T>, eps: Var, eps_hat: Var, m: Var) -> Result<Var> {
    let es = g.shape(eps).to_vec();
    let ms = g.shape(m).to_vec();
    if es.len() != 4 || g.shape(eps_hat) != es.as_slice() {
        return Err(Error::Shape(format!("noise {es:?} vs prediction {:?}", g.shape(eps_hat))));
    }
    if ms.len() != 4 || ms[1] != 1 || ms[2..] != es[2..] || !(ms[0] == 1 || ms[0] == es[0]) {
        return Err(Error::Shape(format!("mask {ms:?} incompatible with noise {es:?}")));
    }
    let mut weight = g.value(m).sum().as_f64();
    if ms[0] == 1 {
        weight *= es[0] as f64;
    }
    let d = g.sub(eps, eps_hat);
    let sq = g.square(d);
    let masked = g.mul_spatial(sq, m);
    let s = g.sum_all(masked);
    if weight <= 0.0 {
        log::warn!("reconstruction mask is empty; loss is 0");
        return Ok(g.scale(s, 0.0));
    }
    Ok(g.scale(s, 1.0 / (weight * es[1] as f64)))
}

pub fn rec_loss<T: Scalar>(eps: &Tensor<T>, eps_hat: &Tensor<T>, m: &Tensor<T>) -> Result<f64> {
    check_finite("noise", eps)?;
    check_finite("prediction", eps_hat)?;
    let mut g = Graph::<T>::new();
    let (a, b, c) = (g.constant(eps.clone()), g.constant(eps_hat.clone()), g.constant(m.clone()));
    let l = rec_loss_graph(&mut g, a, b, c)?;
    Ok(g.value(l).item().as_f64())
}

/// Bring one `[N, R·R]` attention layer to `[N, ATTN_RES²]` by area averaging
/// (R > 16) or replication (R < 16).
fn to_attn_res<T: Scalar>(g: &mut Graph<T>, map: Var, r: usize) -> Result<Var> {
    let n = g.shape(map)[0];
    if g.shape(map) != [n, r * r] {
        return Err(Error::Shape(format!("attention layer {:?} is not [N, {r}²]", g.shape(map))));
    }
    if r == ATTN_RES {
        return Ok(map);
    }
    let x = g.reshape(map, &[n, 1, r, r]);
    let y = if r > ATTN_RES && r % ATTN_RES == 0 {
        g.avg_pool(x, r / ATTN_RES)
    } else if r < ATTN_RES && ATTN_RES % r == 0 {
        g.upsample(x, ATTN_RES / r)
    } else {
        return Err(Error::Shape(format!("attention resolution {r} does not divide {ATTN_RES}")));
    };
    Ok(g.reshape(y, &[n, ATTN_RES * ATTN_RES]))
}

/// Mean over layers of each head-averaged map resized to 16×16; `[N, 256]`.
pub fn aggregate_attention_graph<T: Scalar>(g: &mut Graph<T>, layers: &[(Var, usize)]) -> Result<Var> {
    let Some(&(first, r0)) = layers.first() else {
        return Err(Error::InvalidArgument("attention record is empty".into()));
    };
    let mut acc = to_attn_res(g, first, r0)?;
    for &(m, r) in &layers[1..] {
        let x = to_attn_res(g, m, r)?;
        if g.shape(x) != g.shape(acc) {
            return Err(Error::Shape("attention layers differ in batch size".into()));
        }
        acc = g.add(acc, x);
    }
    Ok(g.scale(acc, 1.0 / layers.len() as f64))
}

pub fn aggregate_attention(rec: &AttentionRecord) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let layers: Vec<(Var, usize)> = rec.layers.iter().map(|l| (g.constant(l.map.clone()), l.resolution)).collect();
    let a = aggregate_attention_graph(&mut g, &layers)?;
    Ok(g.value(a).clone())
}

/// Shape-loss graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct ShapeVars {
    pub fg: Var,
    pub bg: Var,
    pub shape: Var,
}

/// `a` is `[N, P]` raw attention, `m` the matching soft mask `[N, P]`
/// (constant). `L_fg = mean((norm(a)·M − M)²)` over all P cells;
/// `L_bg = Σ a·(1−M) / Σ (1−M)` per sample. Both are averaged over the batch.
pub fn shape_loss_graph<T: Scalar>(g: &mut Graph<T>, a: Var, m: &Tensor<T>) -> Result<ShapeVars> {
    let s = g.shape(a).to_vec();
    if s.len() != 2 || m.shape() != s.as_slice() {
        return Err(Error::Shape(format!("attention {s:?} vs mask {:?}", m.shape())));
    }
    let (n, p) = (s[0], s[1]);
    let mut bg_w = Vec::with_capacity(n * p);
    for row in m.data().chunks(p) {
        if row.iter().all(|v| v.as_f64() <= 0.0) {
            return Err(Error::DegenerateMask("mask is empty at attention resolution".into()));
        }
        let denom: f64 = row.iter().map(|v| 1.0 - v.as_f64()).sum();
        bg_w.extend(row.iter().map(|v| if denom > 0.0 { T::lit((1.0 - v.as_f64()) / denom) } else { T::zero() }));
    }
    let mv = g.constant(m.clone());
    let na = g.minmax_norm_rows(a);
    let prod = g.mul(na, mv);
    let diff = g.sub(prod, mv);
    let sq = g.square(diff);
    let fg = g.mean_all(sq);
    let w = g.constant(Tensor::from_vec(&[n, p], bg_w));
    let weighted = g.mul(a, w);
    let bsum = g.sum_all(weighted);
    let bg = g.scale(bsum, 1.0 / n as f64);
    let shape = g.add(fg, bg);
    Ok(ShapeVars { fg, bg, shape })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeTerms {
    pub fg: f64,
    pub bg: f64,
    pub shape: f64,
}

/// Value form of [`shape_loss_graph`] on one square map and a mask of equal size.
pub fn shape_loss<T: Scalar>(a: &Tensor<T>, m: &Tensor<T>) -> Result<ShapeTerms> {
    check_finite("attention", a)?;
    if a.shape() != m.shape() {
        return Err(Error::Shape(format!("attention {:?} vs mask {:?}", a.shape(), m.shape())));
    }
    let p = a.len();
    let mut g = Graph::<T>::new();
    let av = g.constant(a.clone().reshape(&[1, p]));
    let s = shape_loss_graph(&mut g, av, &m.clone().reshape(&[1, p]))?;
    Ok(ShapeTerms { fg: g.value(s.fg).item().as_f64(), bg: g.value(s.bg).item().as_f64(), shape: g.value(s.shape).item().as_f64() })
}

pub fn reg_loss_graph<T: Scalar>(g: &mut Graph<T>, v: Var) -> Var {
    g.l2_norm(v)
}

/// `‖v‖₂`.
pub fn reg_loss<T: Scalar>(v: &Tensor<T>) -> Result<f64> {
    check_finite("embedding", v)?;
    let mut g = Graph::<T>::new();
    let x = g.constant(v.clone());
    let l = reg_loss_graph(&mut g, x);
    Ok(g.value(l).item().as_f64())
}

pub fn total_loss_graph<T: Scalar>(g: &mut Graph<T>, rec: Var, shape: Option<Var>, reg: Option<Var>, w: &LossWeights) -> Var {
    let mut t = rec;
    if let Some(s) = shape {
        let s = g.scale(s, w.shape);
        t = g.add(t, s);
    }
    if let Some(r) = reg {
        let r = g.scale(r, w.reg);
        t = g.add(t, r);
    }
    t
}

/// `l_rec + λ_shape·l_shape + λ_reg·l_reg`.
pub fn total_loss(l_rec: f64, l_shape: f64, l_reg: f64, w: &LossWeights) -> Result<f64> {
    if ![l_rec, l_shape, l_reg].iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument("loss components must be finite".into()));
    }
    let mut g = Graph::<f64>::new();
    let (a, b, c) = (g.constant(Tensor::scalar(l_rec)), g.constant(Tensor::scalar(l_shape)), g.constant(Tensor::scalar(l_reg)));
    let t = total_loss_graph(&mut g, a, Some(b), Some(c), w);
    Ok(g.value(t).item())
}

#[cfg(test)]
mod tests;
