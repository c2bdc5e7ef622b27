//! Four-level UNet predicting noise in the 64×64×3 working space, with
//! cross-attention over prompt tokens at the 32, 16 and 8 resolutions.

use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init, ParamSet};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Working resolution; level `i` runs at `size >> i`.
    pub size: usize,
    pub channels: [usize; LEVELS],
    pub groups: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub context_len: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { size: 64, channels: [16, 32, 48, 48], groups: 4, heads: 2, text_dim: 32, context_len: 20, time_dim: 32 }
    }
}

impl DenoiserConfig {
    pub fn resolution(&self, level: usize) -> usize {
        self.size >> level
    }

    /// Levels carrying cross-attention in the encoder.
    fn attends(level: usize) -> bool {
        level >= 1
    }
}

/// One cross-attention layer's `[v]` map, averaged over heads, `[N, H·W]`.
#[derive(Clone, Debug)]
pub struct AttentionVar {
    pub map: Var,
    pub resolution: usize,
}

pub fn init_params(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut ps = ParamSet::new();
    let mut init = Init::new(rng);
    let c = cfg.channels;
    let td = cfg.time_dim;
    init.linear(&mut ps, "unet.time.l1", td, td * 2, true);
    init.linear(&mut ps, "unet.time.l2", td * 2, td * 2, true);
    init.conv(&mut ps, "unet.in", 3, c[0], 3, false);
    let resblock = |init: &mut Init, ps: &mut ParamSet, name: &str, cin: usize, cout: usize| {
        init.norm(ps, &format!("{name}.n1"), cin);
        init.conv(ps, &format!("{name}.c1"), cin, cout, 3, false);
        init.linear(ps, &format!("{name}.t"), td * 2, cout, true);
        init.norm(ps, &format!("{name}.n2"), cout);
        init.conv(ps, &format!("{name}.c2"), cout, cout, 3, true);
        if cin != cout {
            init.conv(ps, &format!("{name}.skip"), cin, cout, 1, false);
        }
    };
    let attn = |init: &mut Init, ps: &mut ParamSet, name: &str, ch: usize| {
        init.norm(ps, &format!("{name}.n"), ch);
        init.linear(ps, &format!("{name}.q"), ch, ch, false);
        init.linear(ps, &format!("{name}.k"), cfg.text_dim, ch, false);
        init.linear(ps, &format!("{name}.v"), cfg.text_dim, ch, false);
        init.linear(ps, &format!("{name}.o"), ch, ch, true);
    };
    for l in 0..LEVELS {
        let cin = if l == 0 { c[0] } else { c[l - 1] };
        if l > 0 {
            init.conv(&mut ps, &format!("unet.down{l}"), cin, cin, 3, false);
        }
        resblock(&mut init, &mut ps, &format!("unet.enc{l}.res"), cin, c[l]);
        if DenoiserConfig::attends(l) {
            attn(&mut init, &mut ps, &format!("unet.enc{l}.attn"), c[l]);
        }
    }
    let top = c[LEVELS - 1];
    resblock(&mut init, &mut ps, "unet.mid.res", top, top);
    attn(&mut init, &mut ps, "unet.mid.attn", top);
    for l in (0..LEVELS).rev() {
        let below = if l == LEVELS - 1 { top } else { c[l + 1] };
        resblock(&mut init, &mut ps, &format!("unet.dec{l}.res"), below + c[l], c[l]);
        if DenoiserConfig::attends(l) {
            attn(&mut init, &mut ps, &format!("unet.dec{l}.attn"), c[l]);
        }
        if l > 0 {
            init.conv(&mut ps, &format!("unet.up{l}"), c[l], c[l], 3, false);
        }
    }
    init.norm(&mut ps, "unet.out.n", c[0]);
    init.conv(&mut ps, "unet.out", c[0], 3, 3, true);
    ps
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::lit((t as f64 * f).cos()));
        }
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::lit((t as f64 * f).sin()));
        }
    }
    Tensor::from_vec(&[ts.len(), dim], out)
}

struct Ctx<'a> {
    cfg: &'a DenoiserConfig,
    p: &'a Bound,
    temb: Var,
    context: Var,
    record: Option<&'a [usize]>,
    maps: Vec<AttentionVar>,
}

fn resblock<T: Scalar>(g: &mut Graph<T>, cx: &Ctx, name: &str, x: Var) -> Var {
    let groups = cx.cfg.groups;
    let mut h = nn::norm(g, cx.p, &format!("{name}.n1"), x, groups);
    h = g.silu(h);
    h = nn::conv(g, cx.p, &format!("{name}.c1"), h, 1, 1);
    let t = nn::linear(g, cx.p, &format!("{name}.t"), cx.temb);
    h = g.add_channel(h, t);
    h = nn::norm(g, cx.p, &format!("{name}.n2"), h, groups);
    h = g.silu(h);
    h = nn::conv(g, cx.p, &format!("{name}.c2"), h, 1, 1);
    let skip = match cx.p.opt(&format!("{name}.skip.w")) {
        Some(_) => nn::conv(g, cx.p, &format!("{name}.skip"), x, 1, 0),
        None => x,
    };
    g.add(h, skip)
}

fn cross_attention<T: Scalar>(g: &mut Graph<T>, cx: &mut Ctx, name: &str, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (n, ch, hh, ww) = (s[0], s[1], s[2], s[3]);
    let heads = cx.cfg.heads;
    let h = nn::norm(g, cx.p, &format!("{name}.n"), x, cx.cfg.groups);
    let tok = g.to_tokens(h);
    let q = nn::linear(g, cx.p, &format!("{name}.q"), tok);
    let k = nn::linear(g, cx.p, &format!("{name}.k"), cx.context);
    let v = nn::linear(g, cx.p, &format!("{name}.v"), cx.context);
    let (qh, kh, vh) = (g.split_heads(q, heads), g.split_heads(k, heads), g.split_heads(v, heads));
    let scores = g.bmm(qh, kh, false, true);
    let scores = g.scale(scores, 1.0 / ((ch / heads) as f64).sqrt());
    let probs = g.softmax(scores);
    if let Some(pos) = cx.record {
        let idx: Vec<usize> = pos.iter().flat_map(|&p| std::iter::repeat_n(p, heads)).collect();
        let sel = g.select_last(probs, idx);
        let sel = g.reshape(sel, &[n, heads, hh * ww]);
        let map = g.mean_mid(sel);
        cx.maps.push(AttentionVar { map, resolution: hh });
    }
    let o = g.bmm(probs, vh, false, false);
    let o = g.merge_heads(o, heads);
    let o = nn::linear(g, cx.p, &format!("{name}.o"), o);
    let o = g.from_tokens(o, hh, ww);
    g.add(x, o)
}

fn make_ctx<'a, T: Scalar>(
    g: &mut Graph<T>,
    p: &'a Bound,
    cfg: &'a DenoiserConfig,
    timesteps: &[usize],
    context: Var,
    record: Option<&'a [usize]>,
) -> Ctx<'a> {
    let temb = g.constant(timestep_embedding(timesteps, cfg.time_dim));
    let temb = nn::linear(g, p, "unet.time.l1", temb);
    let temb = g.silu(temb);
    let temb = nn::linear(g, p, "unet.time.l2", temb);
    let temb = g.silu(temb);
    Ctx { cfg, p, temb, context, record, maps: Vec::new() }
}

/// Encoder half; returns each level's output (the skip connections).
fn encode<T: Scalar>(g: &mut Graph<T>, cx: &mut Ctx, z: Var, pyramid: Option<&[Var; LEVELS]>) -> Vec<Var> {
    let mut h = nn::conv(g, cx.p, "unet.in", z, 1, 1);
    let mut skips = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        if l > 0 {
            h = nn::conv(g, cx.p, &format!("unet.down{l}"), h, 2, 1);
        }
        h = resblock(g, cx, &format!("unet.enc{l}.res"), h);
        if DenoiserConfig::attends(l) {
            h = cross_attention(g, cx, &format!("unet.enc{l}.attn"), h);
        }
        if let Some(pyr) = pyramid {
            h = g.add(h, pyr[l]);
        }
        skips.push(h);
    }
    skips
}

/// Encoder level outputs for clean images `z` (timestep 0), `[N, C_l, R_l, R_l]`.
pub fn encoder_features<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &DenoiserConfig, z: Var, context: Var) -> Vec<Var> {
    let n = g.shape(z)[0];
    let ts = vec![0; n];
    let mut cx = make_ctx(g, p, cfg, &ts, context, None);
    encode(g, &mut cx, z, None)
}

/// Inputs of one denoiser evaluation.
pub struct Forward<'a> {
    pub z: Var,
    pub timesteps: &'a [usize],
    /// Prompt token embeddings `[N, L, text_dim]`.
    pub context: Var,
    /// Feature maps added to encoder level outputs, `[N, C_i, R_i, R_i]`.
    pub pyramid: Option<&'a [Var; LEVELS]>,
    /// Per-sample token position whose attention is recorded.
    pub record: Option<&'a [usize]>,
}

/// Predict `ε̂`; returns the output and the recorded attention maps.
pub fn forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &DenoiserConfig, f: Forward) -> Result<(Var, Vec<AttentionVar>)> {
    let zs = g.shape(f.z).to_vec();
    if zs.len() != 4 || zs[1] != 3 || zs[2] != cfg.size || zs[3] != cfg.size {
        return Err(Error::Shape(format!("denoiser input {zs:?}, expected [N, 3, {0}, {0}]", cfg.size)));
    }
    let n = zs[0];
    if f.timesteps.len() != n {
        return Err(Error::Shape(format!("{} timesteps for batch {n}", f.timesteps.len())));
    }
    let cs = g.shape(f.context).to_vec();
    if cs != [n, cfg.context_len, cfg.text_dim] {
        return Err(Error::Shape(format!("context {cs:?}, expected [{n}, {}, {}]", cfg.context_len, cfg.text_dim)));
    }
    if let Some(pyr) = f.pyramid {
        for (l, v) in pyr.iter().enumerate() {
            let r = cfg.resolution(l);
            if g.shape(*v) != [n, cfg.channels[l], r, r] {
                return Err(Error::Shape(format!("pyramid level {l} is {:?}, expected [{n}, {}, {r}, {r}]", g.shape(*v), cfg.channels[l])));
            }
        }
    }
    if let Some(r) = f.record {
        if r.len() != n {
            return Err(Error::Shape(format!("{} record positions for batch {n}", r.len())));
        }
    }
    let mut cx = make_ctx(g, p, cfg, f.timesteps, f.context, f.record);
    let skips = encode(g, &mut cx, f.z, f.pyramid);
    let mut h = skips[LEVELS - 1];
    h = resblock(g, &cx, "unet.mid.res", h);
    h = cross_attention(g, &mut cx, "unet.mid.attn", h);
    for l in (0..LEVELS).rev() {
        h = g.concat_channels(h, skips[l]);
        h = resblock(g, &cx, &format!("unet.dec{l}.res"), h);
        if DenoiserConfig::attends(l) {
            h = cross_attention(g, &mut cx, &format!("unet.dec{l}.attn"), h);
        }
        if l > 0 {
            h = g.upsample(h, 2);
            h = nn::conv(g, p, &format!("unet.up{l}"), h, 1, 1);
        }
    }
    h = nn::norm(g, p, "unet.out.n", h, cfg.groups);
    h = g.silu(h);
    let out = nn::conv(g, p, "unet.out", h, 1, 1);
    Ok((out, cx.maps))
}
