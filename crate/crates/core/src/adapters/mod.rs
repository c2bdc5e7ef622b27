//! Sketch encoders producing four-level feature pyramids, and the mask
//! gating applied to those pyramids before injection.

use crate::backbone::denoiser::{DenoiserConfig, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init, ParamSet};
use crate::sketchrep::{DualSketch, ForegroundMask, Raster};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub size: usize,
    pub channels: [usize; LEVELS],
}

impl EncoderConfig {
    pub fn matching(d: &DenoiserConfig) -> Self {
        Self { size: d.size, channels: d.channels }
    }
}

/// A convolutional pyramid with parameters named `{prefix}.…`.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchEncoder {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
}

/// Level `i` has shape `[N, C_i, size >> i, size >> i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor<f32>>,
}

impl FeaturePyramid {
    pub fn zeros_like(&self) -> Self {
        Self { levels: self.levels.iter().map(|l| Tensor::zeros(l.shape())).collect() }
    }

    pub fn add(&self, other: &FeaturePyramid) -> Result<FeaturePyramid> {
        if self.levels.len() != other.levels.len() {
            return Err(Error::Shape("pyramids differ in depth".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.levels.iter_mut().zip(&other.levels) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("pyramid level {:?} vs {:?}", a.shape(), b.shape())));
            }
            a.add_assign(b);
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(|l| l.all_finite())
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> [Var; LEVELS] {
        std::array::from_fn(|i| g.constant(self.levels[i].cast()))
    }
}

const NAMES: [&str; 4] = ["l0", "l1", "l2", "l3"];

impl SketchEncoder {
    pub fn init(cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let mut init = Init::new(rng);
        let c = cfg.channels;
        init.conv(&mut params, "in", 1, c[0], 3, false);
        for l in 0..LEVELS {
            let n = NAMES[l];
            if l > 0 {
                init.conv(&mut params, &format!("{n}.down"), c[l - 1], c[l], 3, false);
            }
            init.conv(&mut params, &format!("{n}.c1"), c[l], c[l], 3, false);
            init.conv(&mut params, &format!("{n}.c2"), c[l], c[l], 3, false);
            init.conv(&mut params, &format!("{n}.out"), c[l], c[l], 1, true);
        }
        Self { cfg, params }
    }

    /// Graph forward. `sketch` is `[N,1,H,W]` with ink 0 on a white (1) background.
    pub fn forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, sketch: Var) -> [Var; LEVELS] {
        // internal convention: ink = 1 so an empty page is all zeros
        let neg = g.scale(sketch, -1.0);
        let ink = g.add_scalar(neg, 1.0);
        let mut h = nn::conv(g, p, "in", ink, 1, 1);
        let mut outs = Vec::with_capacity(LEVELS);
        for (l, n) in NAMES.iter().enumerate() {
            if l > 0 {
                h = nn::conv(g, p, &format!("{n}.down"), h, 2, 1);
            }
            let a = g.silu(h);
            let a = nn::conv(g, p, &format!("{n}.c1"), a, 1, 1);
            let a = g.silu(a);
            let a = nn::conv(g, p, &format!("{n}.c2"), a, 1, 1);
            h = g.add(h, a);
            outs.push(nn::conv(g, p, &format!("{n}.out"), h, 1, 0));
        }
        outs.try_into().expect("four levels")
    }

    fn check_input(&self, s: &Raster) -> Result<()> {
        if s.width() != self.cfg.size || s.height() != self.cfg.size {
            return Err(Error::Shape(format!("sketch {}x{}, encoder expects {2}x{2}", s.width(), s.height(), self.cfg.size)));
        }
        if !s.is_binary() {
            return Err(Error::InvalidArgument("encoder input must be binary".into()));
        }
        Ok(())
    }

    /// Evaluate on an ink-black / white-background raster.
    pub fn encode_single(&self, s: &Raster) -> Result<FeaturePyramid> {
        self.check_input(s)?;
        Ok(self.encode_map(s))
    }

    /// Evaluate on a map with values in `[0, 1]`, 0 meaning full ink. Size is
    /// checked by the caller.
    pub(crate) fn encode_map(&self, s: &Raster) -> FeaturePyramid {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(s.to_tensor());
        let outs = Self::forward(&mut g, &p, x);
        FeaturePyramid { levels: outs.iter().map(|v| g.value(*v).clone()).collect() }
    }
}

/// `f_c(s_c) + f_d(s_d)`, with the ink-1 channels converted to the encoder's ink-0 convention.
pub fn encode_dual(f_c: &SketchEncoder, f_d: &SketchEncoder, ds: &DualSketch) -> Result<FeaturePyramid> {
    if f_c.cfg != f_d.cfg {
        return Err(Error::Shape("contour and detail encoders differ in level shapes".into()));
    }
    f_c.encode_single(&ds.s_c.inverted())?.add(&f_d.encode_single(&ds.s_d.inverted())?)
}

/// Area-average downsample to `level × level`. `level` must be the mask size
/// divided by 1, 2, 4 or 8; the full-resolution request returns the mask unchanged.
pub fn resize_mask(m: &ForegroundMask, level: usize) -> Result<Raster> {
    let r = m.raster();
    let ok = r.width() == r.height() && level > 0 && r.width() % level == 0 && matches!(r.width() / level, 1 | 2 | 4 | 8);
    if !ok {
        return Err(Error::InvalidArgument(format!("cannot resize a {}x{} mask to level {level}", r.width(), r.height())));
    }
    Ok(area_resize(r, level))
}

pub(crate) fn area_resize(r: &Raster, level: usize) -> Raster {
    let k = r.width() / level;
    if k == 1 {
        return r.clone();
    }
    let inv = 1.0 / (k * k) as f32;
    let mut out = Raster::new(level, level);
    for y in 0..level {
        for x in 0..level {
            let mut s = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    s += r.get(x * k + dx, y * k + dy);
                }
            }
            out.set(x, y, s * inv);
        }
    }
    out
}

/// Per-level soft masks for a pyramid over a `size × size` working space, `[1,1,R,R]` each.
pub fn mask_levels(m: &ForegroundMask, size: usize) -> Result<Vec<Tensor<f32>>> {
    (0..LEVELS).map(|l| resize_mask(m, size >> l).map(|r| r.to_tensor())).collect()
}

/// Multiply level `i` by the mask resized to that level, broadcast over channels.
pub fn mask_pyramid(p: &FeaturePyramid, m: &ForegroundMask) -> Result<FeaturePyramid> {
    let mut out = p.clone();
    for lvl in out.levels.iter_mut() {
        let s = lvl.shape().to_vec();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::Shape(format!("pyramid level {s:?} is not square NCHW")));
        }
        if m.raster().width() % s[2] != 0 {
            return Err(Error::Shape(format!("mask {}x{} incompatible with level {}", m.raster().width(), m.raster().height(), s[2])));
        }
        let mi = resize_mask(m, s[2])?;
        let hw = s[2] * s[3];
        for chunk in lvl.data_mut().chunks_mut(hw) {
            for (v, &w) in chunk.iter_mut().zip(mi.data()) {
                *v *= w;
            }
        }
    }
    Ok(out)
}

/// Graph version of [`mask_pyramid`]; `masks[i]` is `[N|1,1,R_i,R_i]`.
pub fn mask_pyramid_graph<T: Scalar>(g: &mut Graph<T>, p: &[Var; LEVELS], masks: &[Var; LEVELS]) -> [Var; LEVELS] {
    std::array::from_fn(|i| g.mul_spatial(p[i], masks[i]))
}
