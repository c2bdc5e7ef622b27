use super::{BaseModel, PromptTokens};
use crate::adapters::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::gaussian;
use crate::sketchrep::{Image, Raster};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Conditioning shared by every step of one sampling run.
#[derive(Clone, Debug)]
pub struct SampleSpec<'a> {
    pub tokens: &'a PromptTokens,
    pub slots: &'a [Tensor<f32>],
    pub pyramid: Option<&'a FeaturePyramid>,
    pub steps: usize,
    pub seed: u64,
}

/// Background path for latent blending: `latents[i]` is the inverted image at
/// the noise level of sampling timestep `i` (descending order).
#[derive(Clone, Debug)]
pub struct Blend<'a> {
    pub mask: &'a Raster,
    pub latents: &'a [Vec<f32>],
    pub original: &'a [f32],
}

fn eps(base: &BaseModel, z: &[f32], t: usize, spec: &SampleSpec) -> Result<Vec<f32>> {
    let s = base.denoiser_cfg.size;
    let zt = Tensor::from_vec(&[1, 3, s, s], z.to_vec());
    let (e, _) = base.predict_noise(&zt, &[t], std::slice::from_ref(spec.tokens), spec.slots, spec.pyramid, false)?;
    Ok(e.into_data())
}

fn blend_into(z: &mut [f32], bg: &[f32], mask: &Raster) {
    let hw = mask.data().len();
    for (i, v) in z.iter_mut().enumerate() {
        let m = mask.data()[i % hw];
        if m == 0.0 {
            *v = bg[i];
        } else if m != 1.0 {
            *v = *v * m + bg[i] * (1.0 - m);
        }
    }
}

/// Ancestral DDPM sampling; returns the final signed latent `[3·H·W]`.
pub fn sample_with(base: &BaseModel, spec: &SampleSpec, blend: Option<&Blend>) -> Result<Vec<f32>> {
    let ts = base.schedule.sampling_timesteps(spec.steps)?;
    let s = base.denoiser_cfg.size;
    let n = 3 * s * s;
    if let Some(b) = blend {
        if b.mask.width() != s || b.mask.height() != s || b.latents.len() != ts.len() || b.original.len() != n {
            return Err(Error::Shape("blend mask or background trajectory does not match the sampler".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut z: Vec<f32> = (0..n).map(|_| gaussian(&mut rng) as f32).collect();
    if let Some(b) = blend {
        blend_into(&mut z, &b.latents[0], b.mask);
    }
    for (i, &t) in ts.iter().enumerate() {
        let e = eps(base, &z, t, spec)?;
        let ab = base.schedule.alpha_bar(t);
        let ab_prev = ts.get(i + 1).map(|&tp| base.schedule.alpha_bar(tp)).unwrap_or(1.0);
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt();
        let last = i + 1 == ts.len();
        for k in 0..n {
            let x0 = ((z[k] as f64 - (1.0 - ab).sqrt() * e[k] as f64) / ab.sqrt()).clamp(-1.0, 1.0);
            z[k] = (c0 * x0 + ct * z[k] as f64) as f32;
        }
        if !last {
            for v in z.iter_mut() {
                *v += (sigma * gaussian(&mut rng)) as f32;
            }
        }
        if let Some(b) = blend {
            let bg = if last { b.original } else { &b.latents[i + 1][..] };
            blend_into(&mut z, bg, b.mask);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: i, detail: format!("non-finite latent at t={t}") });
        }
    }
    Ok(z)
}

/// Ancestral sampling from pure noise, output mapped to `[0, 1]`.
pub fn sample(base: &BaseModel, spec: &SampleSpec) -> Result<Image> {
    let z = sample_with(base, spec, None)?;
    let s = base.denoiser_cfg.size;
    Image::from_signed(&z, s, s)
}

/// Deterministic DDIM inversion of `image`: `latents[i]` sits at the noise
/// level of the `i`-th sampling timestep in descending order, matching [`Blend`].
pub fn invert_image(base: &BaseModel, image: &Image, spec: &SampleSpec) -> Result<Vec<Vec<f32>>> {
    let s = base.denoiser_cfg.size;
    if image.width() != s || image.height() != s {
        return Err(Error::Shape(format!("image {}x{}, working size {s}", image.width(), image.height())));
    }
    let mut ts = base.schedule.sampling_timesteps(spec.steps)?;
    ts.reverse();
    let mut z = image.to_signed_tensor().into_data();
    let mut ab_prev: f64 = 1.0;
    let mut out = Vec::with_capacity(ts.len());
    for &t in &ts {
        let e = eps(base, &z, t, spec)?;
        let ab = base.schedule.alpha_bar(t);
        for k in 0..z.len() {
            let x0 = (z[k] as f64 - (1.0 - ab_prev).sqrt() * e[k] as f64) / ab_prev.sqrt();
            z[k] = (ab.sqrt() * x0 + (1.0 - ab).sqrt() * e[k] as f64) as f32;
        }
        ab_prev = ab;
        out.push(z.clone());
    }
    out.reverse();
    Ok(out)
}

/// Deterministic DDIM sampling from a given top latent; the inverse of [`invert_image`].
pub fn ddim_sample(base: &BaseModel, z_top: &[f32], spec: &SampleSpec) -> Result<Image> {
    let ts = base.schedule.sampling_timesteps(spec.steps)?;
    let mut z = z_top.to_vec();
    for (i, &t) in ts.iter().enumerate() {
        let e = eps(base, &z, t, spec)?;
        let ab = base.schedule.alpha_bar(t);
        let ab_prev = ts.get(i + 1).map(|&tp| base.schedule.alpha_bar(tp)).unwrap_or(1.0);
        for k in 0..z.len() {
            let x0 = (z[k] as f64 - (1.0 - ab).sqrt() * e[k] as f64) / ab.sqrt();
            z[k] = (ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e[k] as f64) as f32;
        }
    }
    let s = base.denoiser_cfg.size;
    Image::from_signed(&z, s, s)
}
