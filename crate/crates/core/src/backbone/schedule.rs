use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};

/// Linear-beta variance schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(invalid(format!("betas must satisfy 0 < {beta_min} <= {beta_max} < 1")));
    }
    let betas: Vec<f64> = (0..steps).map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `count` evenly strided timesteps, descending, ending at 0.
    pub fn sampling_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        if count == 0 || count > self.len() {
            return Err(invalid(format!("sampling steps {count} outside 1..={}", self.len())));
        }
        let stride = self.len() / count;
        Ok((0..count).rev().map(|i| i * stride).collect())
    }
}

/// `sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·eps`.
pub fn forward_diffuse(z0: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    if z0.len() != eps.len() {
        return Err(Error::Shape(format!("image has {} values, noise {}", z0.len(), eps.len())));
    }
    if t >= schedule.len() {
        return Err(invalid(format!("timestep {t} outside [0, {})", schedule.len())));
    }
    let ab = schedule.alpha_bar(t);
    Ok(mix(z0, eps, ab))
}

pub(crate) fn mix(z0: &[f32], eps: &[f32], alpha_bar: f64) -> Vec<f32> {
    let (a, b) = (alpha_bar.sqrt() as f32, (1.0 - alpha_bar).sqrt() as f32);
    z0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}
