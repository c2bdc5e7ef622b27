//! Named parameter sets, Adam, and the layer building blocks shared by the
//! denoiser and the sketch encoders.

use crate::tensor::{Grads, Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// An ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { params: BTreeMap::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Place every tensor into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self.params.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable))).collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.params {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Names whose tensors differ between `self` and `other`.
    pub fn diff(&self, other: &ParamSet<T>) -> Vec<String> {
        let mut out: Vec<String> = self
            .params
            .iter()
            .filter(|(k, v)| other.params.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect();
        out.extend(other.params.keys().filter(|k| !self.params.contains_key(*k)).cloned());
        out
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collect gradients by parameter name.
    pub fn grads<T: Scalar>(&self, grads: &mut Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g))).collect()
    }
}

/// Parameter initialisation helpers.
pub struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<f32> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn conv(&mut self, ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, zero: bool) {
        let fan_in = (cin * k * k) as f64;
        let w = if zero { Tensor::zeros(&[cout, cin, k, k]) } else { self.uniform(&[cout, cin, k, k], (3.0 / fan_in).sqrt()) };
        ps.insert(format!("{name}.w"), w);
        ps.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    pub fn linear(&mut self, ps: &mut ParamSet, name: &str, din: usize, dout: usize, bias: bool) {
        ps.insert(format!("{name}.w"), self.uniform(&[dout, din], (3.0 / din as f64).sqrt()));
        if bias {
            ps.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
        }
    }

    pub fn norm(&mut self, ps: &mut ParamSet, name: &str, c: usize) {
        ps.insert(format!("{name}.g"), Tensor::full(&[c], 1.0));
        ps.insert(format!("{name}.b"), Tensor::zeros(&[c]));
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f32> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| (gaussian(self.rng) * std) as f32).collect();
        Tensor::from_vec(shape, data)
    }
}

/// Standard normal sample via Box-Muller; stable across platforms.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = p.get(&format!("{name}.w"));
    let b = p.opt(&format!("{name}.b"));
    g.conv2d(x, w, b, stride, pad)
}

pub fn norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, groups: usize) -> Var {
    let gamma = p.get(&format!("{name}.g"));
    let beta = p.get(&format!("{name}.b"));
    g.group_norm(x, gamma, beta, groups)
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    let w = p.get(&format!("{name}.w"));
    let b = p.opt(&format!("{name}.b"));
    g.linear(x, w, b)
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over a subset of named parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update; parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor<f32>>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gr = gr as f64;
                *mi = beta1 * *mi + (1.0 - beta1) * gr;
                *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                let upd = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w = (*w as f64 - upd) as f32;
            }
        }
    }
}

/// Scale a gradient map in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut BTreeMap<String, Tensor<f32>>], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().flat_map(|m| m.values()).map(|t| t.sq_norm()).sum::<f64>().sqrt();
    if total > max_norm && total.is_finite() {
        let s = (max_norm / total) as f32;
        for m in grads.iter_mut() {
            for t in m.values_mut() {
                t.scale_in_place(s);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_moves_only_parameters_with_gradients() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        ps.insert("b", Tensor::from_vec(&[1], vec![3.0]));
        let before = ps.clone();
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::from_vec(&[2], vec![0.5, -0.5]));
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.update(&mut ps, &grads);
        assert_eq!(ps.diff(&before), vec!["a".to_string()]);
        // first Adam step moves each coordinate by ~lr against the gradient sign
        let a = ps.get("a").unwrap().data();
        assert!((a[0] - 0.9).abs() < 1e-5 && (a[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g1 = BTreeMap::new();
        g1.insert("x".to_string(), Tensor::from_vec(&[2], vec![3.0f32, 0.0]));
        let mut g2 = BTreeMap::new();
        g2.insert("y".to_string(), Tensor::from_vec(&[1], vec![4.0f32]));
        let n = clip_global_norm(&mut [&mut g1, &mut g2], 1.0);
        assert!((n - 5.0).abs() < 1e-9);
        let after = (g1["x"].sq_norm() + g2["y"].sq_norm()).sqrt();
        assert!((after - 1.0).abs() < 1e-6);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        Init::new(&mut rng).conv(&mut ps, "c", 2, 3, 3, false);
        let c0 = ps.checksum();
        ps.get_mut("c.b").unwrap().data_mut()[1] = 1e-7;
        assert_ne!(c0, ps.checksum());
    }
}
