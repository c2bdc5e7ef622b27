use super::*;
use crate::backbone::LayerAttention;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], d: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, d.to_vec())
}

fn oracle_rec(eps: &[f64], hat: &[f64], m: &[f64], c: usize) -> f64 {
    let hw = m.len();
    let (mut num, mut den) = (0.0, 0.0);
    for ch in 0..c {
        for p in 0..hw {
            let d = eps[ch * hw + p] - hat[ch * hw + p];
            num += m[p] * d * d;
            den += m[p];
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn oracle_shape(a: &[f64], m: &[f64]) -> (f64, f64) {
    let lo = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut fg = 0.0;
    for i in 0..a.len() {
        let n = if hi > lo { (a[i] - lo) / (hi - lo) } else { 0.0 };
        fg += (n * m[i] - m[i]).powi(2);
    }
    let (mut bn, mut bd) = (0.0, 0.0);
    for i in 0..a.len() {
        bn += a[i] * (1.0 - m[i]);
        bd += 1.0 - m[i];
    }
    (fg / a.len() as f64, if bd > 0.0 { bn / bd } else { 0.0 })
}

#[test]
fn rec_loss_examples() {
    let e = t64(&[1, 1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
    let z = t64(&[1, 1, 2, 2], &[0.0; 4]);
    let m = t64(&[1, 1, 2, 2], &[1.0, 0.0, 1.0, 0.0]);
    assert_eq!(rec_loss(&e, &z, &m).unwrap(), 0.5);
    assert_eq!(rec_loss(&e, &e, &m).unwrap(), 0.0);
    assert_eq!(rec_loss(&e, &z, &t64(&[1, 1, 2, 2], &[0.0; 4])).unwrap(), 0.0);
    let nan = t64(&[1, 1, 2, 2], &[f64::NAN, 0.0, 0.0, 0.0]);
    assert!(rec_loss(&nan, &z, &m).is_err());
}

#[test]
fn rec_loss_with_full_mask_is_plain_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    let l = rec_loss(&t64(&[2, 3, 4, 4], &a), &t64(&[2, 3, 4, 4], &b), &Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
    assert!((l - mse).abs() < 1e-12);
}

#[test]
fn aggregation_examples() {
    let layer = |r: usize, c: f32| LayerAttention { resolution: r, map: Tensor::full(&[1, r * r], c) };
    let a = aggregate_attention(&AttentionRecord { layers: vec![layer(32, 0.3)] }).unwrap();
    assert!(a.data().iter().all(|v| (v - 0.3).abs() < 1e-7));
    assert_eq!(a.shape(), &[1, 256]);
    let a = aggregate_attention(&AttentionRecord { layers: vec![layer(16, 0.2), layer(8, 0.6)] }).unwrap();
    assert!(a.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    assert!(aggregate_attention(&AttentionRecord::default()).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m: Vec<f32> = (0..64).map(|_| rng.random()).collect();
    let up = aggregate_attention(&AttentionRecord { layers: vec![LayerAttention { resolution: 8, map: Tensor::from_vec(&[1, 64], m.clone()) }] })
        .unwrap();
    let s0: f64 = m.iter().map(|&v| v as f64).sum();
    let s1: f64 = up.data().iter().map(|&v| v as f64).sum::<f64>() / 4.0;
    assert!((s0 - s1).abs() < 1e-6 * s0.max(1.0));
}

#[test]
fn shape_loss_examples() {
    let m: Vec<f64> = (0..16).map(|i| if (i % 4) < 2 { 1.0 } else { 0.0 }).collect();
    let mt = t64(&[4, 4], &m);
    // perfect alignment
    let s = shape_loss(&mt, &mt).unwrap();
    assert_eq!((s.fg, s.bg, s.shape), (0.0, 0.0, 0.0));
    // constant attention
    let s = shape_loss(&Tensor::full(&[4, 4], 0.3), &mt).unwrap();
    assert!((s.fg - 0.5).abs() < 1e-12 && (s.bg - 0.3).abs() < 1e-12);
    // inverted
    let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
    let s = shape_loss(&t64(&[4, 4], &inv), &mt).unwrap();
    assert!((s.fg - 0.5).abs() < 1e-12 && (s.bg - 1.0).abs() < 1e-12);
    assert!(matches!(shape_loss(&mt, &Tensor::zeros(&[4, 4])), Err(Error::DegenerateMask(_))));
}

#[test]
fn reg_and_total_examples() {
    assert_eq!(reg_loss(&t64(&[2], &[0.0, 0.0])).unwrap(), 0.0);
    assert_eq!(reg_loss(&t64(&[2], &[3.0, 4.0])).unwrap(), 5.0);
    let w = LossWeights::default();
    assert_eq!(total_loss(1.0, 0.0, 0.0, &w).unwrap(), 1.0);
    assert!((total_loss(1.0, 1.0, 1.0, &w).unwrap() - 1.011).abs() < 1e-12);
    assert_eq!(total_loss(0.7, 3.0, 9.0, &LossWeights { shape: 0.0, reg: 0.0 }).unwrap(), 0.7);
    assert!(LossWeights { shape: -1.0, reg: 0.0 }.validate().is_err());
}

proptest! {
    #[test]
    fn losses_match_scalar_loops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e: Vec<f64> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h: Vec<f64> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m: Vec<f64> = (0..16).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random() }).collect();
        let l = rec_loss(&t64(&[1, 3, 4, 4], &e), &t64(&[1, 3, 4, 4], &h), &t64(&[1, 1, 4, 4], &m)).unwrap();
        prop_assert!((l - oracle_rec(&e, &h, &m, 3)).abs() < 1e-9);

        let a: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let mut mm = m.clone();
        mm[0] = 1.0;
        let s = shape_loss(&t64(&[4, 4], &a), &t64(&[4, 4], &mm)).unwrap();
        let (fg, bg) = oracle_shape(&a, &mm);
        prop_assert!((s.fg - fg).abs() < 1e-9 && (s.bg - bg).abs() < 1e-9);
        prop_assert!(s.fg >= 0.0 && s.bg >= 0.0 && s.bg <= a.iter().cloned().fold(0.0, f64::max) + 1e-12);
    }

    #[test]
    fn total_is_monotone(r in 0.0..5.0f64, s in 0.0..5.0f64, g in 0.0..5.0f64, d in 0.0..1.0f64) {
        let w = LossWeights::default();
        let base = total_loss(r, s, g, &w).unwrap();
        prop_assert!(total_loss(r + d, s, g, &w).unwrap() >= base);
        prop_assert!(total_loss(r, s + d, g, &w).unwrap() >= base);
        prop_assert!(total_loss(r, s, g + d, &w).unwrap() >= base);
    }
}

fn fd_check(f: impl Fn(&[f64]) -> f64, analytic: &[f64], x: &[f64]) -> f64 {
    let h = 1e-5;
    let mut num = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut p = x.to_vec();
        p[i] += h;
        let fp = f(&p);
        p[i] -= 2.0 * h;
        num.push((fp - f(&p)) / (2.0 * h));
    }
    let diff: f64 = num.iter().zip(analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(analytic.iter().map(|a| a * a).sum::<f64>().sqrt()).max(1e-12);
    diff / scale
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let e: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let mut g = Graph::<f64>::new();
        let ev = g.constant(t64(&[1, 3, 4, 4], &e));
        let hv = g.param(t64(&[1, 3, 4, 4], &h));
        let mv = g.constant(t64(&[1, 1, 4, 4], &m));
        let l = rec_loss_graph(&mut g, ev, hv, mv).unwrap();
        let an = g.backward(l).get(hv).unwrap().data().to_vec();
        let f = |x: &[f64]| rec_loss(&t64(&[1, 3, 4, 4], &e), &t64(&[1, 3, 4, 4], x), &t64(&[1, 1, 4, 4], &m)).unwrap();
        assert!(fd_check(f, &an, &h) < 1e-6);

        let a: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let mut g = Graph::<f64>::new();
        let av = g.param(t64(&[1, 16], &a));
        let s = shape_loss_graph(&mut g, av, &t64(&[1, 16], &m)).unwrap();
        let an = g.backward(s.shape).get(av).unwrap().data().to_vec();
        let f = |x: &[f64]| shape_loss(&t64(&[4, 4], x), &t64(&[4, 4], &m)).unwrap().shape;
        assert!(fd_check(f, &an, &a) < 1e-6);

        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let vv = g.param(t64(&[8], &v));
        let l = reg_loss_graph(&mut g, vv);
        let an = g.backward(l).get(vv).unwrap().data().to_vec();
        assert!(fd_check(|x| reg_loss(&t64(&[8], x)).unwrap(), &an, &v) < 1e-6);
    }
}
