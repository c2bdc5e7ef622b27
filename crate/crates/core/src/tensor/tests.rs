use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compare analytic gradients of `sum(f(inputs) * r)` against central differences.
fn check(shapes: &[&[usize]], seed: u64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let eval = |ins: &[Tensor<f64>], proj: Option<&Tensor<f64>>| -> (f64, Option<Vec<Tensor<f64>>>, Tensor<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let out_val = g.value(out).clone();
        let Some(r) = proj else { return (0.0, None, out_val) };
        let rv = g.constant(r.clone());
        let prod = g.mul(out, rv);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let gs = vars.iter().map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v)))).collect();
        (g.value(loss).item(), Some(gs), out_val)
    };
    let (_, _, out0) = eval(&inputs, None);
    let proj = rand_tensor(&mut rng, out0.shape());
    let (_, grads, _) = eval(&inputs, Some(&proj));
    let grads = grads.unwrap();
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let fp = eval(&plus, Some(&proj)).0;
            let fm = eval(&minus, Some(&proj)).0;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads[k].data()[j];
            let err = (fd - an).abs() / (1.0f64).max(fd.abs()).max(an.abs());
            assert!(err < 1e-6, "input {k} elem {j}: analytic {an} vs fd {fd}");
        }
    }
}

#[test]
fn elementwise_ops() {
    check(&[&[2, 3], &[2, 3]], 1, |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.mul(a, v[0]);
        let c = g.sub(b, v[1]);
        let d = g.silu(c);
        let e = g.square(d);
        let f = g.scale(e, 0.7);
        g.add_scalar(f, 0.3)
    });
}

#[test]
fn conv_variants() {
    check(&[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], 2, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
    check(&[&[1, 2, 6, 6], &[3, 2, 3, 3]], 3, |g, v| g.conv2d(v[0], v[1], None, 2, 1));
    check(&[&[2, 3, 4, 4], &[2, 3, 1, 1], &[2]], 4, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0));
}

#[test]
fn group_norm() {
    check(&[&[2, 4, 3, 3], &[4], &[4]], 5, |g, v| g.group_norm(v[0], v[1], v[2], 2));
}

#[test]
fn resampling_and_concat() {
    check(&[&[2, 2, 4, 4]], 6, |g, v| g.avg_pool(v[0], 2));
    check(&[&[1, 2, 2, 3]], 7, |g, v| g.upsample(v[0], 2));
    check(&[&[2, 2, 3, 3], &[2, 1, 3, 3]], 8, |g, v| g.concat_channels(v[0], v[1]));
}

#[test]
fn broadcasting_ops() {
    check(&[&[2, 3, 2, 2], &[2, 1, 2, 2]], 9, |g, v| g.mul_spatial(v[0], v[1]));
    check(&[&[2, 3, 2, 2], &[1, 1, 2, 2]], 10, |g, v| g.mul_spatial(v[0], v[1]));
    check(&[&[2, 3, 2, 2], &[2, 3]], 11, |g, v| g.add_channel(v[0], v[1]));
}

#[test]
fn linear_and_bmm() {
    check(&[&[2, 3, 4], &[5, 4], &[5]], 12, |g, v| g.linear(v[0], v[1], Some(v[2])));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let sb: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        check(&[sa, sb], 13, move |g, v| g.bmm(v[0], v[1], ta, tb));
    }
}

#[test]
fn attention_plumbing() {
    check(&[&[2, 3, 5]], 14, |g, v| g.softmax(v[0]));
    check(&[&[2, 3, 2, 2]], 15, |g, v| {
        let t = g.to_tokens(v[0]);
        g.from_tokens(t, 2, 2)
    });
    check(&[&[2, 4, 3]], 16, |g, v| g.from_tokens(v[0], 2, 2));
    check(&[&[2, 3, 6]], 17, |g, v| {
        let s = g.split_heads(v[0], 3);
        let s2 = g.square(s);
        g.merge_heads(s2, 3)
    });
    check(&[&[3, 4, 5]], 18, |g, v| g.select_last(v[0], vec![0, 4, 2]));
    check(&[&[2, 3, 4]], 19, |g, v| g.mean_mid(v[0]));
}

#[test]
fn embeddings_and_reductions() {
    check(&[&[5, 3]], 20, |g, v| g.embed(v[0], vec![0, 2, 2, 4], 2, 2));
    check(&[&[2, 3, 4], &[4]], 21, |g, v| g.splice(v[0], v[1], vec![(0, 1), (1, 2)]));
    check(&[&[2, 6]], 22, |g, v| {
        let r = g.reshape(v[0], &[3, 4]);
        let s = g.sum_all(r);
        let m = g.mean_all(v[0]);
        g.add(s, m)
    });
    check(&[&[7]], 23, |g, v| g.l2_norm(v[0]));
    check(&[&[3, 9]], 24, |g, v| g.minmax_norm_rows(v[0]));
}

#[test]
fn minmax_constant_row_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(&[2, 3], vec![2.0, 2.0, 2.0, 0.0, 1.0, 3.0]));
    let y = g.minmax_norm_rows(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0, 0.0, 1.0 / 3.0, 1.0]);
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut g = Graph::<f32>::new();
    let w = g.constant(Tensor::full(&[2, 2], 1.0));
    let x = g.param(Tensor::full(&[3, 2], 0.5));
    let y = g.linear(x, w, None);
    let l = g.sum_all(y);
    let grads = g.backward(l);
    assert!(grads.get(w).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[2.0; 6]);
}
