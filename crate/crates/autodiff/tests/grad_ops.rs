//! Finite-difference checks for every differentiable op in 64-bit mode.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viconex_autodiff::{grad_check, grad_check_graph, Graph, PoolKind, Result, Tensor, Var};

const EPS: f64 = 1e-5;
/// Ops linear in each single parameter have exact central differences at any
/// step, so a large step keeps roundoff out of the comparison.
const LINEAR_EPS: f64 = 1e-1;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// contributes a distinct gradient.
fn probe(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7919).sin()).collect();
    let w = g.constant(Tensor::new(&shape, w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn check(params: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    check_step(params, EPS, build)
}

fn check_step(params: Vec<Tensor<f64>>, eps: f64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    grad_check_graph(&params, eps, None, |g, v| {
        let y = build(g, v)?;
        probe(g, y)
    })
    .unwrap()
    .max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_grad(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = vec![rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n])];
        prop_assert!(check_step(p, LINEAR_EPS, |g, v| g.matmul(v[0], v[1])) < TOL);
    }

    #[test]
    fn bmm_grad(seed in any::<u64>(), trans in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bshape = if trans { [2, 4, 3] } else { [2, 3, 4] };
        let p = vec![rand_tensor(&mut rng, &[2, 2, 3]), rand_tensor(&mut rng, &bshape)];
        prop_assert!(check_step(p, LINEAR_EPS, move |g, v| g.bmm(v[0], v[1], trans)) < TOL);
    }

    #[test]
    fn elementwise_grads(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[3])];
        let e = check(p.clone(), |g, v| { let a = g.mul(v[0], v[1])?; let b = g.sub(a, v[1])?; g.add(b, v[0]) });
        prop_assert!(e < TOL);
        let e = check(p.clone(), |g, v| { let a = g.add_bcast(v[0], v[2])?; g.mul_bcast(a, v[2]) });
        prop_assert!(e < TOL);
        let e = check(p.clone(), |g, v| { let a = g.scale(v[0], 1.7); Ok(g.add_scalar(a, 0.3)) });
        prop_assert!(e < TOL);
        prop_assert!(check(p.clone(), |g, v| Ok(g.gelu(v[0]))) < TOL);
        prop_assert!(check(p.clone(), |g, v| Ok(g.sigmoid(v[0]))) < TOL);
        prop_assert!(check(p.clone(), |g, v| Ok(g.softplus(v[0]))) < TOL);
    }

    #[test]
    fn relu_grad_away_from_kink(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..6).map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen::<bool>() { v } else { -v }
        }).collect();
        let p = vec![Tensor::new(&[2, 3], data).unwrap()];
        prop_assert!(check(p, |g, v| Ok(g.relu(v[0]))) < TOL);
    }

    #[test]
    fn softmax_family_grads(seed in any::<u64>(), axis in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = vec![rand_tensor(&mut rng, &[2, 3, 4])];
        prop_assert!(check(p.clone(), move |g, v| g.softmax(v[0], axis)) < TOL);
        prop_assert!(check(p, |g, v| g.log_softmax(v[0])) < TOL);
    }

    #[test]
    fn normalization_grads(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = vec![rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[5])];
        prop_assert!(check(p.clone(), |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)) < TOL);
        prop_assert!(check(p, |g, v| g.l2_normalize(v[0])) < TOL);
    }

    #[test]
    fn shape_op_grads(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 1, 4])];
        prop_assert!(check(p.clone(), |g, v| g.permute(v[0], &[2, 0, 1])) < TOL);
        prop_assert!(check(p.clone(), |g, v| g.reshape(v[0], &[6, 4])) < TOL);
        prop_assert!(check(p.clone(), |g, v| g.slice(v[0], 1, 1, 2)) < TOL);
        prop_assert!(check(p.clone(), |g, v| g.concat(&[v[0], v[1]], 1)) < TOL);
        prop_assert!(check(p.clone(), |g, v| Ok(g.expand_leading(v[1], 3))) < TOL);
        prop_assert!(check(p.clone(), |g, v| g.sum_axis(v[0], 1)) < TOL);
        prop_assert!(check(p.clone(), |g, v| g.mean_axis(v[0], 2)) < TOL);
        prop_assert!(check(p, |g, v| Ok(g.mean_all(v[0]))) < TOL);
    }

    #[test]
    fn conv_grad(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = vec![rand_tensor(&mut rng, &[2, 3, 3, 2]), rand_tensor(&mut rng, &[k, k, 2, 3]), rand_tensor(&mut rng, &[3])];
        prop_assert!(check_step(p, LINEAR_EPS, |g, v| g.conv2d(v[0], v[1], Some(v[2]))) < TOL);
    }

    #[test]
    fn pool_grads(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = vec![rand_tensor(&mut rng, &[2, 3, 3, 2])];
        for kind in [PoolKind::Gap, PoolKind::Gmp, PoolKind::Gwrp { decay: 0.9 }] {
            prop_assert!(check(p.clone(), move |g, v| g.pool(v[0], kind)) < TOL);
        }
    }
}

#[test]
fn tiny_two_layer_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = vec![
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[3, 5]),
        rand_tensor(&mut rng, &[5]),
        rand_tensor(&mut rng, &[5, 2]),
    ];
    let err = check(p, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_bcast(h, v[2])?;
        let h = g.gelu(h);
        let o = g.matmul(h, v[3])?;
        g.softmax(o, 1)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn corrupted_gradient_rule_is_caught() {
    // Gradient of sum(sin-weighted gelu(x)) with the analytic rule replaced by
    // the identity (as if gelu' were 1).
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[6]);
    let w: Vec<f64> = (0..6).map(|i| ((i as f64 + 1.0) * 0.7919).sin()).collect();
    let f = |t: &[f64]| {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new(&[6], t.to_vec()).unwrap());
        let y = g.gelu(v);
        g.value(y).data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
    };
    let wrong: Vec<f64> = w.clone();
    let r = grad_check(f, x.data(), &wrong, &(0..6).collect::<Vec<_>>(), 1e-5);
    assert!(r.max_rel_error > 1e-2, "{r:?}");
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f32>::new();
        let a = g.constant(rand_tensor(&mut rng, &[17, 33]).cast());
        let b = g.constant(rand_tensor(&mut rng, &[33, 9]).cast());
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run(), run());
}
