use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const TOL: f64 = 1e-2;
const SEEDS: u64 = 20;
const EPS: f32 = SUITE_EPS;

#[test]
fn softmax_t_examples() {
    let p = softmax_t(&Tensor::from_vec(vec![0.0, 0.0, 0.0]), 1.0).unwrap();
    for v in p.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let p = softmax_t(&Tensor::from_vec(vec![3f32.ln(), 0.0]), 1.0).unwrap();
    assert!((p.data()[0] - 0.75).abs() < 1e-6);
    assert!((p.data()[1] - 0.25).abs() < 1e-6);
    let p = softmax_t(&Tensor::from_vec(vec![4.0, -2.0]), 1e4).unwrap();
    assert!((p.data()[0] - 0.5).abs() < 1e-3);
}

#[test]
fn softmax_t_errors() {
    let t = Tensor::from_vec(vec![1.0, 2.0]);
    assert!(matches!(softmax_t(&t, 0.0), Err(Error::InvalidArgument(_))));
    assert!(matches!(softmax_t(&t, -1.0), Err(Error::InvalidArgument(_))));
    let bad = Tensor::from_vec(vec![1.0, f32::NAN]);
    assert!(matches!(softmax_t(&bad, 1.0), Err(Error::Numeric(_))));
}

#[test]
fn softmax_entropy_grows_with_temperature() {
    let logits = Tensor::randn(vec![7], 2.0, &mut rng(3));
    let entropy = |t: f32| -> f64 {
        softmax_t(&logits, t)
            .unwrap()
            .data()
            .iter()
            .map(|&p| if p > 0.0 { -(p as f64) * (p as f64).ln() } else { 0.0 })
            .sum()
    };
    let mut prev = entropy(0.25);
    for t in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let h = entropy(t);
        assert!(h >= prev - 1e-6, "entropy fell at T={t}");
        prev = h;
    }
}

#[test]
fn kl_examples() {
    // p = [0.75, 0.25] from logits [ln 3, 0]; q uniform.
    let t = Tensor::new(vec![1, 2], vec![3f32.ln(), 0.0]).unwrap();
    let s = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
    let got = kl_forward(&t, &s, 1.0).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!((want - 0.13081).abs() < 1e-5);

    let z = Tensor::randn(vec![3, 5], 3.0, &mut rng(1));
    assert!(kl_forward(&z, &z, 1.0).unwrap() < 1e-9);
    assert!(kl_forward(&z, &z, 7.5).unwrap() < 1e-9);

    let other = Tensor::randn(vec![3, 5], 3.0, &mut rng(2));
    let mut prev = f64::INFINITY;
    for temp in [1.0, 2.0, 4.0, 16.0, 256.0] {
        let l = kl_forward(&z, &other, temp).unwrap();
        assert!(l >= 0.0 && l < prev);
        prev = l;
    }
    assert!(prev < 1e-3);
}

#[test]
fn kl_shape_mismatch() {
    let a = Tensor::zeros(vec![2, 3]);
    let b = Tensor::zeros(vec![3, 2]);
    assert!(matches!(kl_forward(&a, &b, 1.0), Err(Error::InvalidArgument(_))));
}

#[test]
fn backward_quadratic() {
    let mut g = Graph::new();
    let w = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
}

#[test]
fn unreachable_parameter_gets_zero_grad() {
    let mut g = Graph::new();
    let w = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let x = g.param(Tensor::from_vec(vec![3.0]));
    let loss = g.sum(x);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[0.0, 0.0]);
    assert_eq!(g.grad(x).unwrap(), &[1.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let w = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.scale(w, 2.0);
    assert!(matches!(g.backward(y), Err(Error::InvalidArgument(_))));
}

#[test]
fn constants_never_get_grad_buffers() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let w = g.param(Tensor::from_vec(vec![0.5, 0.5]));
    let y = g.mul(c, w).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
}

#[test]
fn fan_out_gradients_add() {
    let x0 = Tensor::randn(vec![6], 1.0, &mut rng(9));
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let f = {
            let s = g.silu(x);
            g.sum(s)
        };
        let h = {
            let s = g.mul(x, x).unwrap();
            g.sum(s)
        };
        let loss = match which {
            0 => f,
            1 => h,
            _ => {
                let fv = g.reshape(f, &[1]).unwrap();
                let hv = g.reshape(h, &[1]).unwrap();
                let s = g.add(fv, hv).unwrap();
                g.sum(s)
            }
        };
        g.backward(loss).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    let (gf, gh, both) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..6 {
        assert_eq!(both[i], gh[i] + gf[i]);
    }
}

#[test]
fn finite_diff_check_examples() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
    let e = finite_diff_check(|g, v| Ok(g.sum(v)), &x, 1e-3).unwrap();
    assert!(e < 1e-3, "{e}");
    let e = finite_diff_check(
        |g, v| {
            let s = g.mul(v, v)?;
            Ok(g.sum(s))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(e < 1e-4, "{e}");
    assert!(finite_diff_check(|g, v| Ok(g.sum(v)), &x, 0.0).is_err());
    let e = finite_diff_check(
        |g, v| {
            let l = g.log(v);
            Ok(g.sum(l))
        },
        &Tensor::from_vec(vec![-1.0]),
        1e-3,
    );
    assert!(matches!(e, Err(Error::Numeric(_))));
}

#[test]
fn fused_and_composed_kl_agree() {
    let t = Tensor::randn(vec![3, 5], 2.0, &mut rng(4));
    let s = Tensor::randn(vec![3, 5], 2.0, &mut rng(5));
    let fused = kl_forward(&t, &s, 1.5).unwrap();
    let p = softmax_t(&t, 1.5).unwrap();
    let q = softmax_t(&s, 1.5).unwrap();
    let manual: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| a as f64 * ((a as f64).ln() - (b as f64).ln()))
        .sum::<f64>()
        / 3.0;
    assert!((fused - manual).abs() < 1e-6);
}

#[test]
fn gradcheck_two_layer_mlp() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = Tensor::randn(vec![4, 5], 1.0, &mut r);
        let w2 = Tensor::randn(vec![3, 6], 0.5, &mut r);
        let w1 = Tensor::randn(vec![6, 5], 0.5, &mut r);
        let targets = [0usize, 2, 1, 2];
        let err = finite_diff_check(
            |g, w| {
                let xv = g.constant(x.clone());
                let h = g.linear(xv, w)?;
                let a = g.silu(h);
                let w2v = g.constant(w2.clone());
                let z = g.linear(a, w2v)?;
                g.cross_entropy(z, &targets)
            },
            &w1,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-2, "seed {seed}: {err}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(77);
    for _ in 0..1000 {
        let v = r.random_range(1..40);
        let scale = r.random_range(0.1..20.0);
        let z = Tensor::randn(vec![2, v], scale, &mut r);
        let temp = r.random_range(0.1..10.0);
        let p = softmax_t(&z, temp).unwrap();
        for row in 0..2 {
            let s: f64 = p.row(row).iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sums to {s}");
        }
    }
}

#[test]
fn deterministic_replay() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(Tensor::randn(vec![8, 8], 1.0, &mut rng(11)));
        let w = g.constant(Tensor::randn(vec![8, 8], 1.0, &mut rng(12)));
        let y = g.matmul(x, w).unwrap();
        let s = g.softmax(y);
        let loss = g.cross_entropy(s, &[1, 2, 3, 4, 5, 6, 7, 0]).unwrap();
        g.backward(loss).unwrap();
        (g.value(loss).data().to_vec(), g.grad(x).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn gradient_suite_within_tolerance() {
    let cases = gradient_suite(SEEDS).unwrap();
    assert!(cases.iter().any(|c| c.name == "kl composed"));
    assert!(cases.iter().any(|c| c.metric == ErrorMetric::TensorNorm));
    for c in &cases {
        eprintln!("{:<40} {:>3} {:.2e}", c.name, c.elements, c.worst);
        assert!(c.elements <= 64, "{} has {} elements", c.name, c.elements);
        assert!(c.worst < TOL, "{}: relative error {}", c.name, c.worst);
    }
}
