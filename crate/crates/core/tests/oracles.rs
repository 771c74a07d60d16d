//! Finite-difference and Monte-Carlo oracles for the model's derivative
//! services.

use dsflow_core::model::fields::{ConstantField, LinearField};
use dsflow_core::model::{
    exact_divergence, hutchinson_divergence, hutchinson_with_probes, input_jvp, ModelParams, ModelSpec, VelocityField,
};
use dsflow_core::ndcore::{sample_unit_sphere, RandomSource};
use ndarray::{array, Array2};

fn net(widths: Vec<usize>, seed: u64) -> ModelParams {
    ModelParams::init(&ModelSpec::new(2, widths).unwrap(), &mut RandomSource::new(seed, 0))
}

/// Random `(t, x)` whose hidden pre-activations all clear `margin`.
fn smooth_point(p: &ModelParams, rng: &mut RandomSource, margin: f64) -> (f64, Array2<f64>) {
    loop {
        let t = rng.uniform();
        let x = array![[2.0 * rng.gaussian(), 2.0 * rng.gaussian()]];
        if p.min_preactivation_margin(&[t], &x) > margin {
            return (t, x);
        }
    }
}

#[test]
fn parameter_gradient_matches_central_differences() {
    let h = 1e-4;
    let mut p = net(vec![8, 8, 8], 11);
    let mut rng = RandomSource::new(12, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (t, x) = smooth_point(&p, &mut rng, 10.0 * h);
        let target = array![[rng.gaussian(), rng.gaussian()]];
        let g = p.param_gradient(&[t], &x, &target).unwrap().flat();
        for (k, &analytic) in g.iter().enumerate() {
            let orig = p.get_flat(k);
            p.set_flat(k, orig + h);
            let up = p.mean_squared_residual(&[t], &x, &target);
            p.set_flat(k, orig - h);
            let down = p.mean_squared_residual(&[t], &x, &target);
            p.set_flat(k, orig);
            let fd = (up - down) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn input_jvp_matches_central_differences() {
    let h = 1e-5;
    let p = net(vec![64, 64, 64], 3);
    let mut rng = RandomSource::new(4, 0);
    for _ in 0..100 {
        let (t, x) = smooth_point(&p, &mut rng, 10.0 * h);
        let u = sample_unit_sphere(&mut rng, 2);
        let j = input_jvp(&p, t, x.row(0).as_slice().unwrap(), &u).unwrap();
        let shift = array![[h * u[0], h * u[1]]];
        let fd = (p.velocity(t, &(&x + &shift)) - p.velocity(t, &(&x - &shift))) / (2.0 * h);
        for k in 0..2 {
            assert!((j[k] - fd[[0, k]]).abs() <= 1e-6, "{} vs {}", j[k], fd[[0, k]]);
        }
    }
    assert!(input_jvp(&p, 0.5, &[0.0, 0.0], &[2.0, 0.0]).is_err());
}

#[test]
fn exact_divergence_matches_central_differences() {
    let h = 1e-5;
    let p = net(vec![64, 64, 64], 5);
    let mut rng = RandomSource::new(6, 0);
    for _ in 0..100 {
        let (t, x) = smooth_point(&p, &mut rng, 10.0 * h);
        let (_, div) = exact_divergence(&p, t, &x).unwrap();
        let mut fd = 0.0;
        for k in 0..2 {
            let mut e = Array2::zeros((1, 2));
            e[[0, k]] = h;
            fd += (p.velocity(t, &(&x + &e))[[0, k]] - p.velocity(t, &(&x - &e))[[0, k]]) / (2.0 * h);
        }
        assert!((div[0] - fd).abs() <= 1e-5, "{} vs {fd}", div[0]);
    }
}

#[test]
fn exact_divergence_of_simple_fields() {
    let x = array![[0.3, 4.0], [-2.0, 1.0]];
    let (_, d) = exact_divergence(&LinearField::new(vec![vec![2.0, 0.0], vec![0.0, 3.0]]), 0.2, &x).unwrap();
    assert_eq!(d, vec![5.0, 5.0]);
    let (_, d) = exact_divergence(&ConstantField(vec![1.0, -1.0]), 0.2, &x).unwrap();
    assert_eq!(d, vec![0.0, 0.0]);
    let big = ConstantField(vec![0.0; 5]);
    assert!(exact_divergence(&big, 0.0, &Array2::zeros((1, 5))).is_err());
}

fn all_sign_probes(d: usize) -> Vec<Array2<f64>> {
    (0..1usize << d)
        .map(|mask| Array2::from_shape_fn((1, d), |(_, k)| if mask >> k & 1 == 1 { -1.0 } else { 1.0 }))
        .collect()
}

#[test]
fn full_sign_enumeration_is_exact() {
    let a = LinearField::new(vec![vec![2.0, 1.0], vec![1.0, 3.0]]);
    let est = hutchinson_with_probes(&a, 0.0, &array![[0.7, -0.2]], &all_sign_probes(2));
    assert!((est.values[0] - 2.5).abs() <= 1e-12);

    let p = net(vec![64, 64, 64], 7);
    let mut rng = RandomSource::new(8, 0);
    for _ in 0..20 {
        let (t, x) = smooth_point(&p, &mut rng, 0.0);
        let (v, div) = exact_divergence(&p, t, &x).unwrap();
        let est = hutchinson_with_probes(&p, t, &x, &all_sign_probes(2));
        assert!((est.values[0] * 2.0 - div[0]).abs() <= 1e-12 * (1.0 + div[0].abs()));
        assert_eq!(est.velocity, v);
    }
    let c = hutchinson_divergence(&ConstantField(vec![3.0, 1.0]), 0.1, &x_batch(), &mut [RandomSource::new(1, 1)], 4);
    assert!(c.unwrap().values.iter().all(|&v| v == 0.0));
}

fn x_batch() -> Array2<f64> {
    array![[0.0, 0.0], [1.0, -1.0], [5.0, 2.0]]
}

#[test]
fn hutchinson_is_unbiased() {
    let p = net(vec![64, 64, 64], 9);
    let x = array![[0.4, -0.3]];
    let t = 0.35;
    let (_, div) = exact_divergence(&p, t, &x).unwrap();
    let mut rng = [RandomSource::new(10, 0)];
    let reps = 10_000;
    let vals: Vec<f64> = (0..reps).map(|_| hutchinson_divergence(&p, t, &x, &mut rng, 1).unwrap().values[0]).collect();
    let mean = vals.iter().sum::<f64>() / reps as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let se = sd / (reps as f64).sqrt();
    assert!((mean - div[0] / 2.0).abs() <= 3.0 * se + 1e-12, "mean {mean} exact/d {} se {se}", div[0] / 2.0);
}

#[test]
fn hutchinson_spread_shrinks_as_inverse_sqrt_probes() {
    let p = net(vec![64, 64, 64], 13);
    let x = array![[0.1, 0.9]];
    let t = 0.6;
    let mut rng = [RandomSource::new(14, 0)];
    let reps = 4000;
    let sd = |n_h: usize, rng: &mut [RandomSource; 1]| {
        let v: Vec<f64> = (0..reps).map(|_| hutchinson_divergence(&p, t, &x, rng, n_h).unwrap().values[0]).collect();
        let m = v.iter().sum::<f64>() / reps as f64;
        (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
    };
    let base = sd(1, &mut rng);
    assert!(base > 0.0, "probe noise vanished; pick another net");
    for n_h in [4usize, 16, 64] {
        let ratio = sd(n_h, &mut rng) * (n_h as f64).sqrt() / base;
        assert!((1.0 / 1.5..=1.5).contains(&ratio), "n_h {n_h}: ratio {ratio}");
    }
}
