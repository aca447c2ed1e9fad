use std::f64::consts::FRAC_PI_2;

use binderdiff::continuous::{forward_marginal_sample, forward_step_sample, posterior_mean_variance};
use binderdiff::discrete::{
    categorical_kl, forward_marginal_distribution, forward_step_distribution, posterior_distribution,
    posterior_kl_with_grad,
};
use binderdiff::linalg::Mat;
use binderdiff::schedules::{build_cosine_schedule, build_sigmoid_schedule, NoiseSchedule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn one_hot(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

fn cosine() -> NoiseSchedule<f64> {
    build_cosine_schedule(1000, 0.01).unwrap()
}

fn sigmoid() -> NoiseSchedule<f64> {
    build_sigmoid_schedule(1000, 1e-7, 2e-3, 2.0).unwrap()
}

#[test]
fn cosine_alpha_bar_matches_direct_formula() {
    let s = cosine();
    let f = |t: f64| (((t / 1000.0 + 0.01) / 1.01) * FRAC_PI_2).cos().powi(2);
    for t in [1usize, 2, 10, 250, 500, 900, 999] {
        let direct = f(t as f64) / f(0.0);
        assert!((s.alpha_bar(t) - direct).abs() < 1e-12, "t={t}: {} vs {direct}", s.alpha_bar(t));
    }
    assert!(s.alpha_bar(1000) < 1e-6);
}

#[test]
fn sigmoid_endpoints_and_terminal_alpha_bar() {
    let s = sigmoid();
    assert_eq!(s.beta(1), 1e-7);
    assert_eq!(s.beta(1000), 2e-3);
    // Product of (1 − β) computed independently from the betas.
    let prod: f64 = (1..=1000).map(|t| 1.0 - s.beta(t)).product();
    assert!((s.alpha_bar(1000) - prod).abs() < 1e-12);
    // The structure chain stays far from pure noise at T.
    assert!(prod > 0.3 && prod < 0.45, "alpha_bar_T = {prod}");
    assert!(build_sigmoid_schedule::<f64>(1, 1e-7, 2e-3, 2.0).is_err());
}

#[test]
fn categorical_composition_matches_marginal() {
    let s = build_cosine_schedule::<f64>(50, 0.01).unwrap();
    for k in [2usize, 5, 20] {
        for hot in 0..k {
            let s0 = one_hot(k, hot);
            // Transition matrix composition, written out explicitly.
            let mut dist = s0.clone();
            for t in 1..=50 {
                let b = s.beta(t);
                let next: Vec<f64> = (0..k)
                    .map(|j| (0..k).map(|i| dist[i] * ((1.0 - b) * f64::from(u8::from(i == j)) + b / k as f64)).sum())
                    .collect();
                dist = next;
                let closed = forward_marginal_distribution(&s0, s.alpha_bar(t)).unwrap();
                for (a, c) in dist.iter().zip(&closed) {
                    assert!((a - c).abs() < 1e-10, "k={k} t={t}");
                }
            }
        }
    }
}

#[test]
fn forward_step_is_row_of_transition_matrix() {
    let row = forward_step_distribution(&one_hot(4, 1), 0.2).unwrap();
    for (a, b) in row.iter().zip([0.05, 0.85, 0.05, 0.05]) {
        assert!((a - b).abs() < 1e-15);
    }
}

/// Bayes by enumeration: q(s_{t−1}=j | s_t, s0) ∝ q(s_t | s_{t−1}=j)·q(s_{t−1}=j | s0).
fn enumerated_posterior(s_t: usize, s0: &[f64], t: usize, s: &NoiseSchedule<f64>) -> Vec<f64> {
    let k = s0.len();
    let kf = k as f64;
    let step = |from: usize, to: usize| (1.0 - s.beta(t)) * f64::from(u8::from(from == to)) + s.beta(t) / kf;
    let prior = |j: usize| s.alpha_bar(t - 1) * s0[j] + (1.0 - s.alpha_bar(t - 1)) / kf;
    let w: Vec<f64> = (0..k).map(|j| step(j, s_t) * prior(j)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

#[test]
fn categorical_posterior_matches_enumeration() {
    let s = cosine();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let k = rng.gen_range(2..=20);
        let t = rng.gen_range(1..=1000);
        let s_t = rng.gen_range(0..k);
        // Half the cases use a soft s0 (a predicted row).
        let s0 = if rng.gen_bool(0.5) {
            one_hot(k, rng.gen_range(0..k))
        } else {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / z).collect()
        };
        let got = posterior_distribution(&one_hot(k, s_t), &s0, t, &s).unwrap();
        let want = enumerated_posterior(s_t, &s0, t, &s);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "k={k} t={t}");
        }
    }
}

#[test]
fn posterior_kl_gradient_matches_finite_differences() {
    let s = cosine();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let k = 6;
        let t = rng.gen_range(2..=1000);
        let s_t = one_hot(k, rng.gen_range(0..k));
        let s0 = one_hot(k, rng.gen_range(0..k));
        let hat: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let (kl, g) = posterior_kl_with_grad(&s_t, &s0, &hat, t, &s).unwrap();
        let q = enumerated_posterior(s_t.iter().position(|&v| v == 1.0).unwrap(), &s0, t, &s);
        let p = enumerated_posterior(s_t.iter().position(|&v| v == 1.0).unwrap(), &hat, t, &s);
        assert!((kl - categorical_kl(&q, &p)).abs() < 1e-12);
        let h = 1e-6;
        for j in 0..k {
            let mut up = hat.clone();
            up[j] += h;
            let mut dn = hat.clone();
            dn[j] -= h;
            let f = |v: &[f64]| posterior_kl_with_grad(&s_t, &s0, v, t, &s).unwrap().0;
            let num = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((num - g[j]).abs() <= 1e-6 * num.abs().max(1.0), "t={t} j={j}: {num} vs {}", g[j]);
        }
    }
}

/// `1 − Π_{s≤t}(1 − β_s)` through log-space, free of cancellation near 1.
fn one_minus_product(s: &NoiseSchedule<f64>, t: usize) -> f64 {
    -(1..=t).map(|u| (-s.beta(u)).ln_1p()).sum::<f64>().exp_m1()
}

#[test]
fn gaussian_posterior_matches_scalar_conjugate_oracle() {
    for s in [cosine(), sigmoid()] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = rng.gen_range(2..=1000);
            let (x0, xt): (f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            // x_{t−1} ~ N(√ᾱ_{t−1} x0, 1 − ᾱ_{t−1}); x_t | x_{t−1} ~ N(√α_t x_{t−1}, β_t).
            let (m_prior, v_prior) = (s.alpha_bar(t - 1).sqrt() * x0, one_minus_product(&s, t - 1));
            let (a, v_lik) = (s.alpha(t).sqrt(), s.beta(t));
            let precision = 1.0 / v_prior + a * a / v_lik;
            let var = 1.0 / precision;
            let mean = var * (m_prior / v_prior + a * xt / v_lik);
            let (mu, v) = posterior_mean_variance(&Mat::filled(1, 1, xt), &Mat::filled(1, 1, x0), t, &s).unwrap();
            assert!((mu[(0, 0)] - mean).abs() < 1e-10 * mean.abs().max(1.0), "t={t}");
            assert!((v - var).abs() < 1e-10 * var.max(1e-300) + 1e-16, "t={t}: {v} vs {var}");
        }
        let (mu, v) = posterior_mean_variance(&Mat::filled(2, 3, 0.7), &Mat::filled(2, 3, -1.25), 1, &s).unwrap();
        assert_eq!(mu, Mat::filled(2, 3, -1.25));
        assert_eq!(v, 0.0);
    }
}

#[test]
fn gaussian_composition_monte_carlo() {
    let s = build_cosine_schedule::<f64>(100, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x0 = Mat::filled(1, 1, 2.0);
    let t = 30;
    let n = 100_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    let (mut sum_c, mut sq_c) = (0.0, 0.0);
    for _ in 0..n {
        let mut x = x0.clone();
        for step in 1..=t {
            x = forward_step_sample(&x, s.beta(step), &mut rng);
        }
        sum += x[(0, 0)];
        sq += x[(0, 0)] * x[(0, 0)];
        let c = forward_marginal_sample(&x0, s.alpha_bar(t), &mut rng).0[(0, 0)];
        sum_c += c;
        sq_c += c * c;
    }
    let nf = n as f64;
    let (m_exact, v_exact) = (2.0 * s.alpha_bar(t).sqrt(), 1.0 - s.alpha_bar(t));
    for (sm, ss) in [(sum, sq), (sum_c, sq_c)] {
        let m = sm / nf;
        let v = ss / nf - m * m;
        assert!((m - m_exact).abs() / m_exact < 0.03);
        assert!((v - v_exact).abs() / v_exact < 0.03);
    }
}

proptest! {
    #[test]
    fn posterior_is_a_distribution(k in 2usize..=20, t in 1usize..=1000, a in 0usize..20, b in 0usize..20) {
        let s = cosine();
        let p = posterior_distribution(&one_hot(k, a % k), &one_hot(k, b % k), t, &s).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_truth(k in 2usize..=20, t in 2usize..=1000, a in 0usize..20, b in 0usize..20, seed in 0u64..1000) {
        let s = cosine();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hat: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let (st, s0) = (one_hot(k, a % k), one_hot(k, b % k));
        let (kl, _) = posterior_kl_with_grad(&st, &s0, &hat, t, &s).unwrap();
        prop_assert!(kl >= -1e-15);
        let (kl0, _) = posterior_kl_with_grad(&st, &s0, &s0, t, &s).unwrap();
        prop_assert!(kl0.abs() < 1e-15);
    }
}
