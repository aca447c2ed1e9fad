//! Built-in numerical checks: gradients against finite differences,
//! equivariance, causal masking, closed-form marginals and schedule sanity.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::GradFault;
use crate::continuous::{forward_marginal_sample, forward_step_sample};
use crate::denoiser::{ComplexState, Denoiser, DenoiserConfig};
use crate::discrete::{forward_marginal_distribution, forward_step_distribution, SequenceState};
use crate::error::Result;
use crate::linalg::Mat;
use crate::rng::{substream, Purpose};
use crate::schedules::{build_cosine_schedule, build_sigmoid_schedule, NoiseSchedule};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
/// Floor on the denominator of the gradient relative error.
pub const GRAD_REL_FLOOR: f64 = 1e-6;
pub const EQUIV_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub measured: f64,
    pub passed: bool,
}

impl CheckResult {
    fn below(name: impl Into<String>, tolerance: f64, measured: f64) -> Self {
        Self { name: name.into(), tolerance, measured, passed: measured < tolerance }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR)
}

pub fn random_state<R: Rng + ?Sized>(rng: &mut R, m: usize, n: usize, cfg: &DenoiserConfig) -> ComplexState<f64> {
    let k = cfg.alphabet;
    let mut seq = |len: usize| SequenceState::from_indices(&(0..len).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>(), k);
    let (ts, bs) = (seq(m), seq(n));
    let mut coords = |len: usize| Mat::from_vec(len, 3, (0..len * 3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
    let (tc, bc) = (coords(m), coords(n));
    ComplexState { target_seq: ts, target_coords: tc, binder_seq: bs, binder_coords: bc, t: rng.gen_range(1..=cfg.steps) }
}

/// The tiny configurations used by the gradient check.
pub fn gradient_check_configs() -> Vec<DenoiserConfig> {
    let base = DenoiserConfig { d_model: 8, heads: 2, k_nn: 3, steps: 20, blocks: 1, attn_layers: 1, causal_layers: 1, ..Default::default() };
    vec![
        base.clone(),
        DenoiserConfig { blocks: 2, causal_layers: 0, ..base.clone() },
        DenoiserConfig { attn_layers: 2, causal_layers: 2, heads: 4, k_nn: 5, ..base },
    ]
}

/// Largest relative error between backward and central differences over all
/// parameters of a random model (`M = 3`, `N = 4`), for the probe loss
/// `Σ G_s ⊙ ŝ0 + Σ G_x ⊙ x̂0` with random `G`.
pub fn gradient_check(cfg: &DenoiserConfig, seed: u64, fault: GradFault) -> Result<f64> {
    let mut rng = substream(seed, Purpose::Check, 0);
    let state = random_state(&mut rng, 3, 4, cfg);
    let mut den = Denoiser::<f64>::new(cfg.clone(), seed)?;
    let gs = Mat::from_vec(4, cfg.alphabet, (0..4 * cfg.alphabet).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let gx = Mat::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let probe = |den: &Denoiser<f64>| -> Result<f64> {
        let p = den.predict_clean(&state)?;
        let a: f64 = p.s0_hat.as_slice().iter().zip(gs.as_slice()).map(|(a, b)| a * b).sum();
        let b: f64 = p.x0_hat.as_slice().iter().zip(gx.as_slice()).map(|(a, b)| a * b).sum();
        Ok(a + b)
    };
    let pass = den.forward(&state, true)?;
    let grads = den.backward_with_fault(&pass, &gs, &gx, fault)?;
    let mut worst = 0.0f64;
    for ti in 0..den.params().len() {
        for j in 0..den.params().get(ti).as_slice().len() {
            let orig = den.params().get(ti).as_slice()[j];
            den.params_mut().tensors_mut()[ti].as_mut_slice()[j] = orig + GRAD_STEP;
            let up = probe(&den)?;
            den.params_mut().tensors_mut()[ti].as_mut_slice()[j] = orig - GRAD_STEP;
            let down = probe(&den)?;
            den.params_mut().tensors_mut()[ti].as_mut_slice()[j] = orig;
            let numeric = (up - down) / (2.0 * GRAD_STEP);
            worst = worst.max(relative_error(grads.params[ti].as_slice()[j], numeric));
        }
    }
    Ok(worst)
}

/// Random proper rotation (uniform quaternion) and translation.
pub fn random_motion<R: Rng + ?Sized>(rng: &mut R) -> ([[f64; 3]; 3], [f64; 3]) {
    let q: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let r = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let u = [0, 1, 2].map(|_| rng.gen_range(-5.0..5.0));
    (r, u)
}

pub fn apply_motion(x: &Mat<f64>, r: &[[f64; 3]; 3], u: &[f64; 3]) -> Mat<f64> {
    let mut out = Mat::zeros(x.rows(), 3);
    for i in 0..x.rows() {
        let p = x.row(i);
        for a in 0..3 {
            out.row_mut(i)[a] = r[a][0] * p[0] + r[a][1] * p[1] + r[a][2] * p[2] + u[a];
        }
    }
    out
}

fn max_abs(m: &Mat<f64>) -> f64 {
    m.as_slice().iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Worst relative deviation from covariance of `x̂0` and invariance of `ŝ0`
/// over `motions` random rigid motions.
pub fn equivariance_check(motions: usize, seed: u64) -> Result<(f64, f64)> {
    let cfg = DenoiserConfig { d_model: 16, heads: 2, k_nn: 6, steps: 50, ..Default::default() };
    let mut rng = substream(seed, Purpose::Check, 1);
    let den = Denoiser::<f64>::new(cfg.clone(), seed)?;
    let state = random_state(&mut rng, 8, 10, &cfg);
    let base = den.predict_clean(&state)?;
    let (mut worst_x, mut worst_s) = (0.0f64, 0.0f64);
    for _ in 0..motions {
        let (r, u) = random_motion(&mut rng);
        let mut moved = state.clone();
        moved.target_coords = apply_motion(&state.target_coords, &r, &u);
        moved.binder_coords = apply_motion(&state.binder_coords, &r, &u);
        let p = den.predict_clean(&moved)?;
        let expect = apply_motion(&base.x0_hat, &r, &u);
        worst_x = worst_x.max(p.x0_hat.max_abs_diff(&expect) / max_abs(&expect).max(1e-12));
        worst_s = worst_s.max(p.s0_hat.max_abs_diff(&base.s0_hat) / max_abs(&base.s0_hat).max(1e-12));
    }
    Ok((worst_x, worst_s))
}

/// Number of (position, perturbation) cases in which causal-stack output at
/// position `i` changed after perturbing inputs at positions `> i`.
pub fn causality_check(trials: usize, seed: u64) -> Result<usize> {
    let cfg = DenoiserConfig { d_model: 16, heads: 4, causal_layers: 2, ..Default::default() };
    let den = Denoiser::<f64>::new(cfg.clone(), seed)?;
    let mut rng = substream(seed, Purpose::Check, 2);
    let n = 9;
    let mut violations = 0;
    for _ in 0..trials {
        let h = Mat::from_vec(n, cfg.d_model, (0..n * cfg.d_model).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        let base = den.causal_head(&h);
        let i = rng.gen_range(0..n - 1);
        let mut hp = h.clone();
        for r in i + 1..n {
            for v in hp.row_mut(r) {
                *v += rng.gen_range(-10.0..10.0);
            }
        }
        let out = den.causal_head(&hp);
        if (0..=i).any(|r| out.row(r) != base.row(r)) {
            violations += 1;
        }
    }
    Ok(violations)
}

/// Largest deviation of `t`-fold composed categorical kernels from the
/// closed-form marginal, over every alphabet index and `t ≤ max_t`.
pub fn categorical_composition_error(sched: &NoiseSchedule<f64>, k: usize, max_t: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for hot in 0..k {
        let mut s0 = vec![0.0; k];
        s0[hot] = 1.0;
        let mut cur = s0.clone();
        for t in 1..=max_t.min(sched.steps()) {
            // Apply the one-step kernel to a distribution by linearity.
            let mut next = vec![0.0; k];
            for (j, &w) in cur.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let mut e = vec![0.0; k];
                e[j] = 1.0;
                for (n, v) in next.iter_mut().zip(forward_step_distribution(&e, sched.beta(t))?) {
                    *n += w * v;
                }
            }
            cur = next;
            let closed = forward_marginal_distribution(&s0, sched.alpha_bar(t))?;
            worst = worst.max(cur.iter().zip(&closed).fold(0.0, |a, (x, y)| a.max((x - y).abs())));
        }
    }
    Ok(worst)
}

/// Relative Monte Carlo errors `(mean, variance)` of iterated Gaussian steps
/// against the closed-form marginal at step `t`, starting from `x0 = 1`.
pub fn gaussian_composition_error(sched: &NoiseSchedule<f64>, t: usize, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = substream(seed, Purpose::Check, 3 + t as u64);
    let x0 = Mat::filled(1, 1, 1.0);
    let mut it = Vec::with_capacity(samples);
    let mut cf = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut x = x0.clone();
        for s in 1..=t {
            x = forward_step_sample(&x, sched.beta(s), &mut rng);
        }
        it.push(x[(0, 0)]);
        cf.push(forward_marginal_sample(&x0, sched.alpha_bar(t), &mut rng).0[(0, 0)]);
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    };
    let (m1, v1) = stats(&it);
    let (m2, v2) = stats(&cf);
    let abar = sched.alpha_bar(t);
    let (m_exact, v_exact) = (abar.sqrt(), 1.0 - abar);
    let rel_m = |m: f64| (m - m_exact).abs() / m_exact;
    let rel_v = |v: f64| (v - v_exact).abs() / v_exact;
    Ok((rel_m(m1).max(rel_m(m2)), rel_v(v1).max(rel_v(v2))))
}

/// Schedule invariants: `α + β = 1`, `ᾱ` strictly decreasing, `β̃ ∈ [0, β]`,
/// `β̃_1 = 0`; returns the number of violations.
pub fn schedule_violations(sched: &NoiseSchedule<f64>) -> usize {
    let mut bad = 0;
    let mut prev = 1.0;
    for t in 1..=sched.steps() {
        bad += usize::from(sched.alpha(t) + sched.beta(t) != 1.0);
        bad += usize::from(sched.alpha_bar(t) >= prev);
        bad += usize::from(!(0.0..=sched.beta(t)).contains(&sched.beta_tilde(t)));
        prev = sched.alpha_bar(t);
    }
    bad + usize::from(sched.beta_tilde(1) != 0.0)
}

/// Runs the suite. `quick` trims repetitions; `fault` is forwarded to the
/// gradient check.
pub fn run_all(quick: bool, fault: GradFault) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let configs = gradient_check_configs();
    let n_cfg = if quick { 1 } else { configs.len() };
    for (i, cfg) in configs.iter().take(n_cfg).enumerate() {
        let err = gradient_check(cfg, 100 + i as u64, fault)?;
        out.push(CheckResult::below(format!("gradient check (config {})", i + 1), GRAD_TOL, err));
    }
    let (ex, es) = equivariance_check(if quick { 10 } else { 100 }, 7)?;
    out.push(CheckResult::below("equivariance of x0_hat", EQUIV_TOL, ex));
    out.push(CheckResult::below("invariance of s0_hat", EQUIV_TOL, es));
    let v = causality_check(if quick { 20 } else { 200 }, 8)?;
    out.push(CheckResult { name: "causal mask (violations)".into(), tolerance: 0.0, measured: v as f64, passed: v == 0 });

    let cos = build_cosine_schedule::<f64>(1000, 0.01)?;
    let sig = build_sigmoid_schedule::<f64>(1000, 1e-7, 2e-3, 2.0)?;
    let short = build_cosine_schedule::<f64>(50, 0.01)?;
    out.push(CheckResult::below("categorical composition vs closed form", 1e-10, categorical_composition_error(&short, 20, 50)?));
    for t in [2usize, 10, 100, 1000] {
        let (em, ev) = gaussian_composition_error(&sig, t, 100_000, 9)?;
        out.push(CheckResult::below(format!("gaussian composition mean (t={t})"), 0.03, em));
        out.push(CheckResult::below(format!("gaussian composition variance (t={t})"), 0.03, ev));
    }
    for (name, s) in [("cosine", &cos), ("sigmoid", &sig)] {
        let bad = schedule_violations(s);
        out.push(CheckResult { name: format!("{name} schedule sanity (violations)"), tolerance: 0.0, measured: bad as f64, passed: bad == 0 });
    }
    Ok(out)
}
