//! Categorical diffusion over residue types with a uniform noise kernel.
//!
//! Rows diffuse independently. A noisy latent row is always a sampled
//! one-hot; predicted clean rows are simplex points.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;
use crate::schedules::NoiseSchedule;

/// Floor applied to the second argument of a KL before the log.
pub const LOG_FLOOR: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

/// `n × K` matrix of one-hot or simplex rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceState<S> {
    rows: Mat<S>,
}

impl<S: Scalar> SequenceState<S> {
    pub fn from_indices(indices: &[usize], k: usize) -> Self {
        let mut rows = Mat::zeros(indices.len(), k);
        for (i, &c) in indices.iter().enumerate() {
            rows[(i, c)] = S::one();
        }
        Self { rows }
    }

    pub fn from_mat(rows: Mat<S>) -> Result<Self> {
        for i in 0..rows.rows() {
            check_simplex(rows.row(i))?;
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn alphabet_size(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[S] {
        self.rows.row(i)
    }

    pub fn as_mat(&self) -> &Mat<S> {
        &self.rows
    }

    /// Index of the largest entry per row (first on ties).
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.row(i))).collect()
    }
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_simplex<S: Scalar>(row: &[S]) -> Result<()> {
    let sum: S = row.iter().copied().sum();
    if row.iter().any(|&v| v < S::zero() || !v.is_finite()) || (sum - S::one()).abs() > S::lit(SIMPLEX_TOL) {
        return Err(Error::Contract(format!("row is not a simplex point (sum {sum})")));
    }
    Ok(())
}

fn one_hot_index<S: Scalar>(row: &[S]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in row.iter().enumerate() {
        if v == S::one() {
            if hot.is_some() {
                return Err(Error::Contract("row has more than one hot entry".into()));
            }
            hot = Some(i);
        } else if v != S::zero() {
            return Err(Error::Contract(format!("row is not one-hot (entry {i} = {v})")));
        }
    }
    hot.ok_or_else(|| Error::Contract("row has no hot entry".into()))
}

/// One forward step: `(1 − β_t)·prev + β_t/K`.
pub fn forward_step_distribution<S: Scalar>(prev_row: &[S], beta_t: S) -> Result<Vec<S>> {
    one_hot_index(prev_row)?;
    if !(beta_t >= S::zero() && beta_t <= S::one()) {
        return Err(Error::Contract(format!("beta_t = {beta_t} outside [0, 1]")));
    }
    let k = S::lit(prev_row.len() as f64);
    Ok(prev_row.iter().map(|&p| (S::one() - beta_t) * p + beta_t / k).collect())
}

/// Closed-form marginal: `ᾱ_t·s0 + (1 − ᾱ_t)/K`.
pub fn forward_marginal_distribution<S: Scalar>(s0_row: &[S], alpha_bar_t: S) -> Result<Vec<S>> {
    one_hot_index(s0_row)?;
    if !(alpha_bar_t >= S::zero() && alpha_bar_t <= S::one()) {
        return Err(Error::Contract(format!("alpha_bar_t = {alpha_bar_t} outside [0, 1]")));
    }
    Ok(mix_uniform(s0_row, alpha_bar_t))
}

fn mix_uniform<S: Scalar>(row: &[S], keep: S) -> Vec<S> {
    let k = S::lit(row.len() as f64);
    row.iter().map(|&p| keep * p + (S::one() - keep) / k).collect()
}

/// Draws a category by inverse CDF from one uniform variate.
pub fn sample_index<S: Scalar, R: Rng + ?Sized>(dist: &[S], rng: &mut R) -> usize {
    let total: f64 = dist.iter().map(|v| v.to_f64_lossy()).sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, v) in dist.iter().enumerate() {
        let p = v.to_f64_lossy();
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

pub fn sample_one_hot<S: Scalar, R: Rng + ?Sized>(dist: &[S], rng: &mut R) -> Vec<S> {
    let mut out = vec![S::zero(); dist.len()];
    out[sample_index(dist, rng)] = S::one();
    out
}

/// Unnormalized posterior weights
/// `[α_t·s_t + (1 − α_t)/K] ⊙ [ᾱ_{t−1}·s0 + (1 − ᾱ_{t−1})/K]`.
fn posterior_weights<S: Scalar>(s_t_row: &[S], s0_row: &[S], alpha_t: S, alpha_bar_prev: S) -> Vec<S> {
    let lhs = mix_uniform(s_t_row, alpha_t);
    let rhs = mix_uniform(s0_row, alpha_bar_prev);
    lhs.iter().zip(&rhs).map(|(&a, &b)| a * b).collect()
}

/// Closed-form posterior `q(s_{t−1} | s_t, s0)` for one row. `s0_row` may be
/// a simplex point (a predicted clean row).
pub fn posterior_distribution<S: Scalar>(
    s_t_row: &[S],
    s0_row: &[S],
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    if t == 0 || t > sched.steps() {
        return Err(Error::Contract(format!("step {t} outside 1..={}", sched.steps())));
    }
    if s_t_row.len() != s0_row.len() {
        return Err(Error::Contract("posterior rows differ in length".into()));
    }
    let w = posterior_weights(s_t_row, s0_row, sched.alpha(t), sched.alpha_bar(t - 1));
    let z: S = w.iter().copied().sum();
    if !(z > S::zero()) || !z.is_finite() {
        return Err(Error::Numerical(format!(
            "posterior normalizer {z} at t={t} (s_t={s_t_row:?}, s0={s0_row:?})"
        )));
    }
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// `Σ q_k log(q_k / max(p_k, 1e-12))` with `0·log 0 = 0`.
pub fn categorical_kl<S: Scalar>(q: &[S], p: &[S]) -> S {
    let floor = S::lit(LOG_FLOOR);
    q.iter()
        .zip(p)
        .filter(|(&qk, _)| qk > S::zero())
        .map(|(&qk, &pk)| qk * (qk.ln() - pk.max(floor).ln()))
        .sum()
}

/// KL between the true posterior (built from `s0`) and the model posterior
/// (built from `s0_hat`), with its gradient with respect to `s0_hat`.
pub fn posterior_kl_with_grad<S: Scalar>(
    s_t_row: &[S],
    s0_row: &[S],
    s0_hat_row: &[S],
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<(S, Vec<S>)> {
    let q = posterior_distribution(s_t_row, s0_row, t, sched)?;
    let w = posterior_weights(s_t_row, s0_hat_row, sched.alpha(t), sched.alpha_bar(t - 1));
    let z: S = w.iter().copied().sum();
    if !(z > S::zero()) || !z.is_finite() {
        return Err(Error::Numerical(format!("model posterior normalizer {z} at t={t}")));
    }
    let p: Vec<S> = w.iter().map(|&v| v / z).collect();
    let kl = categorical_kl(&q, &p);

    let floor = S::lit(LOG_FLOOR);
    // dKL/dp_k = −q_k/p_k where the floor is inactive.
    let g: Vec<S> = q
        .iter()
        .zip(&p)
        .map(|(&qk, &pk)| if qk > S::zero() && pk > floor { -qk / pk } else { S::zero() })
        .collect();
    let gp: S = g.iter().zip(&p).map(|(&a, &b)| a * b).sum();
    let lhs = mix_uniform(s_t_row, sched.alpha(t));
    let abar = sched.alpha_bar(t - 1);
    let grad = g.iter().zip(&lhs).map(|(&gk, &lk)| (gk - gp) / z * lk * abar).collect();
    Ok((kl, grad))
}
