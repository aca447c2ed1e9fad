//! Diffusion-time coefficient tables.
//!
//! Steps are indexed `1..=T`. Accessors take the 1-based step; `alpha_bar(0)`
//! is defined as 1 so that every `t = 1` formula is an exact limit.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const BETA_MIN: f64 = 1e-9;
const BETA_MAX: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine { offset: f64 },
    Sigmoid { beta_start: f64, beta_end: f64, steepness: f64 },
}

impl ScheduleKind {
    /// Cosine schedule with offset 0.01.
    pub fn default_sequence() -> Self {
        ScheduleKind::Cosine { offset: 0.01 }
    }

    /// Sigmoid schedule from 1e-7 to 2e-3 with steepness 2.
    pub fn default_structure() -> Self {
        ScheduleKind::Sigmoid { beta_start: 1e-7, beta_end: 2e-3, steepness: 2.0 }
    }

    pub fn build<S: Scalar>(&self, steps: usize) -> Result<NoiseSchedule<S>> {
        match *self {
            ScheduleKind::Cosine { offset } => build_cosine_schedule(steps, offset),
            ScheduleKind::Sigmoid { beta_start, beta_end, steepness } => {
                build_sigmoid_schedule(steps, beta_start, beta_end, steepness)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    kind: ScheduleKind,
    beta: Vec<S>,
    alpha: Vec<S>,
    alpha_bar: Vec<S>,
    /// `1 − ᾱ_t` accumulated without cancellation.
    one_minus_alpha_bar: Vec<S>,
    beta_tilde: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Builds the derived tables from per-step betas (index 0 holds `beta_1`).
    pub fn from_betas(kind: ScheduleKind, beta: Vec<S>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, &b)| !(b > S::zero() && b < S::one())) {
            return Err(Error::Config(format!("beta[{}] = {b} is outside (0, 1)", i + 1)));
        }
        let alpha: Vec<S> = beta.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut one_minus_alpha_bar = Vec::with_capacity(beta.len());
        let mut beta_tilde = Vec::with_capacity(beta.len());
        let (mut prev, mut prev_om) = (S::one(), S::zero());
        for (&a, &b) in alpha.iter().zip(&beta) {
            let cur = prev * a;
            // 1 − ᾱ_{t−1}·(1 − β_t) = (1 − ᾱ_{t−1}) + ᾱ_{t−1}·β_t
            let om = prev_om + prev * b;
            beta_tilde.push(prev_om / om * b);
            alpha_bar.push(cur);
            one_minus_alpha_bar.push(om);
            prev = cur;
            prev_om = om;
        }
        Ok(Self { kind, beta, alpha, alpha_bar, one_minus_alpha_bar, beta_tilde })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) {
        assert!(t >= 1 && t <= self.steps(), "step {t} outside 1..={}", self.steps());
    }

    pub fn beta(&self, t: usize) -> S {
        self.check(t);
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> S {
        self.check(t);
        self.alpha[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> S {
        if t == 0 {
            return S::one();
        }
        self.check(t);
        self.alpha_bar[t - 1]
    }

    /// `1 − ᾱ_t`, accurate when `ᾱ_t` is close to 1; 0 at `t = 0`.
    pub fn one_minus_alpha_bar(&self, t: usize) -> S {
        if t == 0 {
            return S::zero();
        }
        self.check(t);
        self.one_minus_alpha_bar[t - 1]
    }

    /// Posterior variance; `beta_tilde(1) == 0`.
    pub fn beta_tilde(&self, t: usize) -> S {
        self.check(t);
        self.beta_tilde[t - 1]
    }

    pub fn betas(&self) -> &[S] {
        &self.beta
    }

    pub fn alphas(&self) -> &[S] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bar
    }

    pub fn beta_tildes(&self) -> &[S] {
        &self.beta_tilde
    }
}

/// Schedule kinds for the two modalities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub sequence: ScheduleKind,
    pub structure: ScheduleKind,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { sequence: ScheduleKind::default_sequence(), structure: ScheduleKind::default_structure() }
    }
}

/// The sequence and structure schedules of one run, sharing `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedules<S> {
    pub sequence: NoiseSchedule<S>,
    pub structure: NoiseSchedule<S>,
}

impl<S: Scalar> Schedules<S> {
    pub fn build(cfg: &DiffusionConfig, steps: usize) -> Result<Self> {
        Ok(Self { sequence: cfg.sequence.build(steps)?, structure: cfg.structure.build(steps)? })
    }

    pub fn steps(&self) -> usize {
        self.sequence.steps()
    }
}

fn cosine_g(t: f64, steps: f64, offset: f64) -> f64 {
    let c = ((t / steps + offset) / (1.0 + offset) * FRAC_PI_2).cos();
    c * c
}

/// Cosine schedule: `alpha_bar(t) = g(t)/g(0)` with
/// `g(t) = cos²(((t/T + offset)/(1 + offset))·π/2)`; betas clipped to `[1e-9, 0.999]`.
pub fn build_cosine_schedule<S: Scalar>(steps: usize, offset: f64) -> Result<NoiseSchedule<S>> {
    if steps == 0 {
        return Err(Error::Config("cosine schedule needs T >= 1".into()));
    }
    if !(offset > 0.0 && offset.is_finite()) {
        return Err(Error::Config(format!("cosine offset must be > 0, got {offset}")));
    }
    let total = steps as f64;
    let g0 = cosine_g(0.0, total, offset);
    let beta = (1..=steps)
        .map(|t| {
            let prev = cosine_g((t - 1) as f64, total, offset) / g0;
            let cur = cosine_g(t as f64, total, offset) / g0;
            S::lit((1.0 - cur / prev).clamp(BETA_MIN, BETA_MAX))
        })
        .collect();
    NoiseSchedule::from_betas(ScheduleKind::Cosine { offset }, beta)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sigmoid schedule in beta: a logistic ramp `σ(steepness·(2t/T − 1))`
/// rescaled so `beta(1) = beta_start` and `beta(T) = beta_end` exactly.
pub fn build_sigmoid_schedule<S: Scalar>(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    steepness: f64,
) -> Result<NoiseSchedule<S>> {
    if steps < 2 {
        return Err(Error::Config("sigmoid schedule needs T >= 2 to pin both endpoints".into()));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "sigmoid schedule needs 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    if !(steepness > 0.0 && steepness.is_finite()) {
        return Err(Error::Config(format!("sigmoid steepness must be > 0, got {steepness}")));
    }
    let total = steps as f64;
    let u = |t: usize| logistic(steepness * (2.0 * t as f64 / total - 1.0));
    let (lo, hi) = (u(1), u(steps));
    let beta = (1..=steps)
        .map(|t| {
            let b = if t == 1 {
                beta_start
            } else if t == steps {
                beta_end
            } else {
                beta_start + (beta_end - beta_start) * (u(t) - lo) / (hi - lo)
            };
            S::lit(b.clamp(BETA_MIN, BETA_MAX))
        })
        .collect();
    NoiseSchedule::from_betas(ScheduleKind::Sigmoid { beta_start, beta_end, steepness }, beta)
}
