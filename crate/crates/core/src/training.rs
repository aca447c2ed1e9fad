//! Variational-bound objective, Adam with warm-up, and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::continuous::{coordinate_loss, coordinate_loss_grad, forward_marginal_sample};
use crate::denoiser::{ComplexState, Denoiser, DenoiserConfig, DenoiserGrads, Prediction};
use crate::discrete::{forward_marginal_distribution, posterior_kl_with_grad, sample_one_hot, SequenceState};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::record::{ComplexRecord, NormalizedComplex};
use crate::rng::{substream, Purpose};
use crate::sampling::estimate_mu_knn;
use crate::scalar::Scalar;
use crate::schedules::{DiffusionConfig, Schedules};

const CE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeSampling {
    /// `t` uniform on `1..=T`, drawn independently per item.
    #[default]
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: u64,
    pub steps: u64,
    /// Residues (target plus binder) per batch.
    pub batch_tokens: usize,
    pub t_sampling: TimeSampling,
    pub seed: u64,
    pub w_seq: f64,
    pub w_coord: f64,
    /// Weight of an auxiliary cross-entropy `−Σ s0 log ŝ0` applied at every
    /// step (0 disables it and leaves the plain variational bound).
    pub w_ce: f64,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Length scale in Å for coordinate normalization.
    pub s_norm: f64,
    /// Neighbour count for the kNN-distance statistic stored with the model.
    pub k_guid: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup: 100,
            steps: 2000,
            batch_tokens: 256,
            t_sampling: TimeSampling::Uniform,
            seed: 0,
            w_seq: 1.0,
            w_coord: 1.0,
            w_ce: 0.0,
            clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            s_norm: 10.0,
            k_guid: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.warmup > self.steps {
            return fail("warmup must not exceed steps");
        }
        if !(self.w_seq > 0.0 && self.w_coord > 0.0) {
            return fail("loss weights must be positive");
        }
        if !(self.w_ce >= 0.0) {
            return fail("w_ce must be non-negative");
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.s_norm > 0.0) {
            return fail("lr, clip_norm and s_norm must be positive");
        }
        if self.batch_tokens == 0 || self.k_guid == 0 {
            return fail("batch_tokens and k_guid must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<S> {
    pub l_seq: S,
    pub l_coord: S,
    pub l_recon: S,
    /// Auxiliary cross-entropy, before weighting.
    pub l_ce: S,
    pub total: S,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub seq: f64,
    pub coord: f64,
    pub ce: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { seq: cfg.w_seq, coord: cfg.w_coord, ce: cfg.w_ce }
    }
}

fn cross_entropy_into<S: Scalar>(s0: &SequenceState<S>, s0_hat: &Mat<S>, weight: S, gs: &mut Mat<S>) -> S {
    let floor = S::lit(CE_FLOOR);
    let mut ce = S::zero();
    for i in 0..s0.len() {
        for (j, (&s, &p)) in s0.row(i).iter().zip(s0_hat.row(i)).enumerate() {
            if s > S::zero() {
                ce -= s * p.max(floor).ln();
                if p > floor {
                    gs.row_mut(i)[j] -= weight * s / p;
                }
            }
        }
    }
    ce
}

/// Loss terms for one noised item given the denoiser's prediction, with the
/// gradients of `total` with respect to `ŝ0` and `x̂0`.
pub fn elbo_from_prediction<S: Scalar>(
    s0: &SequenceState<S>,
    s_t: &SequenceState<S>,
    x0: &Mat<S>,
    pred: &Prediction<S>,
    t: usize,
    schedules: &Schedules<S>,
    weights: LossWeights,
) -> Result<(LossBreakdown<S>, Mat<S>, Mat<S>)> {
    let (w_seq, w_coord, w_ce) = (S::lit(weights.seq), S::lit(weights.coord), S::lit(weights.ce));
    let n = s0.len();
    let k = s0.alphabet_size();
    if pred.s0_hat.shape() != (n, k) || s_t.len() != n || x0.shape() != pred.x0_hat.shape() {
        return Err(Error::Contract("prediction shapes do not match the item".into()));
    }
    let mut l_seq = S::zero();
    let mut gs = Mat::zeros(n, k);
    for i in 0..n {
        let (kl, g) = posterior_kl_with_grad(s_t.row(i), s0.row(i), pred.s0_hat.row(i), t, &schedules.sequence)?;
        l_seq += kl;
        for (dst, v) in gs.row_mut(i).iter_mut().zip(g) {
            *dst = w_seq * v;
        }
    }
    let l_coord = coordinate_loss(x0, &pred.x0_hat)?;
    let mut gx = coordinate_loss_grad(x0, &pred.x0_hat).scale(w_coord);
    let mut l_recon = S::zero();
    if t == 1 {
        l_recon = cross_entropy_into(s0, &pred.s0_hat, S::one(), &mut gs) + l_coord;
        gx.add_assign(&coordinate_loss_grad(x0, &pred.x0_hat));
    }
    let l_ce = if weights.ce > 0.0 { cross_entropy_into(s0, &pred.s0_hat, w_ce, &mut gs) } else { S::zero() };
    let total = w_seq * l_seq + w_coord * l_coord + l_recon + w_ce * l_ce;
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at t={t}: l_seq={l_seq} l_coord={l_coord} l_recon={l_recon}"
        )));
    }
    Ok((LossBreakdown { l_seq, l_coord, l_recon, l_ce, total }, gs, gx))
}

/// Draws `(s_t, x_t)` from the forward marginals of a clean item.
pub fn noise_item<S: Scalar, R: Rng + ?Sized>(
    item: &NormalizedComplex<S>,
    schedules: &Schedules<S>,
    t: usize,
    rng: &mut R,
) -> Result<ComplexState<S>> {
    let s0 = item.binder_state();
    let abar_s = schedules.sequence.alpha_bar(t);
    let k = s0.alphabet_size();
    let mut rows = Mat::zeros(s0.len(), k);
    for i in 0..s0.len() {
        let dist = forward_marginal_distribution(s0.row(i), abar_s)?;
        rows.row_mut(i).copy_from_slice(&sample_one_hot(&dist, rng));
    }
    let (x_t, _) = forward_marginal_sample(&item.binder_coords, schedules.structure.alpha_bar(t), rng);
    Ok(ComplexState {
        target_seq: item.target_state(),
        target_coords: item.target_coords.clone(),
        binder_seq: SequenceState::from_mat(rows)?,
        binder_coords: x_t,
        t,
    })
}

/// Noises the item at step `t`, runs the denoiser and returns the loss terms.
pub fn elbo_terms<S: Scalar, R: Rng + ?Sized>(
    model: &Denoiser<S>,
    item: &NormalizedComplex<S>,
    schedules: &Schedules<S>,
    t: usize,
    weights: LossWeights,
    rng: &mut R,
) -> Result<LossBreakdown<S>> {
    let state = noise_item(item, schedules, t, rng)?;
    let pred = model.predict_clean(&state)?;
    Ok(elbo_from_prediction(&item.binder_state(), &state.binder_seq, &item.binder_coords, &pred, t, schedules, weights)?.0)
}

fn item_loss_and_grads<S: Scalar, R: Rng + ?Sized>(
    model: &Denoiser<S>,
    item: &NormalizedComplex<S>,
    schedules: &Schedules<S>,
    t: usize,
    weights: LossWeights,
    rng: &mut R,
) -> Result<(LossBreakdown<S>, DenoiserGrads<S>)> {
    let state = noise_item(item, schedules, t, rng)?;
    let pass = model.forward(&state, true)?;
    let (loss, gs, gx) = elbo_from_prediction(
        &item.binder_state(),
        &state.binder_seq,
        &item.binder_coords,
        &pass.prediction,
        t,
        schedules,
        weights,
    )?;
    let grads = model.backward(&pass, &gs, &gx)?;
    Ok((loss, grads))
}

/// Linear warm-up from 0 to `lr` over `warmup` steps, then constant.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup == 0 || step >= cfg.warmup {
        cfg.lr
    } else {
        cfg.lr * step as f64 / cfg.warmup as f64
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Mat<S>>,
    pub v: Vec<Mat<S>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shapes: &[Mat<S>]) -> Self {
        let zeros = || shapes.iter().map(|t| Mat::zeros(t.rows(), t.cols())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<S: Scalar>(params: &mut [Mat<S>], grads: &[Mat<S>], state: &mut AdamState<S>, lr: f64, hyper: (f64, f64, f64)) {
    assert_eq!(params.len(), grads.len());
    state.step += 1;
    let (b1, b2, eps) = hyper;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (b1, b2, eps, lr) = (S::lit(b1), S::lit(b2), S::lit(eps), S::lit(lr));
    let (c1, c2) = (S::lit(c1), S::lit(c2));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let ps = p.as_mut_slice();
        let ms = m.as_mut_slice();
        let vs = v.as_mut_slice();
        for (j, &gj) in g.as_slice().iter().enumerate() {
            ms[j] = b1 * ms[j] + (S::one() - b1) * gj;
            vs[j] = b2 * vs[j] + (S::one() - b2) * gj * gj;
            let mhat = ms[j] / c1;
            let vhat = vs[j] / c2;
            ps[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Mat<S>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.frobenius_sq().to_f64_lossy()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = S::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
    norm
}

/// Item indices of every batch of one epoch: a seeded shuffle, then greedy
/// packing up to the token budget (a batch always holds at least one item).
pub fn epoch_batches(tokens: &[usize], budget: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.shuffle(&mut substream(seed, Purpose::Shuffle, epoch));
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = 0;
    for i in order {
        if !cur.is_empty() && used + tokens[i] > budget {
            out.push(std::mem::take(&mut cur));
            used = 0;
        }
        used += tokens[i];
        cur.push(i);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Endless batch stream over epochs.
struct BatchStream {
    tokens: Vec<usize>,
    budget: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    fn new(tokens: Vec<usize>, budget: usize, seed: u64) -> Self {
        let pending = epoch_batches(&tokens, budget, seed, 0).into_iter();
        Self { tokens, budget, seed, epoch: 0, pending }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        loop {
            if let Some(b) = self.pending.next() {
                return b;
            }
            self.epoch += 1;
            self.pending = epoch_batches(&self.tokens, self.budget, self.seed, self.epoch).into_iter();
        }
    }
}

/// Batch averages logged for one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub t_mean: f64,
    pub l_seq: f64,
    pub l_coord: f64,
    pub l_recon: f64,
    pub total: f64,
    pub lr: f64,
    pub l_ce: f64,
}

impl StepMetrics {
    pub const HEADER: &'static str = "step\tt_mean\tl_seq\tl_coord\tl_recon\ttotal\tlr\tl_ce";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.t_mean, self.l_seq, self.l_coord, self.l_recon, self.total, self.lr, self.l_ce
        )
    }
}

/// In-memory training state; [`train_loop`] drives it and handles files.
pub struct Trainer<S> {
    pub model: Denoiser<S>,
    pub adam: AdamState<S>,
    pub schedules: Schedules<S>,
    pub diffusion: DiffusionConfig,
    pub config: TrainConfig,
    data: Vec<NormalizedComplex<S>>,
    batches: BatchStream,
    step: u64,
    mu_knn: f64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(
        dataset: &[ComplexRecord],
        model_cfg: DenoiserConfig,
        diffusion: DiffusionConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        model_cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let model = Denoiser::new(model_cfg, config.seed)?;
        let adam = AdamState::new(model.params().tensors());
        Self::assemble(dataset, model, adam, diffusion, config, 0)
    }

    /// Continues from a checkpoint, replaying the batch order up to its step.
    pub fn resume(dataset: &[ComplexRecord], ckpt: Checkpoint<S>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        if ckpt.s_norm != config.s_norm {
            return Err(Error::Config(format!("checkpoint s_norm {} differs from config {}", ckpt.s_norm, config.s_norm)));
        }
        let adam = match ckpt.optimizer {
            Some(a) => a,
            None => return Err(Error::Config("checkpoint has no optimizer state to resume from".into())),
        };
        Self::assemble(dataset, ckpt.model, adam, ckpt.diffusion, config, ckpt.step)
    }

    fn assemble(
        dataset: &[ComplexRecord],
        model: Denoiser<S>,
        adam: AdamState<S>,
        diffusion: DiffusionConfig,
        config: TrainConfig,
        step: u64,
    ) -> Result<Self> {
        let schedules = Schedules::build(&diffusion, model.config().steps)?;
        let data: Vec<NormalizedComplex<S>> =
            dataset.iter().map(|r| NormalizedComplex::from_record(r, config.s_norm)).collect::<Result<_>>()?;
        let mu_knn = estimate_mu_knn(&data, config.k_guid)?;
        let mut batches = BatchStream::new(data.iter().map(|d| d.tokens()).collect(), config.batch_tokens, config.seed);
        for _ in 0..step {
            batches.next_batch();
        }
        Ok(Self { model, adam, schedules, diffusion, config, data, batches, step, mu_knn })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn mu_knn(&self) -> f64 {
        self.mu_knn
    }

    /// One optimization step on the next batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step + 1;
        let batch = self.batches.next_batch();
        let steps = self.model.config().steps;
        let weights = LossWeights::from_config(&self.config);
        let seed = self.config.seed;
        let (model, data, schedules) = (&self.model, &self.data, &self.schedules);
        let results: Vec<Result<(usize, LossBreakdown<S>, DenoiserGrads<S>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut rng = substream(seed, Purpose::TrainItem, (step << 16) | slot as u64);
                let t = rng.gen_range(1..=steps);
                let (loss, grads) = item_loss_and_grads(model, &data[i], schedules, t, weights, &mut rng)?;
                Ok((t, loss, grads))
            })
            .collect();

        // Reduce in batch order so the sum is independent of thread timing.
        let mut grads = self.model.params().zeros_like();
        let mut m = StepMetrics { step, t_mean: 0.0, l_seq: 0.0, l_coord: 0.0, l_recon: 0.0, total: 0.0, lr: 0.0, l_ce: 0.0 };
        let count = results.len() as f64;
        for r in results {
            let (t, loss, g) = r.map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("step {step}: {msg}")),
                other => other,
            })?;
            for (acc, gi) in grads.iter_mut().zip(&g.params) {
                acc.add_assign(gi);
            }
            m.t_mean += t as f64;
            m.l_seq += loss.l_seq.to_f64_lossy();
            m.l_coord += loss.l_coord.to_f64_lossy();
            m.l_recon += loss.l_recon.to_f64_lossy();
            m.l_ce += loss.l_ce.to_f64_lossy();
            m.total += loss.total.to_f64_lossy();
        }
        let inv = S::lit(1.0 / count);
        for g in &mut grads {
            for v in g.as_mut_slice() {
                *v *= inv;
            }
        }
        for v in [&mut m.t_mean, &mut m.l_seq, &mut m.l_coord, &mut m.l_recon, &mut m.l_ce, &mut m.total] {
            *v /= count;
        }
        clip_global_norm(&mut grads, self.config.clip_norm);
        m.lr = lr_at(step, &self.config);
        let hyper = (self.config.adam_beta1, self.config.adam_beta2, self.config.adam_eps);
        adam_step(self.model.params_mut().tensors_mut(), &grads, &mut self.adam, m.lr, hyper);
        if !self.model.params().is_finite() {
            return Err(Error::Numerical(format!("non-finite parameters after step {step}")));
        }
        self.step = step;
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            model: self.model.clone(),
            diffusion: self.diffusion,
            s_norm: self.config.s_norm,
            mu_knn: self.mu_knn,
            step: self.step,
            seed: self.config.seed,
            optimizer: Some(self.adam.clone()),
        }
    }
}

/// Files produced by [`train_loop`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub final_step: u64,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_LOG: &str = "metrics.tsv";

fn read_log_prefix(path: &Path, keep_through: u64) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for line in text.lines() {
        let step = line.split('\t').next().and_then(|s| s.parse::<u64>().ok());
        match step {
            Some(s) if s > keep_through => break,
            _ => {
                let _ = writeln!(out, "{line}");
            }
        }
    }
    Ok(out)
}

/// Runs training to `config.steps`, writing `<out>/metrics.tsv` and
/// `<out>/checkpoint/`. With `resume`, continues from that checkpoint and
/// keeps the log lines up to its step.
pub fn train_loop<S: Scalar>(
    dataset: &[ComplexRecord],
    model_cfg: DenoiserConfig,
    diffusion: DiffusionConfig,
    config: TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(dir) => Trainer::<S>::resume(dataset, Checkpoint::load(dir)?, config)?,
        None => Trainer::<S>::new(dataset, model_cfg, diffusion, config)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(METRICS_LOG);
    let ckpt_path = out_dir.join(CHECKPOINT_DIR);
    let mut log = if resume.is_some() && log_path.exists() {
        read_log_prefix(&log_path, trainer.step())?
    } else {
        format!("{}\n", StepMetrics::HEADER)
    };
    let write_log = |log: &str| fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e));
    let every = trainer.config.checkpoint_every;
    while trainer.step() < trainer.config.steps {
        let m = trainer.train_step()?;
        let _ = writeln!(log, "{}", m.to_line());
        if every > 0 && m.step % every == 0 && m.step < trainer.config.steps {
            write_log(&log)?;
            trainer.checkpoint().save(&ckpt_path)?;
        }
    }
    write_log(&log)?;
    trainer.checkpoint().save(&ckpt_path)?;
    Ok(TrainOutcome { checkpoint: ckpt_path, metrics_log: log_path, final_step: trainer.step() })
}

/// Means of `total` over the first and the last `window` rows.
pub fn smoothed_loss_ends(rows: &[StepMetrics], window: usize) -> Result<(f64, f64)> {
    if window == 0 || rows.len() < window {
        return Err(Error::Contract(format!("need at least {window} logged steps, have {}", rows.len())));
    }
    let mean = |r: &[StepMetrics]| r.iter().map(|m| m.total).sum::<f64>() / r.len() as f64;
    Ok((mean(&rows[..window]), mean(&rows[rows.len() - window..])))
}

/// Parses a metrics log back into rows (the header is skipped).
pub fn parse_metrics_log(text: &str) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("step") {
            continue;
        }
        let v: Vec<f64> = line
            .split('\t')
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if v.len() != 8 {
            return Err(Error::Parse { line: i + 1, msg: format!("expected 8 fields, got {}", v.len()) });
        }
        out.push(StepMetrics {
            step: v[0] as u64,
            t_mean: v[1],
            l_seq: v[2],
            l_coord: v[3],
            l_recon: v[4],
            total: v[5],
            lr: v[6],
            l_ce: v[7],
        });
    }
    Ok(out)
}
