//! Reverse-process generation with kNN-energy structure guidance and
//! fragment-seeded sequence initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet;
use crate::continuous::{posterior_mean_variance, standard_normal};
use crate::denoiser::{ComplexState, Denoiser};
use crate::discrete::{argmax, posterior_distribution, sample_one_hot, SequenceState};
use crate::error::{Error, Result};
use crate::knn::{neighbors_of, squared_distance};
use crate::linalg::Mat;
use crate::record::{denormalize_chain, normalize_chain, ChainRecord, ComplexRecord, NormalizedComplex};
use crate::rng::{substream, Purpose};
use crate::scalar::Scalar;
use crate::schedules::Schedules;

/// A sequence fragment with its secondary-structure label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub sequence: String,
    pub label: String,
}

/// Parses `<sequence>\t<label>` lines; blank lines are skipped.
pub fn parse_fragment_library(text: &str) -> Result<Vec<Fragment>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (seq, label) = line.split_once('\t').unwrap_or((line, ""));
        let seq = seq.trim();
        if seq.is_empty() || !seq.chars().all(|c| c.is_ascii_alphabetic()) {
            return Err(Error::Parse { line: i + 1, msg: format!("bad fragment sequence {seq:?}") });
        }
        out.push(Fragment { sequence: seq.to_ascii_uppercase(), label: label.trim().to_string() });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub k_guid: usize,
    /// Corpus mean of the kNN distance, normalized units.
    pub mu_knn: f64,
    pub n_init: usize,
    pub structure: bool,
    pub sequence: bool,
    pub fragments: Vec<Fragment>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { k_guid: 4, mu_knn: 1.0, n_init: 10, structure: true, sequence: false, fragments: Vec::new() }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_guid == 0 || self.n_init == 0 {
            return Err(Error::Config("k_guid and n_init must be >= 1".into()));
        }
        if !(self.mu_knn > 0.0) || !self.mu_knn.is_finite() {
            return Err(Error::Config(format!("mu_knn must be positive, got {}", self.mu_knn)));
        }
        if self.sequence && self.fragments.is_empty() {
            return Err(Error::Config("sequence guidance needs a nonempty fragment library".into()));
        }
        Ok(())
    }
}

/// Mean squared distance from residue `i` to its `k` nearest neighbours.
pub fn knn_dist<S: Scalar>(coords: &Mat<S>, i: usize, k: usize) -> Result<S> {
    if k == 0 || k >= coords.rows() {
        return Err(Error::Contract(format!("k = {k} needs more than {} residues", coords.rows())));
    }
    let pi = coords.row(i);
    let sum: S = neighbors_of(coords, i, k).into_iter().map(|j| squared_distance(pi, coords.row(j))).sum();
    Ok(sum / S::lit(k as f64))
}

/// `Σ_i (knn_dist(i) − μ)²`.
pub fn knn_energy<S: Scalar>(coords: &Mat<S>, k: usize, mu_knn: f64) -> Result<S> {
    let mu = S::lit(mu_knn);
    let mut e = S::zero();
    for i in 0..coords.rows() {
        let d = knn_dist(coords, i, k)? - mu;
        e += d * d;
    }
    Ok(e)
}

/// Mean kNN distance over every binder residue of the dataset. Binders with
/// no more than `k` residues have no defined statistic and are skipped.
pub fn estimate_mu_knn<S: Scalar>(data: &[NormalizedComplex<S>], k: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for item in data {
        let x = &item.binder_coords;
        if x.rows() <= k {
            continue;
        }
        for i in 0..x.rows() {
            sum += knn_dist(x, i, k)?.to_f64_lossy();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config(format!("no binder with more than {k} residues to estimate mu_knn")));
    }
    Ok(sum / count as f64)
}

/// Initial structure: the lowest-energy of `n_init` standard-normal draws
/// when structure guidance is on, else a single draw. Returns the energy of
/// the chosen draw when it is defined (`n > k_guid`).
pub fn init_structure_guided<S: Scalar, R: Rng + ?Sized>(
    n: usize,
    guid: &GuidanceConfig,
    rng: &mut R,
) -> Result<(Mat<S>, Option<f64>)> {
    let first = standard_normal::<S, _>(n, 3, rng);
    if n <= guid.k_guid {
        return Ok((first, None));
    }
    let mut best_e = knn_energy(&first, guid.k_guid, guid.mu_knn)?.to_f64_lossy();
    let mut best = first;
    if guid.structure {
        for _ in 1..guid.n_init {
            let cand = standard_normal::<S, _>(n, 3, rng);
            let e = knn_energy(&cand, guid.k_guid, guid.mu_knn)?.to_f64_lossy();
            if e < best_e {
                best = cand;
                best_e = e;
            }
        }
    }
    Ok((best, Some(best_e)))
}

/// Initial sequence: fragments drawn uniformly from the library and tiled
/// left to right (the last one clipped) when sequence guidance is on;
/// otherwise, and for any non-canonical fragment letter, a uniform draw.
pub fn init_sequence_guided<S: Scalar, R: Rng + ?Sized>(n: usize, guid: &GuidanceConfig, rng: &mut R) -> Result<SequenceState<S>> {
    let k = alphabet::K;
    let mut idx = Vec::with_capacity(n);
    if guid.sequence {
        if guid.fragments.is_empty() {
            return Err(Error::Config("sequence guidance needs a nonempty fragment library".into()));
        }
        while idx.len() < n {
            let frag = &guid.fragments[rng.gen_range(0..guid.fragments.len())];
            for c in frag.sequence.chars().take(n - idx.len()) {
                let code = alphabet::index_of(c);
                idx.push(code.unwrap_or_else(|| rng.gen_range(0..k)));
            }
        }
    } else {
        idx.extend((0..n).map(|_| rng.gen_range(0..k)));
    }
    Ok(SequenceState::from_indices(&idx, k))
}

/// One reverse step from `state.t` to `state.t − 1`. At `t = 1` the output
/// is the predicted clean coordinates and the argmax residue types.
pub fn reverse_step<S: Scalar, R: Rng + ?Sized>(
    model: &Denoiser<S>,
    state: &ComplexState<S>,
    schedules: &Schedules<S>,
    rng: &mut R,
) -> Result<ComplexState<S>> {
    let t = state.t;
    let pred = model.predict_clean(state)?;
    let n = state.binder_len();
    let k = state.binder_seq.alphabet_size();
    let mut next = state.clone();
    next.t = t - 1;
    if t == 1 {
        let idx: Vec<usize> = (0..n).map(|i| argmax(pred.s0_hat.row(i))).collect();
        next.binder_seq = SequenceState::from_indices(&idx, k);
        next.binder_coords = pred.x0_hat;
        return Ok(next);
    }
    let mut rows = Mat::zeros(n, k);
    for i in 0..n {
        let post = posterior_distribution(state.binder_seq.row(i), pred.s0_hat.row(i), t, &schedules.sequence)?;
        rows.row_mut(i).copy_from_slice(&sample_one_hot(&post, rng));
    }
    next.binder_seq = SequenceState::from_mat(rows)?;
    let (mu, var) = posterior_mean_variance(&state.binder_coords, &pred.x0_hat, t, &schedules.structure)?;
    let eps = standard_normal::<S, _>(n, 3, rng);
    let sd = var.sqrt();
    let data = mu.as_slice().iter().zip(eps.as_slice()).map(|(&m, &e)| m + sd * e).collect();
    next.binder_coords = Mat::from_vec(n, 3, data);
    Ok(next)
}

/// Sidecar metadata of one generated candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateMeta {
    pub id: String,
    pub seed: u64,
    pub structure_guidance: bool,
    pub sequence_guidance: bool,
    /// kNN energy of the initial structure, when defined.
    pub initial_energy: Option<f64>,
}

impl CandidateMeta {
    pub const HEADER: &'static str = "id\tseed\tstructure_guidance\tsequence_guidance\tinitial_energy";

    pub fn to_line(&self) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        let e = self.initial_energy.map_or_else(|| "-".to_string(), |e| format!("{e}"));
        format!("{}\t{}\t{}\t{}\t{e}", self.id, self.seed, onoff(self.structure_guidance), onoff(self.sequence_guidance))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub record: ComplexRecord,
    pub meta: CandidateMeta,
}

/// Everything fixed across the candidates of one sampling run.
pub struct Sampler<'a, S> {
    pub model: &'a Denoiser<S>,
    pub schedules: &'a Schedules<S>,
    pub guidance: &'a GuidanceConfig,
    /// Coordinate scale in Å.
    pub s_norm: f64,
}

impl<S: Scalar> Sampler<'_, S> {
    /// Generates one binder of length `n` for `target` from `seed`.
    pub fn generate(&self, id: &str, target: &ChainRecord, n: usize, seed: u64) -> Result<Candidate> {
        if n == 0 {
            return Err(Error::Config("binder length must be positive".into()));
        }
        let target_idx = alphabet::encode(&target.sequence)
            .ok_or_else(|| Error::Validation(format!("non-canonical target sequence {:?}", target.sequence)))?;
        let centroid = target.centroid();
        let mut r_struct = substream(seed, Purpose::InitStructure, 0);
        let mut r_seq = substream(seed, Purpose::InitSequence, 0);
        let mut r_rev = substream(seed, Purpose::Reverse, 0);
        let (x_t, energy) = init_structure_guided::<S, _>(n, self.guidance, &mut r_struct)?;
        let s_t = init_sequence_guided::<S, _>(n, self.guidance, &mut r_seq)?;
        let mut state = ComplexState {
            target_seq: SequenceState::from_indices(&target_idx, alphabet::K),
            target_coords: normalize_chain(&target.coords, centroid, self.s_norm),
            binder_seq: s_t,
            binder_coords: x_t,
            t: self.schedules.steps(),
        };
        while state.t >= 1 {
            let step = state.t;
            state = reverse_step(self.model, &state, self.schedules, &mut r_rev).map_err(|e| match e {
                Error::Numerical(msg) => Error::Generation { step, msg },
                other => other,
            })?;
            if !state.binder_coords.is_finite() {
                return Err(Error::Generation { step, msg: "non-finite coordinates".into() });
            }
        }
        let record = ComplexRecord {
            id: id.to_string(),
            source: None,
            target: target.clone(),
            binder: ChainRecord {
                sequence: alphabet::decode(&state.binder_seq.argmax()),
                coords: denormalize_chain(&state.binder_coords, centroid, self.s_norm),
            },
            cluster: None,
        };
        let meta = CandidateMeta {
            id: id.to_string(),
            seed,
            structure_guidance: self.guidance.structure,
            sequence_guidance: self.guidance.sequence,
            initial_energy: energy,
        };
        Ok(Candidate { record, meta })
    }
}

/// Candidate id for index `i` (0-based) of a target: `<target>#c0001`, ...
pub fn candidate_id(target_id: &str, i: usize) -> String {
    format!("{target_id}#c{:04}", i + 1)
}
