//! The interleaved sequence-structure denoiser.
//!
//! Target and binder residues form one joint point set (target rows first).
//! Each interleaved block runs bidirectional self-attention layers followed by
//! one kNN equivariant graph layer; coordinate updates move binder rows only.
//! A causal attention stack over the binder rows feeds the softmax head that
//! predicts clean residue types. The predicted clean coordinates are the
//! binder rows after the last graph layer.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Edges, GradFault, Tape, Var};
use crate::discrete::SequenceState;
use crate::error::{Error, Result};
use crate::knn::knn_graph;
use crate::linalg::Mat;
use crate::rng::{substream, Purpose};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub d_model: usize,
    /// Interleaved blocks.
    pub blocks: usize,
    /// Self-attention layers per block.
    pub attn_layers: usize,
    pub causal_layers: usize,
    pub heads: usize,
    pub k_nn: usize,
    /// Diffusion steps `T`.
    pub steps: usize,
    /// Alphabet size `K`.
    pub alphabet: usize,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
    /// Adds a sinusoidal embedding of each residue's index within its chain.
    pub positional: bool,
    /// Per-layer clip on the norm of a residue's coordinate displacement.
    pub coord_clamp: f64,
    /// Added to edge lengths before they enter the message network.
    pub dist_eps: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            blocks: 2,
            attn_layers: 2,
            causal_layers: 1,
            heads: 4,
            k_nn: 8,
            steps: 1000,
            alphabet: crate::alphabet::K,
            ff_mult: 4,
            positional: true,
            coord_clamp: 10.0,
            dist_eps: 1e-8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.d_model % 2 != 0 {
            return fail(format!("d_model {} must be even for sinusoidal embeddings", self.d_model));
        }
        if self.k_nn == 0 {
            return fail("k_nn must be >= 1".into());
        }
        if self.steps == 0 || self.alphabet < 2 || self.ff_mult == 0 {
            return fail("steps, alphabet and ff_mult must be positive (alphabet >= 2)".into());
        }
        if !(self.coord_clamp > 0.0) || !(self.dist_eps >= 0.0) {
            return fail("coord_clamp must be > 0 and dist_eps >= 0".into());
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order determined by the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Mat<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat<S>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Mat<S> {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    pub fn zeros_like(&self) -> Vec<Mat<S>> {
        self.tensors.iter().map(|t| Mat::zeros(t.rows(), t.cols())).collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Mat::cast).collect() }
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct EgnnIdx {
    fm_w1: usize,
    fm_b1: usize,
    fm_w2: usize,
    fm_b2: usize,
    fw_w: usize,
    fw_b: usize,
    fx_w1: usize,
    fx_b1: usize,
    fx_w2: usize,
    fx_b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    time_w: usize,
    time_b: usize,
    blocks: Vec<(Vec<AttnIdx>, EgnnIdx)>,
    causal: Vec<AttnIdx>,
    out_ln_g: usize,
    out_ln_b: usize,
    out_w: usize,
    out_b: usize,
}

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug)]
enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    FanIn(f64),
    Zeros,
    Ones,
}

struct Spec {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Spec {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize, ff: usize) -> AttnIdx {
        let mut p = |n: &str, r, c, i| self.add(format!("{prefix}.{n}"), r, c, i);
        AttnIdx {
            ln1_g: p("ln1.gamma", 1, d, Init::Ones),
            ln1_b: p("ln1.beta", 1, d, Init::Zeros),
            wq: p("wq", d, d, Init::FanIn(1.0)),
            wk: p("wk", d, d, Init::FanIn(1.0)),
            wv: p("wv", d, d, Init::FanIn(1.0)),
            wo: p("wo", d, d, Init::FanIn(1.0)),
            bo: p("bo", 1, d, Init::Zeros),
            ln2_g: p("ln2.gamma", 1, d, Init::Ones),
            ln2_b: p("ln2.beta", 1, d, Init::Zeros),
            w1: p("ff.w1", d, ff, Init::FanIn(1.0)),
            b1: p("ff.b1", 1, ff, Init::Zeros),
            w2: p("ff.w2", ff, d, Init::FanIn(1.0)),
            b2: p("ff.b2", 1, d, Init::Zeros),
        }
    }

    fn egnn(&mut self, prefix: &str, d: usize) -> EgnnIdx {
        let mut p = |n: &str, r, c, i| self.add(format!("{prefix}.{n}"), r, c, i);
        EgnnIdx {
            fm_w1: p("fm.w1", 2 * d + 1, d, Init::FanIn(1.0)),
            fm_b1: p("fm.b1", 1, d, Init::Zeros),
            fm_w2: p("fm.w2", d, d + 1, Init::FanIn(1.0)),
            fm_b2: p("fm.b2", 1, d + 1, Init::Zeros),
            fw_w: p("fw.w", d, d, Init::FanIn(1.0)),
            fw_b: p("fw.b", 1, d, Init::Zeros),
            fx_w1: p("fx.w1", d, d, Init::FanIn(1.0)),
            fx_b1: p("fx.b1", 1, d, Init::Zeros),
            fx_w2: p("fx.w2", d, 1, Init::FanIn(0.01)),
            fx_b2: p("fx.b2", 1, 1, Init::Zeros),
        }
    }
}

fn build_layout(cfg: &DenoiserConfig) -> (Layout, Spec) {
    let d = cfg.d_model;
    let ff = d * cfg.ff_mult;
    let mut spec = Spec { names: Vec::new(), shapes: Vec::new(), inits: Vec::new() };
    let embed = spec.add("embed.residue".into(), cfg.alphabet + 1, d, Init::FanIn(1.0));
    let time_w = spec.add("time.w".into(), d, d, Init::FanIn(1.0));
    let time_b = spec.add("time.b".into(), 1, d, Init::Zeros);
    let blocks = (0..cfg.blocks)
        .map(|b| {
            let attn = (0..cfg.attn_layers).map(|l| spec.attn(&format!("block{b}.attn{l}"), d, ff)).collect();
            let egnn = spec.egnn(&format!("block{b}.egnn"), d);
            (attn, egnn)
        })
        .collect();
    let causal = (0..cfg.causal_layers).map(|l| spec.attn(&format!("causal{l}"), d, ff)).collect();
    let out_ln_g = spec.add("out.ln.gamma".into(), 1, d, Init::Ones);
    let out_ln_b = spec.add("out.ln.beta".into(), 1, d, Init::Zeros);
    let out_w = spec.add("out.w".into(), d, cfg.alphabet, Init::FanIn(1.0));
    let out_b = spec.add("out.b".into(), 1, cfg.alphabet, Init::Zeros);
    (Layout { embed, time_w, time_b, blocks, causal, out_ln_g, out_ln_b, out_w, out_b }, spec)
}

/// Target chain (fixed) plus the noisy binder at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexState<S> {
    pub target_seq: SequenceState<S>,
    pub target_coords: Mat<S>,
    pub binder_seq: SequenceState<S>,
    pub binder_coords: Mat<S>,
    pub t: usize,
}

impl<S: Scalar> ComplexState<S> {
    pub fn target_len(&self) -> usize {
        self.target_seq.len()
    }

    pub fn binder_len(&self) -> usize {
        self.binder_seq.len()
    }

    fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        let (m, n) = (self.target_len(), self.binder_len());
        if self.target_coords.shape() != (m, 3) || self.binder_coords.shape() != (n, 3) {
            return Err(Error::Contract("sequence and coordinate row counts differ".into()));
        }
        if self.target_seq.alphabet_size() != cfg.alphabet || self.binder_seq.alphabet_size() != cfg.alphabet {
            return Err(Error::Contract(format!("sequence rows must have {} columns", cfg.alphabet)));
        }
        if n == 0 {
            return Err(Error::Contract("binder is empty".into()));
        }
        if cfg.k_nn >= m + n {
            return Err(Error::Contract(format!("k_nn = {} needs more than {} residues", cfg.k_nn, m + n)));
        }
        if self.t == 0 || self.t > cfg.steps {
            return Err(Error::Contract(format!("step {} outside 1..={}", self.t, cfg.steps)));
        }
        Ok(())
    }
}

/// Denoiser output: clean residue-type distributions and clean coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S> {
    /// `N × K`, every row a simplex point.
    pub s0_hat: Mat<S>,
    /// `N × 3`.
    pub x0_hat: Mat<S>,
}

/// Recorded forward computation, needed by [`Denoiser::backward`].
pub struct ForwardPass<S> {
    tape: Option<Tape<S>>,
    s0_var: Var,
    x0_var: Var,
    coords_var: Var,
    pub prediction: Prediction<S>,
}

/// Parameter gradients (aligned with the store) and joint input-coordinate
/// gradients (`(M + N) × 3`, target rows first).
#[derive(Clone, Debug)]
pub struct DenoiserGrads<S> {
    pub params: Vec<Mat<S>>,
    pub coords: Mat<S>,
}

/// Output of one attention layer evaluated in isolation.
#[derive(Clone, Debug)]
pub struct AttentionOutput<S> {
    pub hidden: Mat<S>,
    /// Per-head attention weights (`rows × rows`).
    pub weights: Vec<Mat<S>>,
}

#[derive(Clone, Debug)]
pub struct Denoiser<S> {
    config: DenoiserConfig,
    params: ParamStore<S>,
    layout: Layout,
}

/// Sinusoidal features `[sin(p·ω_j), cos(p·ω_j)]`, `ω_j = 10000^(−j/(d/2))`.
pub fn sinusoidal<S: Scalar>(position: f64, d: usize) -> Vec<S> {
    let half = d / 2;
    let mut out = vec![S::zero(); d];
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        out[j] = S::lit((position * freq).sin());
        out[half + j] = S::lit((position * freq).cos());
    }
    out
}

struct Vars {
    params: Vec<Var>,
}

impl<S: Scalar> Denoiser<S> {
    /// Fresh parameters drawn with fan-in scaling from `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, spec) = build_layout(&config);
        let mut rng = substream(seed, Purpose::Init, 0);
        let tensors = spec
            .shapes
            .iter()
            .zip(&spec.inits)
            .map(|(&(r, c), init)| match *init {
                Init::Zeros => Mat::zeros(r, c),
                Init::Ones => Mat::filled(r, c, S::one()),
                Init::FanIn(gain) => {
                    let std = gain / (r as f64).sqrt();
                    let data = (0..r * c).map(|_| S::lit(std * rng.sample::<f64, _>(StandardNormal))).collect();
                    Mat::from_vec(r, c, data)
                }
            })
            .collect();
        Ok(Self { config, params: ParamStore { names: spec.names, tensors }, layout })
    }

    /// Rebuilds a denoiser around existing tensors; shapes must match the config.
    pub fn from_tensors(config: DenoiserConfig, tensors: Vec<Mat<S>>) -> Result<Self> {
        config.validate()?;
        let (layout, spec) = build_layout(&config);
        if tensors.len() != spec.shapes.len() {
            return Err(Error::Contract(format!("expected {} tensors, got {}", spec.shapes.len(), tensors.len())));
        }
        for ((t, &shape), name) in tensors.iter().zip(&spec.shapes).zip(&spec.names) {
            if t.shape() != shape {
                return Err(Error::Contract(format!("tensor {name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(Self { config, params: ParamStore { names: spec.names, tensors }, layout })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    fn bind_params(&self, tape: &mut Tape<S>) -> Vars {
        Vars { params: self.params.tensors.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect() }
    }

    fn embed(&self, tape: &mut Tape<S>, vars: &Vars, state: &ComplexState<S>) -> Var {
        let cfg = &self.config;
        let (m, n) = (state.target_len(), state.binder_len());
        let k = cfg.alphabet;
        let mut features = Mat::zeros(m + n, k + 1);
        for i in 0..m {
            features.row_mut(i)[..k].copy_from_slice(state.target_seq.row(i));
        }
        for i in 0..n {
            let row = features.row_mut(m + i);
            row[..k].copy_from_slice(state.binder_seq.row(i));
            row[k] = S::one();
        }
        let x = tape.input(features);
        let h = tape.matmul(x, vars.params[self.layout.embed]);
        let tfeat = tape.input(Mat::from_vec(1, cfg.d_model, sinusoidal(state.t as f64, cfg.d_model)));
        let temb = tape.matmul(tfeat, vars.params[self.layout.time_w]);
        let temb = tape.add(temb, vars.params[self.layout.time_b]);
        let mut h = tape.add_row(h, temb);
        if cfg.positional {
            let mut pe = Mat::zeros(m + n, cfg.d_model);
            for i in 0..m {
                pe.row_mut(i).copy_from_slice(&sinusoidal::<S>(i as f64, cfg.d_model));
            }
            for i in 0..n {
                pe.row_mut(m + i).copy_from_slice(&sinusoidal::<S>(i as f64, cfg.d_model));
            }
            let pe = tape.input(pe);
            h = tape.add(h, pe);
        }
        h
    }

    fn attention(&self, tape: &mut Tape<S>, vars: &Vars, idx: &AttnIdx, h: Var, causal: bool, weights: Option<&mut Vec<Var>>) -> Var {
        let p = |i: usize| vars.params[i];
        let d = self.config.d_model;
        let dh = d / self.config.heads;
        let a = tape.layer_norm(h, p(idx.ln1_g), p(idx.ln1_b));
        let q = tape.matmul(a, p(idx.wq));
        let k = tape.matmul(a, p(idx.wk));
        let v = tape.matmul(a, p(idx.wv));
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut probs = Vec::with_capacity(self.config.heads);
        for hd in 0..self.config.heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let w = tape.softmax(scores, causal);
            probs.push(w);
            heads.push(tape.matmul(w, vh));
        }
        if let Some(out) = weights {
            out.extend(probs);
        }
        let o = tape.concat_cols(&heads);
        let o = tape.matmul(o, p(idx.wo));
        let o = tape.add_row(o, p(idx.bo));
        let h1 = tape.add(h, o);
        let f = tape.layer_norm(h1, p(idx.ln2_g), p(idx.ln2_b));
        let f = tape.matmul(f, p(idx.w1));
        let f = tape.add_row(f, p(idx.b1));
        let f = tape.silu(f);
        let f = tape.matmul(f, p(idx.w2));
        let f = tape.add_row(f, p(idx.b2));
        tape.add(h1, f)
    }

    fn egnn(&self, tape: &mut Tape<S>, vars: &Vars, idx: &EgnnIdx, h: Var, x: Var, movable_from: usize) -> (Var, Var) {
        let p = |i: usize| vars.params[i];
        let d = self.config.d_model;
        let n = tape.value(x).rows();
        let k = self.config.k_nn;
        let edges = Arc::new(Edges::from_neighbors(&knn_graph(tape.value(x), k)));
        let src = Arc::new(edges.src.clone());
        let dst = Arc::new(edges.dst.clone());

        let hi = tape.gather_rows(h, src);
        let hk = tape.gather_rows(h, dst);
        let dist = tape.edge_dist(x, edges.clone(), S::lit(self.config.dist_eps));
        let e_in = tape.concat_cols(&[hi, hk, dist]);
        let m = tape.matmul(e_in, p(idx.fm_w1));
        let m = tape.add_row(m, p(idx.fm_b1));
        let m = tape.silu(m);
        let m = tape.matmul(m, p(idx.fm_w2));
        let m = tape.add_row(m, p(idx.fm_b2));
        let msg = tape.slice_cols(m, 0, d);
        let logit = tape.slice_cols(m, d, 1);

        // Softmax over each residue's k neighbours.
        let logit = tape.reshape(logit, n, k);
        let w = tape.softmax(logit, false);
        let w = tape.reshape(w, n * k, 1);
        let msg = tape.mul_col(msg, w);
        let c = tape.segment_sum(msg, k);

        let gate = tape.matmul(c, p(idx.fw_w));
        let gate = tape.add_row(gate, p(idx.fw_b));
        let gate = tape.sigmoid(gate);
        let upd = tape.mul(gate, c);
        let h_new = tape.add(h, upd);

        let fx = tape.matmul(msg, p(idx.fx_w1));
        let fx = tape.add_row(fx, p(idx.fx_b1));
        let fx = tape.silu(fx);
        let fx = tape.matmul(fx, p(idx.fx_w2));
        let fx = tape.add_row(fx, p(idx.fx_b2));
        let x_new = tape.coord_update(x, fx, edges, movable_from, S::lit(self.config.coord_clamp));
        (h_new, x_new)
    }

    fn check_finite(tape: &Tape<S>, v: Var, layer: &str) -> Result<()> {
        if tape.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite activation after layer {layer}")))
        }
    }

    /// Runs the network, keeping the tape when `retain` is set.
    pub fn forward(&self, state: &ComplexState<S>, retain: bool) -> Result<ForwardPass<S>> {
        state.validate(&self.config)?;
        let (m, n) = (state.target_len(), state.binder_len());
        let mut tape = Tape::new();
        let vars = self.bind_params(&mut tape);
        let mut h = self.embed(&mut tape, &vars, state);
        let mut joint = Mat::zeros(m + n, 3);
        for i in 0..m {
            joint.row_mut(i).copy_from_slice(state.target_coords.row(i));
        }
        for i in 0..n {
            joint.row_mut(m + i).copy_from_slice(state.binder_coords.row(i));
        }
        let coords_var = tape.leaf(joint);
        let mut x = coords_var;
        for (b, (attn, egnn)) in self.layout.blocks.iter().enumerate() {
            for (l, idx) in attn.iter().enumerate() {
                h = self.attention(&mut tape, &vars, idx, h, false, None);
                Self::check_finite(&tape, h, &format!("block{b}.attn{l}"))?;
            }
            (h, x) = self.egnn(&mut tape, &vars, egnn, h, x, m);
            Self::check_finite(&tape, h, &format!("block{b}.egnn"))?;
            Self::check_finite(&tape, x, &format!("block{b}.egnn (coordinates)"))?;
        }
        let mut hb = tape.slice_rows(h, m, n);
        for (l, idx) in self.layout.causal.iter().enumerate() {
            hb = self.attention(&mut tape, &vars, idx, hb, true, None);
            Self::check_finite(&tape, hb, &format!("causal{l}"))?;
        }
        let s0_var = self.output_head(&mut tape, &vars, hb);
        Self::check_finite(&tape, s0_var, "output head")?;
        let x0_var = tape.slice_rows(x, m, n);
        let prediction = Prediction { s0_hat: tape.value(s0_var).clone(), x0_hat: tape.value(x0_var).clone() };
        Ok(ForwardPass { tape: retain.then_some(tape), s0_var, x0_var, coords_var, prediction })
    }

    pub fn predict_clean(&self, state: &ComplexState<S>) -> Result<Prediction<S>> {
        Ok(self.forward(state, false)?.prediction)
    }

    /// Exact reverse-mode gradients of `Σ grad_s0 ⊙ ŝ0 + Σ grad_x0 ⊙ x̂0`.
    pub fn backward(&self, pass: &ForwardPass<S>, grad_s0: &Mat<S>, grad_x0: &Mat<S>) -> Result<DenoiserGrads<S>> {
        self.backward_with_fault(pass, grad_s0, grad_x0, GradFault::None)
    }

    pub fn backward_with_fault(
        &self,
        pass: &ForwardPass<S>,
        grad_s0: &Mat<S>,
        grad_x0: &Mat<S>,
        fault: GradFault,
    ) -> Result<DenoiserGrads<S>> {
        let tape = pass
            .tape
            .as_ref()
            .ok_or_else(|| Error::Contract("backward needs a forward pass recorded with retain = true".into()))?;
        if grad_s0.shape() != pass.prediction.s0_hat.shape() || grad_x0.shape() != pass.prediction.x0_hat.shape() {
            return Err(Error::Contract("upstream gradient shapes do not match the prediction".into()));
        }
        let mut grads = tape.backward(&[(pass.s0_var, grad_s0.clone()), (pass.x0_var, grad_x0.clone())], fault);
        let coords = grads.take(pass.coords_var).unwrap_or_else(|| Mat::zeros(tape.value(pass.coords_var).rows(), 3));
        let mut params = self.params.zeros_like();
        for (i, g) in tape.param_grads(&mut grads) {
            params[i].add_assign(&g);
        }
        Ok(DenoiserGrads { params, coords })
    }

    /// Embedding stage alone: joint hidden states and joint coordinates.
    pub fn embed_inputs(&self, state: &ComplexState<S>) -> Result<(Mat<S>, Mat<S>)> {
        state.validate(&self.config)?;
        let mut tape = Tape::new();
        let vars = self.bind_params(&mut tape);
        let h = self.embed(&mut tape, &vars, state);
        let mut joint = state.target_coords.clone().into_vec();
        joint.extend_from_slice(state.binder_coords.as_slice());
        Ok((tape.value(h).clone(), Mat::from_vec(state.target_len() + state.binder_len(), 3, joint)))
    }

    /// One bidirectional self-attention layer (`layer` within `block`).
    pub fn self_attention_layer(&self, block: usize, layer: usize, hidden: &Mat<S>) -> AttentionOutput<S> {
        let idx = self.layout.blocks[block].0[layer];
        self.run_attention(&idx, hidden, false)
    }

    /// One causal attention layer over binder rows.
    pub fn causal_attention_layer(&self, layer: usize, hidden: &Mat<S>) -> AttentionOutput<S> {
        let idx = self.layout.causal[layer];
        self.run_attention(&idx, hidden, true)
    }

    fn run_attention(&self, idx: &AttnIdx, hidden: &Mat<S>, causal: bool) -> AttentionOutput<S> {
        let mut tape = Tape::new();
        let vars = self.bind_params(&mut tape);
        let h = tape.input(hidden.clone());
        let mut w = Vec::new();
        let out = self.attention(&mut tape, &vars, idx, h, causal, Some(&mut w));
        AttentionOutput { hidden: tape.value(out).clone(), weights: w.into_iter().map(|v| tape.value(v).clone()).collect() }
    }

    /// The graph layer of `block`; rows `< movable_from` keep their coordinates.
    pub fn knn_egnn_layer(&self, block: usize, hidden: &Mat<S>, coords: &Mat<S>, movable_from: usize) -> Result<(Mat<S>, Mat<S>)> {
        if self.config.k_nn >= coords.rows() {
            return Err(Error::Contract(format!("k_nn = {} needs more than {} residues", self.config.k_nn, coords.rows())));
        }
        let idx = self.layout.blocks[block].1;
        let mut tape = Tape::new();
        let vars = self.bind_params(&mut tape);
        let h = tape.input(hidden.clone());
        let x = tape.input(coords.clone());
        let (h, x) = self.egnn(&mut tape, &vars, &idx, h, x, movable_from);
        Ok((tape.value(h).clone(), tape.value(x).clone()))
    }

    /// Causal stack plus softmax head applied to binder hidden states.
    pub fn causal_head(&self, hidden_binder: &Mat<S>) -> Mat<S> {
        let mut tape = Tape::new();
        let vars = self.bind_params(&mut tape);
        let mut hb = tape.input(hidden_binder.clone());
        for idx in &self.layout.causal {
            hb = self.attention(&mut tape, &vars, idx, hb, true, None);
        }
        let s0 = self.output_head(&mut tape, &vars, hb);
        tape.value(s0).clone()
    }

    fn output_head(&self, tape: &mut Tape<S>, vars: &Vars, hb: Var) -> Var {
        let p = |i: usize| vars.params[i];
        let o = tape.layer_norm(hb, p(self.layout.out_ln_g), p(self.layout.out_ln_b));
        let o = tape.matmul(o, p(self.layout.out_w));
        let o = tape.add_row(o, p(self.layout.out_b));
        tape.softmax(o, false)
    }

    /// Index of a named parameter tensor.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.index_of(name)
    }
}
