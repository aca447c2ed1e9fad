//! Checkpoint directories.
//!
//! `manifest.toml` holds the format version, alphabet and its hash, model and
//! schedule configuration, normalization constants, the training step and the
//! tensor table (name and shape, in storage order). `model.bin` holds the
//! tensors as concatenated little-endian 32-bit floats; `optimizer.bin`, when
//! present, holds the Adam first moments followed by the second moments in
//! the same layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alphabet;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;
use crate::schedules::DiffusionConfig;
use crate::training::AdamState;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";
pub const MODEL_BLOB: &str = "model.bin";
pub const OPTIMIZER_BLOB: &str = "optimizer.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub alphabet: String,
    pub alphabet_hash: String,
    pub step: u64,
    pub seed: u64,
    pub s_norm: f64,
    pub mu_knn: f64,
    pub has_optimizer: bool,
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub model: Denoiser<S>,
    pub diffusion: DiffusionConfig,
    /// Coordinate scale in Å.
    pub s_norm: f64,
    /// Mean kNN distance statistic of the training binders (normalized units).
    pub mu_knn: f64,
    pub step: u64,
    pub seed: u64,
    pub optimizer: Option<AdamState<S>>,
}

fn encode<S: Scalar>(tensors: &[Mat<S>], out: &mut Vec<u8>) {
    for t in tensors {
        for &v in t.as_slice() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
}

fn decode<S: Scalar>(bytes: &[u8], shapes: &[TensorEntry], path: &Path) -> Result<Vec<Mat<S>>> {
    let need: usize = shapes.iter().map(|e| e.rows * e.cols * 4).sum();
    if bytes.len() != need {
        return Err(Error::Validation(format!("{}: {} bytes, manifest needs {need}", path.display(), bytes.len())));
    }
    let mut off = 0;
    Ok(shapes
        .iter()
        .map(|e| {
            let n = e.rows * e.cols;
            let data = bytes[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            off += 4 * n;
            Mat::from_vec(e.rows, e.cols, data)
        })
        .collect())
}

impl<S: Scalar> Checkpoint<S> {
    pub fn manifest(&self) -> Manifest {
        let p = self.model.params();
        Manifest {
            format_version: FORMAT_VERSION,
            alphabet: alphabet::ALPHABET.to_string(),
            alphabet_hash: alphabet::alphabet_hash(),
            step: self.step,
            seed: self.seed,
            s_norm: self.s_norm,
            mu_knn: self.mu_knn,
            has_optimizer: self.optimizer.is_some(),
            denoiser: self.model.config().clone(),
            diffusion: self.diffusion,
            tensors: p
                .names()
                .iter()
                .zip(p.tensors())
                .map(|(n, t)| TensorEntry { name: n.clone(), rows: t.rows(), cols: t.cols() })
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = toml::to_string(&self.manifest()).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let mut blob = Vec::new();
        encode(self.model.params().tensors(), &mut blob);
        let bpath = dir.join(MODEL_BLOB);
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        let opath = dir.join(OPTIMIZER_BLOB);
        match &self.optimizer {
            Some(adam) => {
                let mut blob = Vec::new();
                encode(&adam.m, &mut blob);
                encode(&adam.v, &mut blob);
                fs::write(&opath, blob).map_err(|e| Error::io(&opath, e))?;
            }
            None if opath.exists() => fs::remove_file(&opath).map_err(|e| Error::io(&opath, e))?,
            None => {}
        }
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", mpath.display())))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint format version {}", m.format_version)));
        }
        let ours = alphabet::alphabet_hash();
        if m.alphabet_hash != ours || m.alphabet != alphabet::ALPHABET {
            return Err(Error::Config(format!(
                "checkpoint alphabet hash {} does not match this build's {ours}",
                m.alphabet_hash
            )));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Self::read_manifest(dir)?;
        let bpath = dir.join(MODEL_BLOB);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let tensors = decode::<S>(&bytes, &m.tensors, &bpath)?;
        let model = Denoiser::from_tensors(m.denoiser.clone(), tensors)?;
        if let Some((e, n)) = m.tensors.iter().zip(model.params().names()).find(|(e, n)| &e.name != *n) {
            return Err(Error::Validation(format!("tensor {} stored where {n} was expected", e.name)));
        }
        let optimizer = if m.has_optimizer {
            let opath = dir.join(OPTIMIZER_BLOB);
            let bytes = fs::read(&opath).map_err(|e| Error::io(&opath, e))?;
            let mut doubled = m.tensors.clone();
            doubled.extend(m.tensors.iter().cloned());
            let mut all = decode::<S>(&bytes, &doubled, &opath)?;
            let v = all.split_off(m.tensors.len());
            Some(AdamState { m: all, v, step: m.step })
        } else {
            None
        };
        Ok(Self { model, diffusion: m.diffusion, s_norm: m.s_norm, mu_knn: m.mu_knn, step: m.step, seed: m.seed, optimizer })
    }
}
