use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use binderdiff::denoiser::DenoiserConfig;
use binderdiff::sampling::{parse_fragment_library, GuidanceConfig};
use binderdiff::schedules::DiffusionConfig;
use binderdiff::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceSection {
    pub k_guid: usize,
    pub n_init: usize,
    pub structure: bool,
    /// Fragment library; sequence guidance is used only when this is set.
    pub fragments: Option<PathBuf>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self { k_guid: g.k_guid, n_init: g.n_init, structure: g.structure, fragments: None }
    }
}

impl GuidanceSection {
    pub fn build(&self, mu_knn: f64) -> Result<GuidanceConfig> {
        let fragments = match &self.fragments {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_fragment_library(&text)?
            }
            None => Vec::new(),
        };
        let g = GuidanceConfig {
            k_guid: self.k_guid,
            mu_knn,
            n_init: self.n_init,
            structure: self.structure,
            sequence: !fragments.is_empty(),
            fragments,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    /// Training records.
    pub data: Option<PathBuf>,
    /// Output directory for the checkpoint and the metrics log.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    /// Settings used by `train --toy`.
    pub fn toy(seed: u64) -> Self {
        let mut cfg = Self { seed, ..Self::default() };
        cfg.train = toy_train_config();
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.train.validate()?;
        if self.guidance.k_guid == 0 || self.guidance.n_init == 0 {
            bail!("guidance.k_guid and guidance.n_init must be >= 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig { lr: 2e-3, batch_tokens: 1024, w_ce: 1.0, ..TrainConfig::default() }
}
