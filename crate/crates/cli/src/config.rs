//! Run configuration: a sectioned TOML file with command-line overrides.
//! Unknown keys are rejected; the resolved config is written next to every
//! run's artifacts and its hash is embedded in them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use attnlab_core::attack::AttackConfig;
use attnlab_core::eval::EvalConfig;
use attnlab_core::vlm::{ModelConfig, TrainConfig};

pub const ARTIFACT_ROOT_ENV: &str = "ATTNLAB_OUT";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogSection {
    pub count: Option<usize>,
    pub categories: Option<usize>,
}

impl CatalogSection {
    pub fn count(&self) -> usize {
        self.count.unwrap_or(40)
    }

    pub fn categories(&self) -> usize {
        self.categories.unwrap_or(2)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    /// Fine-tune steps used to build the grey-box clone.
    pub finetune_steps: Option<usize>,
}

impl TransferSection {
    pub fn finetune_steps(&self) -> usize {
        self.finetune_steps.unwrap_or(150)
    }
}

/// The whole configuration file. Seeds are mandatory and explicit: either
/// here or via `--seed`, never from the wall clock.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub catalog: CatalogSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    pub transfer: TransferSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Applies command-line overrides and checks global invariants. The
    /// resolved seed and thread count are pushed into every section.
    pub fn resolve(
        mut self,
        seed: Option<u64>,
        threads: Option<usize>,
        out: Option<PathBuf>,
    ) -> Result<RunConfig> {
        if seed.is_some() {
            self.seed = seed;
        }
        let Some(seed) = self.seed else {
            bail!("no seed given: pass --seed or set `seed` in the config file");
        };
        if let Some(t) = threads {
            self.threads = Some(t);
        }
        let threads = self.threads.unwrap_or(1).max(1);
        self.threads = Some(threads);
        if out.is_some() {
            self.out = out;
        } else if self.out.is_none() {
            if let Ok(env_root) = std::env::var(ARTIFACT_ROOT_ENV) {
                self.out = Some(PathBuf::from(env_root));
            }
        }

        self.attack.seed = seed;
        self.attack.threads = threads;
        self.eval.seed = seed;
        self.eval.threads = threads;
        self.train.threads = threads;

        self.model.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.attack.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.eval.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved config")
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("artifacts"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical serialized config; embedded in every artifact.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        hex::encode(&hasher.finalize()[..16])
    }

    /// Writes the resolved config next to the run's artifacts.
    pub fn write_resolved(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating artifact dir {}", dir.display()))?;
        let path = dir.join(format!("{name}.resolved.toml"));
        std::fs::write(&path, self.to_toml())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
