//! Run configuration: a TOML document whose tables mirror the library's
//! config structs. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assets::{GeneratorSetConfig, OracleBuildConfig};
use crate::cl::MethodConfig;
use crate::dreaming::{DreamConfig, StopKind};
use crate::error::{Error, Result};
use crate::generator::PretrainConfig;
use crate::nn::hash_bytes;
use crate::oracle::StopRule;
use crate::synth::{task_sizes, BenchmarkSpec};

/// Where the frozen assets live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssetPaths {
    pub generator: PathBuf,
    pub oracle: PathBuf,
}

impl Default for AssetPaths {
    fn default() -> Self {
        Self {
            generator: PathBuf::from("assets/generator"),
            oracle: PathBuf::from("assets/oracle"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fresh networks averaged for the forward-transfer baseline.
    pub random_inits: usize,
    pub random_seed: u64,
    /// Epochs of the all-class classifier used for leak counting.
    pub joint_epochs: usize,
    pub joint_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            random_inits: 3,
            random_seed: 1000,
            joint_epochs: 10,
            joint_seed: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub benchmark: BenchmarkSpec,
    pub method: MethodConfig,
    pub dream: DreamConfig,
    pub assets: AssetPaths,
    pub generator_set: GeneratorSetConfig,
    pub pretrain: PretrainConfig,
    pub oracle: OracleBuildConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2, 3, 4],
            benchmark: BenchmarkSpec::default(),
            method: MethodConfig::default(),
            dream: DreamConfig::default(),
            assets: AssetPaths::default(),
            generator_set: GeneratorSetConfig::default(),
            pretrain: PretrainConfig::default(),
            oracle: OracleBuildConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

fn rate(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Config(format!("{name} must be finite and positive")));
    }
    Ok(())
}

impl DreamConfig {
    pub fn validate(&self) -> Result<()> {
        positive("dream.samples_per_class", self.samples_per_class)?;
        positive("dream.probe_size", self.probe_size)?;
        rate("dream.learning_rate", self.learning_rate)?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("dream.threshold must lie in (0, 1)".into()));
        }
        match self.rule {
            StopRule::NOfK { n, k } if n == 0 || n > k => {
                return Err(Error::Config("dream.rule needs 0 < n <= k".into()))
            }
            StopRule::Consecutive { n: 0 } => return Err(Error::Config("dream.rule needs n > 0".into())),
            _ => {}
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let sizes = task_sizes(self.benchmark.num_classes, self.benchmark.post_first_tasks)
            .map_err(|e| Error::Config(format!("benchmark: {e}")))?;
        if sizes.len() < 2 {
            return Err(Error::Config("benchmark needs at least two tasks".into()));
        }
        positive("benchmark.samples_per_class", self.benchmark.samples_per_class)?;
        self.method.validate()?;
        if self.method.dreams {
            self.dream.validate()?;
            if self.dream.stop == StopKind::Oracle {
                self.oracle.label.validate()?;
            }
            if self.method.buffer_capacity == 0 {
                return Err(Error::Config(
                    "dreaming draws conditions from the buffer, so buffer_capacity must be positive".into(),
                ));
            }
            if sizes.iter().any(|&n| n < 2) {
                return Err(Error::Config("dreaming needs at least two classes per task".into()));
            }
        }
        positive("eval.random_inits", self.eval.random_inits)?;
        Ok(())
    }

    /// Canonical TOML text of this configuration.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn snapshot_hash(&self) -> Result<String> {
        Ok(hash_bytes(self.snapshot()?.as_bytes()))
    }
}
