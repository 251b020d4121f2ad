//! Run configuration: built-in defaults, then the `--config` file, then
//! flags. The resolved result is echoed into every output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use accelgraph::data::{write_atomic, SyntheticConfig};
use accelgraph::model::{ArchDescriptor, DEFAULT_WIDTHS};
use accelgraph::simulation::RolloutConfig;
use accelgraph::training::{TrainingConfig, DEFAULT_SPLIT_RATIO};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Name of the provenance file written next to every command's outputs.
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

/// Contents of a `--config` file. Every section and field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub split_ratio: Option<f64>,
    pub synthetic: Option<SyntheticConfig>,
    pub training: TrainingSection,
    pub rollout: Option<RolloutConfig>,
}

/// Training options as written by hand; the architecture is named rather
/// than spelled out.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub arch: Option<String>,
    pub recurrent: Option<bool>,
    pub widths: Option<[usize; 3]>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub dropout: Option<f64>,
    pub clip_norm: Option<f64>,
    pub mixture_components: Option<usize>,
    pub tau: Option<f64>,
    pub bptt_window: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("{}: invalid config", path.display()))
    }

    /// `--seed` wins over the file, which wins over 0.
    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    pub fn split_ratio(&self) -> f64 {
        self.split_ratio.unwrap_or(DEFAULT_SPLIT_RATIO)
    }
}

/// Flag overrides for `train`.
#[derive(Debug, Default)]
pub struct TrainingFlags {
    pub arch: Option<String>,
    pub recurrent: bool,
    pub tau: Option<f64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

/// Resolves the training configuration for `seed`.
pub fn training_config(file: &TrainingSection, flags: &TrainingFlags, seed: u64) -> Result<TrainingConfig> {
    let name = flags.arch.as_deref().or(file.arch.as_deref()).unwrap_or("egcn");
    let recurrent = flags.recurrent || file.recurrent.unwrap_or(false);
    let arch = ArchDescriptor::parse(name, recurrent)?.with_widths(file.widths.unwrap_or(DEFAULT_WIDTHS));
    let d = TrainingConfig::default();
    let config = TrainingConfig {
        learning_rate: flags.lr.or(file.learning_rate).unwrap_or(d.learning_rate),
        epochs: flags.epochs.or(file.epochs).unwrap_or(d.epochs),
        dropout: file.dropout.unwrap_or(d.dropout),
        clip_norm: file.clip_norm.unwrap_or(d.clip_norm),
        mixture_components: file.mixture_components.unwrap_or(d.mixture_components),
        tau: flags.tau.or(file.tau).unwrap_or(d.tau),
        seed,
        arch,
        bptt_window: file.bptt_window.unwrap_or(d.bptt_window),
    };
    config.validate()?;
    Ok(config)
}

/// Everything a command ran with, as written to [`RUN_CONFIG_FILE`].
#[derive(Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    /// Label of the model a simulation or evaluation belongs to.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_ratio: Option<f64>,
    /// Absolute input and output paths by role.
    pub paths: BTreeMap<String, PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rollout: Option<RolloutConfig>,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64) -> Self {
        RunConfig {
            command: command.to_string(),
            seed,
            model: None,
            split_ratio: None,
            paths: BTreeMap::new(),
            synthetic: None,
            training: None,
            rollout: None,
        }
    }

    pub fn path(&mut self, role: &str, path: &Path) -> &mut Self {
        self.paths.insert(role.to_string(), path.to_path_buf());
        self
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing the run configuration")?;
        write_atomic(&out.join(RUN_CONFIG_FILE), text.as_bytes())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_CONFIG_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("{}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("{}: invalid run configuration", path.display()))
    }
}

/// Absolute form of an existing input path.
pub fn input_path(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).with_context(|| format!("{}: input not found", path.display()))
}

/// Creates the output directory and returns its absolute path. Refuses to
/// write into any input directory.
pub fn output_dir(path: &Path, inputs: &[&Path]) -> Result<PathBuf> {
    std::fs::create_dir_all(path).with_context(|| format!("{}: cannot create output directory", path.display()))?;
    let out = input_path(path)?;
    for input in inputs {
        let dir = if input.is_dir() { input } else { input.parent().unwrap_or(input) };
        if dir == out {
            bail!("{}: output directory must differ from the input {}", out.display(), input.display());
        }
    }
    Ok(out)
}
