//! Run configuration and the reproducibility block.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempedit::codec::CodecConfig;
use tempedit::denoiser::DenoiserConfig;
use tempedit::dmd::DistillConfig;
use tempedit::flow::TrainConfig;
use tempedit::oracle::{GaussianWorld, OracleWorld};
use tempedit::sampler::SamplerConfig;
use tempedit::worldgen::{Canvas, TaskKind, DEFAULT_CANVAS};

use crate::{CliError, CliResult};

pub const REPRO_NAME: &str = "repro.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub counts: BTreeMap<TaskKind, usize>,
    pub canvas: Canvas,
    pub seed: u64,
    /// Write per-episode frame directories next to the manifest.
    pub with_frames: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let counts = [(TaskKind::Move, 8), (TaskKind::Recolor, 8)].into_iter().collect();
        Self { counts, canvas: DEFAULT_CANVAS, seed: 0, with_frames: true }
    }
}

/// Files a run reads. Paths are made absolute when the run starts so the
/// reproducibility block works from any directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory holding `manifest.json`.
    pub manifest: Option<PathBuf>,
    /// Episode index into the manifest for single-sample commands.
    pub episode: usize,
    /// `[start, end)` episode range for eval and distill prompts.
    pub range: Option<[usize; 2]>,
    /// Condition frame as a PPM file, used instead of a manifest episode.
    pub image: Option<PathBuf>,
    pub instruction: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub denoiser: DenoiserConfig,
    pub codec: CodecConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Training steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub sampler: SamplerConfig,
    pub distill: DistillConfig,
    /// Use the closed-form world instead of a learned real score or field.
    pub use_oracle: bool,
    pub oracle: OracleWorld,
    /// Samples drawn by oracle-check.
    pub oracle_samples: usize,
    pub inputs: Inputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            codec: CodecConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: 0,
            sampler: SamplerConfig::default(),
            distill: DistillConfig::default(),
            use_oracle: false,
            oracle: OracleWorld::Gaussian(GaussianWorld::standard()),
            oracle_samples: 2000,
            inputs: Inputs::default(),
        }
    }
}

/// Everything needed to re-execute a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproBlock {
    pub command: String,
    /// SHA-256 of the compact JSON of `config`.
    pub config_hash: String,
    pub seed: u64,
    /// Sampling schedule knots, empty for commands that do not sample.
    pub knots: Vec<f64>,
    pub config: RunConfig,
}

pub fn config_hash(config: &RunConfig) -> CliResult<String> {
    let bytes = serde_json::to_vec(config).map_err(tempedit::Error::from)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Reads either a plain config or a reproducibility block. A block must
/// name `command` and match its recorded hash.
pub fn load_config(path: &Path, command: &str) -> CliResult<RunConfig> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| CliError::Input(format!("config {} is not JSON: {e}", path.display())))?;
    if value.get("config_hash").is_some() {
        let block: ReproBlock = serde_json::from_value(value).map_err(|e| CliError::Input(format!("bad reproducibility block: {e}")))?;
        if block.command != command {
            return Err(CliError::Input(format!("block was written by `{}`, not `{command}`", block.command)));
        }
        if config_hash(&block.config)? != block.config_hash {
            return Err(CliError::Input("reproducibility block hash does not match its config".into()));
        }
        return Ok(block.config);
    }
    serde_json::from_value(value).map_err(|e| CliError::Input(format!("bad config {}: {e}", path.display())))
}

fn absolute(p: &mut Option<PathBuf>) -> CliResult<()> {
    if let Some(path) = p {
        *path = fs::canonicalize(&*path).map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    }
    Ok(())
}

impl Inputs {
    pub fn resolve(&mut self) -> CliResult<()> {
        absolute(&mut self.checkpoint)?;
        absolute(&mut self.manifest)?;
        absolute(&mut self.image)
    }
}

pub fn write_repro(out: &Path, command: &str, seed: u64, knots: Vec<f64>, config: &RunConfig) -> CliResult<()> {
    let block = ReproBlock { command: command.to_string(), config_hash: config_hash(config)?, seed, knots, config: config.clone() };
    write_json(&out.join(REPRO_NAME), &block)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(tempedit::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(tempedit::Error::from)?;
    Ok(())
}
