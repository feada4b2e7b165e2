use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::agents::Split;
use crate::training::{RunMetrics, RunOutput, TrainConfig, CHECKPOINT_FILE, METRICS_FILE, UTTERANCES_FILE};

pub const RUNS_DIR: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFiles {
    pub metrics: String,
    pub utterances: String,
    pub checkpoint: String,
}

/// `manifest.json` of a run directory. Written last, so its presence marks
/// the run as complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_name: String,
    pub config_hash: String,
    pub seed: u64,
    /// The resolved config the run was trained with.
    pub config: TrainConfig,
    /// The config file text the run was launched from, when there was one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub files: RunFiles,
    pub final_train: Option<f64>,
    pub final_val: Option<f64>,
    pub train_states: usize,
    pub val_states: usize,
    pub games_processed: usize,
}

/// `<root>/runs/<config hash>-s<seed>`.
pub fn run_dir(root: &Path, config: &TrainConfig) -> PathBuf {
    root.join(RUNS_DIR).join(config.run_name())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

/// Writes the run's artifacts and then its manifest.
pub fn write_run(dir: &Path, output: &RunOutput, source: Option<String>) -> Result<RunManifest, ExperimentError> {
    let stale = dir.join(MANIFEST_FILE);
    if stale.exists() {
        fs::remove_file(&stale)?;
    }
    output.write_to(dir)?;
    let manifest = RunManifest {
        run_name: output.config.run_name(),
        config_hash: output.config.config_hash(),
        seed: output.config.seed,
        config: output.config.clone(),
        source,
        files: RunFiles {
            metrics: METRICS_FILE.into(),
            utterances: UTTERANCES_FILE.into(),
            checkpoint: CHECKPOINT_FILE.into(),
        },
        final_train: output.metrics.final_reward(Split::Train),
        final_val: output.metrics.final_reward(Split::Val),
        train_states: output.train_states,
        val_states: output.val_states,
        games_processed: output.games_processed,
    };
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_run_manifest(dir: &Path) -> Result<RunManifest, ExperimentError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// The metrics of a completed run of exactly `config`, if `dir` holds one.
pub fn read_completed_run(dir: &Path, config: &TrainConfig) -> Option<RunMetrics> {
    let manifest = read_run_manifest(dir).ok()?;
    if manifest.config != config.resolved() {
        return None;
    }
    let text = fs::read_to_string(dir.join(&manifest.files.metrics)).ok()?;
    RunMetrics::from_csv(&text).ok()
}
