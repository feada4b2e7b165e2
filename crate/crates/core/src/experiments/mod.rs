//! The three experiment sweeps and the two utterance analyses.
//!
//! A sweep expands a [`SweepSpec`] into cells (condition, axis value, seed),
//! trains each cell in its own run directory, and aggregates the final
//! normalized rewards into an [`AggregateTable`]. Run directories are named
//! by config hash and seed, so cells shared between experiments are trained
//! once and an interrupted sweep resumes where it stopped.

mod aggregate;
mod analysis;
mod layout;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Channel, Split, UtteranceKind};
use crate::training::{train_run, RunMetrics, TrainConfig, TrainError, DEFAULT_DEMO_CAPACITY, DEFAULT_LANGUAGE_CAPACITY};

pub use aggregate::{AggregateRow, AggregateTable};
pub use analysis::{
    analyze_message_semantics, analyze_unique_utterances, MessageSemantics, SemanticsRow, UniqueCounts, UNIQUE_HEADER,
};
pub use layout::{
    read_completed_run, read_run_manifest, run_dir, write_run, RunFiles, RunManifest, MANIFEST_FILE, RUNS_DIR,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid sweep: {0}")]
    InvalidSpec(String),
    #[error("malformed table: {0}")]
    Format(String),
    #[error("utterance log is empty")]
    EmptyLog,
    #[error("channel mismatch: expected {expected:?} utterances, found {found:?}")]
    ChannelMismatch { expected: UtteranceKind, found: UtteranceKind },
}

/// The varied quantity of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Axis {
    /// Channel capacity, with separate grids for message length and demo count.
    Capacity { language: Vec<usize>, demo: Vec<usize> },
    N { values: Vec<usize> },
    TrainFraction { values: Vec<f64> },
}

impl Axis {
    /// Column name used in aggregate tables.
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Capacity { .. } => "capacity",
            Axis::N { .. } => "n",
            Axis::TrainFraction { .. } => "train_fraction",
        }
    }

    /// Axis values swept for one condition.
    pub fn values_for(&self, channel: Channel) -> Vec<f64> {
        match self {
            Axis::Capacity { language, demo } => {
                let grid = if channel.is_demo() { demo } else { language };
                grid.iter().map(|&k| k as f64).collect()
            }
            Axis::N { values } => values.iter().map(|&n| n as f64).collect(),
            Axis::TrainFraction { values } => values.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// 1, 2 or 3.
    pub experiment: u8,
    pub base: TrainConfig,
    pub axis: Axis,
    pub conditions: Vec<Channel>,
    pub seeds: Vec<u64>,
    /// Message length when capacity is not the axis.
    pub language_capacity: usize,
    /// Demo count when capacity is not the axis.
    pub demo_capacity: usize,
}

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

impl SweepSpec {
    /// Channel capacity at `n = 4`: K ∈ {1, 2, 5, 10, 15}, k ∈ {1..5}, all
    /// three channels.
    pub fn experiment_1() -> Self {
        Self {
            experiment: 1,
            base: TrainConfig::default(),
            axis: Axis::Capacity {
                language: vec![1, 2, 5, 10, 15],
                demo: vec![1, 2, 3, 4, 5],
            },
            conditions: Channel::ALL.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            language_capacity: DEFAULT_LANGUAGE_CAPACITY,
            demo_capacity: DEFAULT_DEMO_CAPACITY,
        }
    }

    /// Task difficulty: `n` from 3 to 6 with K = 10 and k = 2.
    pub fn experiment_2() -> Self {
        Self {
            experiment: 2,
            axis: Axis::N { values: vec![3, 4, 5, 6] },
            conditions: vec![Channel::Language, Channel::DemoPedagogical],
            ..Self::experiment_1()
        }
    }

    /// Teacher competence: train fraction from 0.7 down to 0.05 at `n = 4`.
    pub fn experiment_3() -> Self {
        Self {
            experiment: 3,
            axis: Axis::TrainFraction {
                values: vec![0.05, 0.1, 0.2, 0.4, 0.7],
            },
            conditions: vec![Channel::Language, Channel::DemoPedagogical],
            ..Self::experiment_1()
        }
    }

    pub fn for_experiment(id: u8) -> Result<Self, ExperimentError> {
        match id {
            1 => Ok(Self::experiment_1()),
            2 => Ok(Self::experiment_2()),
            3 => Ok(Self::experiment_3()),
            other => Err(ExperimentError::InvalidSpec(format!("experiment must be 1, 2 or 3, got {other}"))),
        }
    }

    /// Experiment 2 reports both splits; the others report validation only.
    pub fn splits(&self) -> Vec<Split> {
        if self.experiment == 2 {
            vec![Split::Train, Split::Val]
        } else {
            vec![Split::Val]
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidSpec(m));
        if !(1..=3).contains(&self.experiment) {
            return bad(format!("experiment must be 1, 2 or 3, got {}", self.experiment));
        }
        if self.conditions.is_empty() {
            return bad("no conditions".into());
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if has_duplicates(&self.seeds) {
            return bad("seeds must be pairwise distinct".into());
        }
        if has_duplicates(&self.conditions) {
            return bad("conditions must be pairwise distinct".into());
        }
        for &c in &self.conditions {
            let values = self.axis.values_for(c);
            if values.is_empty() {
                return bad(format!("no {} values for {c}", self.axis.name()));
            }
            if has_duplicates(&values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()) {
                return bad(format!("repeated {} value for {c}", self.axis.name()));
            }
        }
        let expect = |ok: bool, what: &str| if ok { Ok(()) } else { bad(format!("experiment {} requires {what}", self.experiment)) };
        match self.experiment {
            1 => {
                expect(matches!(self.axis, Axis::Capacity { .. }), "a capacity axis")?;
                expect(self.base.n == 4, "n = 4")?;
                expect(self.base.train_fraction == 0.8, "train_fraction = 0.8")?;
                expect(Channel::ALL.iter().all(|c| self.conditions.contains(c)), "all three channels")?;
            }
            2 => {
                expect(matches!(self.axis, Axis::N { .. }), "an n axis")?;
                expect(self.language_capacity == 10 && self.demo_capacity == 2, "K = 10 and k = 2")?;
            }
            _ => {
                expect(matches!(self.axis, Axis::TrainFraction { .. }), "a train_fraction axis")?;
                expect(self.base.n == 4, "n = 4")?;
                expect(self.language_capacity == 10 && self.demo_capacity == 2, "K = 10 and k = 2")?;
            }
        }
        for cell in self.cells() {
            cell.config.validate()?;
        }
        Ok(())
    }

    /// Every run of the sweep, ordered by condition, axis value, then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &condition in &self.conditions {
            for axis_value in self.axis.values_for(condition) {
                for &seed in &self.seeds {
                    let mut config = TrainConfig {
                        channel: condition,
                        seed,
                        capacity: Some(if condition.is_demo() {
                            self.demo_capacity
                        } else {
                            self.language_capacity
                        }),
                        ..self.base.clone()
                    };
                    match self.axis {
                        Axis::Capacity { .. } => config.capacity = Some(axis_value as usize),
                        Axis::N { .. } => config.n = axis_value as usize,
                        Axis::TrainFraction { .. } => config.train_fraction = axis_value,
                    }
                    out.push(Cell {
                        condition,
                        axis_value,
                        seed,
                        config: config.resolved(),
                    });
                }
            }
        }
        out
    }
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items.iter().enumerate().any(|(i, a)| items[..i].contains(a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub condition: Channel,
    pub axis_value: f64,
    pub seed: u64,
    /// Fully resolved.
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Trained,
    /// A completed run directory was found and reused.
    Reused,
    Failed { error: String },
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: Cell,
    pub dir: PathBuf,
    pub status: CellStatus,
    pub metrics: Option<RunMetrics>,
}

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    /// Runs trained concurrently.
    pub parallel: usize,
    /// Retrain cells whose run directory is already complete.
    pub force: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { parallel: 1, force: false }
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub outcomes: Vec<CellOutcome>,
    pub table: AggregateTable,
    /// Where the aggregate CSV and the sweep manifest were written.
    pub dir: PathBuf,
}

impl SweepResult {
    pub fn failures(&self) -> impl Iterator<Item = &CellOutcome> {
        self.outcomes.iter().filter(|o| matches!(o.status, CellStatus::Failed { .. }))
    }
}

pub const SWEEPS_DIR: &str = "sweeps";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SWEEP_MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub spec: SweepSpec,
    pub aggregate: String,
    pub cells: Vec<SweepManifestCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifestCell {
    pub condition: Channel,
    pub axis_value: f64,
    pub seed: u64,
    pub config_hash: String,
    pub run_dir: String,
    #[serde(flatten)]
    pub status: CellStatus,
}

/// Directory holding a sweep's aggregate and manifest.
pub fn sweep_dir(root: &Path, experiment: u8) -> PathBuf {
    root.join(SWEEPS_DIR).join(format!("experiment_{experiment}"))
}

/// Trains (or reuses) every cell, then aggregates. A failed cell is recorded
/// in its outcome and flagged as missing in the table; it does not stop the
/// other cells.
pub fn run_sweep(
    spec: &SweepSpec,
    root: &Path,
    options: SweepOptions,
    on_cell: &(dyn Fn(&CellOutcome) + Sync),
) -> Result<SweepResult, ExperimentError> {
    spec.validate()?;
    let cells = spec.cells();
    fs::create_dir_all(root.join(RUNS_DIR))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallel.max(1))
        .build()
        .map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .into_par_iter()
            .map(|cell| {
                let outcome = run_cell(cell, root, options.force);
                on_cell(&outcome);
                outcome
            })
            .collect()
    });
    let metrics: Vec<Option<RunMetrics>> = outcomes.iter().map(|o| o.metrics.clone()).collect();
    let table = AggregateTable::aggregate(spec, &metrics)?;

    let dir = sweep_dir(root, spec.experiment);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(AGGREGATE_FILE), table.to_csv())?;
    let manifest = SweepManifest {
        spec: spec.clone(),
        aggregate: AGGREGATE_FILE.into(),
        cells: outcomes
            .iter()
            .map(|o| SweepManifestCell {
                condition: o.cell.condition,
                axis_value: o.cell.axis_value,
                seed: o.cell.seed,
                config_hash: o.cell.config.config_hash(),
                run_dir: relative(root, &o.dir),
                status: o.status.clone(),
            })
            .collect(),
    };
    layout::write_atomic(&dir.join(SWEEP_MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(SweepResult {
        spec: spec.clone(),
        outcomes,
        table,
        dir,
    })
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned()
}

fn run_cell(cell: Cell, root: &Path, force: bool) -> CellOutcome {
    let dir = run_dir(root, &cell.config);
    if !force {
        if let Some(metrics) = read_completed_run(&dir, &cell.config) {
            return CellOutcome {
                cell,
                dir,
                status: CellStatus::Reused,
                metrics: Some(metrics),
            };
        }
    }
    let trained = panic::catch_unwind(AssertUnwindSafe(|| -> Result<RunMetrics, ExperimentError> {
        let output = train_run(&cell.config)?;
        write_run(&dir, &output, None)?;
        Ok(output.metrics)
    }));
    let (status, metrics) = match trained {
        Ok(Ok(m)) => (CellStatus::Trained, Some(m)),
        Ok(Err(e)) => (CellStatus::Failed { error: e.to_string() }, None),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (CellStatus::Failed { error: msg }, None)
        }
    };
    CellOutcome { cell, dir, status, metrics }
}

/// Recomputes a sweep's table from the metrics persisted in `root`, flagging
/// cells without a completed run as missing.
pub fn reaggregate(spec: &SweepSpec, root: &Path) -> Result<AggregateTable, ExperimentError> {
    spec.validate()?;
    let metrics: Vec<Option<RunMetrics>> = spec
        .cells()
        .iter()
        .map(|c| read_completed_run(&run_dir(root, &c.config), &c.config))
        .collect();
    AggregateTable::aggregate(spec, &metrics)
}

fn check_experiment(spec: &SweepSpec, id: u8) -> Result<(), ExperimentError> {
    if spec.experiment != id {
        return Err(ExperimentError::InvalidSpec(format!(
            "expected an experiment {id} spec, got experiment {}",
            spec.experiment
        )));
    }
    Ok(())
}

/// Channel capacity sweep; aggregates final validation reward.
pub fn run_experiment_1(
    spec: &SweepSpec,
    root: &Path,
    options: SweepOptions,
    on_cell: &(dyn Fn(&CellOutcome) + Sync),
) -> Result<SweepResult, ExperimentError> {
    check_experiment(spec, 1)?;
    run_sweep(spec, root, options, on_cell)
}

/// Task difficulty sweep; aggregates final train and validation reward.
pub fn run_experiment_2(
    spec: &SweepSpec,
    root: &Path,
    options: SweepOptions,
    on_cell: &(dyn Fn(&CellOutcome) + Sync),
) -> Result<SweepResult, ExperimentError> {
    check_experiment(spec, 2)?;
    run_sweep(spec, root, options, on_cell)
}

/// Teacher competence sweep; aggregates final validation reward.
pub fn run_experiment_3(
    spec: &SweepSpec,
    root: &Path,
    options: SweepOptions,
    on_cell: &(dyn Fn(&CellOutcome) + Sync),
) -> Result<SweepResult, ExperimentError> {
    check_experiment(spec, 3)?;
    run_sweep(spec, root, options, on_cell)
}
