use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use teachsim::agents::Channel;
use teachsim::experiments::{Axis, SweepSpec};
use teachsim::training::TrainConfig;

/// A config file: `[train]` maps onto the training config, `[sweep]` onto the
/// sweep grid. Every key is optional.
///
/// ```toml
/// [train]
/// n = 4
/// channel = "demo_pedagogical"
///
/// [sweep]
/// seeds = [0, 1, 2]
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfigFile {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepOverrides,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOverrides {
    pub seeds: Option<Vec<u64>>,
    pub conditions: Option<Vec<Channel>>,
    pub language_capacities: Option<Vec<usize>>,
    pub demo_capacities: Option<Vec<usize>>,
    pub n_values: Option<Vec<usize>>,
    pub train_fractions: Option<Vec<f64>>,
    pub language_capacity: Option<usize>,
    pub demo_capacity: Option<usize>,
}

/// Config text plus `--set` overrides, merged and parsed.
pub struct LoadedConfig {
    pub file: CliConfigFile,
    /// The merged config, as TOML, for the run manifest.
    pub source: String,
}

/// Aliases accepted by `--set`.
fn canonical_key(key: &str) -> String {
    match key {
        "K" | "k" => "train.capacity".into(),
        k if k.contains('.') => k.into(),
        k => format!("train.{k}"),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.into()),
    }
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config file {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("invalid config file {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let Some((key, value)) = o.split_once('=') else {
            bail!("--set expects key=value, got `{o}`");
        };
        let key = canonical_key(key.trim());
        let (section, field) = key.split_once('.').expect("canonical keys are dotted");
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let Some(section_table) = entry.as_table_mut() else {
            bail!("`{section}` is not a table");
        };
        section_table.insert(field.to_string(), parse_value(value.trim()));
    }
    let source = toml::to_string(&table)?;
    let file: CliConfigFile = toml::from_str(&source).map_err(|e| anyhow::anyhow!("invalid config: {}", e.message()))?;
    Ok(LoadedConfig { file, source })
}

impl CliConfigFile {
    /// The experiment's default grid with this file's overrides applied.
    pub fn sweep_spec(&self, experiment: u8) -> Result<SweepSpec> {
        let mut spec = SweepSpec::for_experiment(experiment)?;
        spec.base = self.train.clone();
        let s = &self.sweep;
        if let Some(seeds) = &s.seeds {
            spec.seeds = seeds.clone();
        }
        if let Some(c) = &s.conditions {
            spec.conditions = c.clone();
        }
        if let Some(k) = s.language_capacity {
            spec.language_capacity = k;
        }
        if let Some(k) = s.demo_capacity {
            spec.demo_capacity = k;
        }
        let unused = |name: &str| anyhow::anyhow!("sweep.{name} does not apply to experiment {experiment}");
        match &mut spec.axis {
            Axis::Capacity { language, demo } => {
                if let Some(v) = &s.language_capacities {
                    *language = v.clone();
                }
                if let Some(v) = &s.demo_capacities {
                    *demo = v.clone();
                }
                if s.n_values.is_some() {
                    return Err(unused("n_values"));
                }
                if s.train_fractions.is_some() {
                    return Err(unused("train_fractions"));
                }
            }
            Axis::N { values } => {
                if let Some(v) = &s.n_values {
                    *values = v.clone();
                }
                if s.train_fractions.is_some() {
                    return Err(unused("train_fractions"));
                }
            }
            Axis::TrainFraction { values } => {
                if let Some(v) = &s.train_fractions {
                    *values = v.clone();
                }
                if s.n_values.is_some() {
                    return Err(unused("n_values"));
                }
            }
        }
        if !matches!(spec.axis, Axis::Capacity { .. }) && (s.language_capacities.is_some() || s.demo_capacities.is_some()) {
            return Err(unused("language_capacities/demo_capacities"));
        }
        spec.validate()?;
        Ok(spec)
    }
}
