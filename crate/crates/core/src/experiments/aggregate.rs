use super::{ExperimentError, SweepSpec};
use crate::agents::{Channel, Split};
use crate::training::{mean_sem, RunMetrics};

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub condition: Channel,
    pub axis_value: f64,
    pub split: Split,
    /// Final normalized reward per seed, in the table's seed order; `None`
    /// marks a missing or failed run.
    pub values: Vec<Option<f64>>,
}

impl AggregateRow {
    fn present(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// Mean over the runs that completed.
    pub fn mean(&self) -> Option<f64> {
        let v = self.present();
        (!v.is_empty()).then(|| mean_sem(&v).0)
    }

    /// Sample standard deviation over √(completed runs).
    pub fn sem(&self) -> Option<f64> {
        let v = self.present();
        (!v.is_empty()).then(|| mean_sem(&v).1)
    }

    pub fn missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

/// Final rewards of a sweep, one row per (condition, axis value, split).
///
/// CSV layout: `condition,<axis>,split,mean,sem,n_seeds,missing,seed_<s>...`
/// where `<axis>` is `capacity`, `n` or `train_fraction` and empty fields
/// mark missing runs.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateTable {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AggregateRow>,
}

const AXES: [&str; 3] = ["capacity", "n", "train_fraction"];
const FIXED: usize = 7;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AggregateTable {
    /// Builds the table from per-cell metrics given in [`SweepSpec::cells`]
    /// order.
    pub fn aggregate(spec: &SweepSpec, metrics: &[Option<RunMetrics>]) -> Result<Self, ExperimentError> {
        let cells = spec.cells();
        if cells.len() != metrics.len() {
            return Err(ExperimentError::InvalidSpec(format!(
                "{} metrics for {} cells",
                metrics.len(),
                cells.len()
            )));
        }
        let seeds = spec.seeds.len();
        let mut rows = Vec::new();
        for (group, chunk) in cells.chunks(seeds).zip(metrics.chunks(seeds)) {
            for split in spec.splits() {
                rows.push(AggregateRow {
                    condition: group[0].condition,
                    axis_value: group[0].axis_value,
                    split,
                    values: chunk.iter().map(|m| m.as_ref().and_then(|m| m.final_reward(split))).collect(),
                });
            }
        }
        Ok(Self {
            axis: spec.axis.name().into(),
            seeds: spec.seeds.clone(),
            rows,
        })
    }

    pub fn row(&self, condition: Channel, axis_value: f64, split: Split) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.axis_value == axis_value && r.split == split)
    }

    /// Rows of one condition and split, in axis order.
    pub fn series(&self, condition: Channel, split: Split) -> Vec<&AggregateRow> {
        self.rows.iter().filter(|r| r.condition == condition && r.split == split).collect()
    }

    pub fn conditions(&self) -> Vec<Channel> {
        let mut out: Vec<Channel> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.condition) {
                out.push(r.condition);
            }
        }
        out
    }

    pub fn splits(&self) -> Vec<Split> {
        let mut out: Vec<Split> = self.rows.iter().map(|r| r.split).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["condition", &self.axis, "split", "mean", "sem", "n_seeds", "missing"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for r in &self.rows {
            let mut fields = vec![
                r.condition.name().to_string(),
                r.axis_value.to_string(),
                r.split.name().to_string(),
                opt(r.mean()),
                opt(r.sem()),
                self.seeds.len().to_string(),
                r.missing().to_string(),
            ];
            fields.extend(r.values.iter().map(|v| opt(*v)));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses a table written by [`AggregateTable::to_csv`], checking that
    /// the summary columns agree with the per-seed values.
    pub fn from_csv(text: &str) -> Result<Self, ExperimentError> {
        let err = |m: String| ExperimentError::Format(m);
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| err(e.to_string()))?.clone();
        let h: Vec<&str> = header.iter().collect();
        if h.len() <= FIXED
            || h[0] != "condition"
            || !AXES.contains(&h[1])
            || h[2..FIXED] != ["split", "mean", "sem", "n_seeds", "missing"]
        {
            return Err(err(format!("unexpected header `{}`", h.join(","))));
        }
        let seeds = h[FIXED..]
            .iter()
            .map(|c| c.strip_prefix("seed_").and_then(|s| s.parse().ok()).ok_or_else(|| err(format!("bad seed column `{c}`"))))
            .collect::<Result<Vec<u64>, _>>()?;
        let num = |s: &str, what: &str| -> Result<Option<f64>, ExperimentError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| err(format!("bad {what} `{s}`")))
            }
        };
        let mut rows = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| err(e.to_string()))?;
            let f: Vec<&str> = record.iter().collect();
            let row = AggregateRow {
                condition: f[0].parse().map_err(|e: String| err(e))?,
                axis_value: num(f[1], "axis value")?.ok_or_else(|| err("missing axis value".into()))?,
                split: f[2].parse().map_err(|e: String| err(e))?,
                values: f[FIXED..].iter().map(|s| num(s, "seed value")).collect::<Result<_, _>>()?,
            };
            let consistent = num(f[3], "mean")?.map(f64::to_bits) == row.mean().map(f64::to_bits)
                && num(f[4], "sem")?.map(f64::to_bits) == row.sem().map(f64::to_bits)
                && f[5] == seeds.len().to_string()
                && f[6] == row.missing().to_string();
            if !consistent {
                return Err(err(format!("row {} summary disagrees with its seed values", line + 1)));
            }
            rows.push(row);
        }
        Ok(Self {
            axis: h[1].to_string(),
            seeds,
            rows,
        })
    }
}
