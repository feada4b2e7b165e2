use std::collections::BTreeMap;

use super::ExperimentError;
use crate::agents::{Split, UtteranceKind, UtteranceRecord};
use crate::env::FeatureSpace;

/// Distinct utterances per split of one run's log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UniqueCounts {
    pub train_unique: usize,
    pub val_unique: usize,
    /// Validation utterances never produced on the training split.
    pub val_novel: usize,
    /// Distinct utterances over both splits.
    pub total_unique: usize,
}

pub const UNIQUE_HEADER: [&str; 4] = ["train_unique", "val_unique", "val_novel", "total_unique"];

impl UniqueCounts {
    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{}\n",
            UNIQUE_HEADER.join(","),
            self.train_unique,
            self.val_unique,
            self.val_novel,
            self.total_unique
        )
    }

    pub fn from_csv(text: &str) -> Result<Self, ExperimentError> {
        let mut lines = text.lines();
        if lines.next() != Some(UNIQUE_HEADER.join(",").as_str()) {
            return Err(ExperimentError::Format("unexpected unique-utterance header".into()));
        }
        let values: Vec<usize> = lines
            .next()
            .unwrap_or("")
            .split(',')
            .map(|s| s.parse().map_err(|_| ExperimentError::Format(format!("bad count `{s}`"))))
            .collect::<Result<_, _>>()?;
        match values[..] {
            [train_unique, val_unique, val_novel, total_unique] => Ok(Self {
                train_unique,
                val_unique,
                val_novel,
                total_unique,
            }),
            _ => Err(ExperimentError::Format("expected four counts".into())),
        }
    }
}

/// Utterance identity: kind plus the token sequence or the ordered
/// `(context, action)` sequence.
fn identity(r: &UtteranceRecord) -> (UtteranceKind, Vec<usize>) {
    (r.kind, r.key())
}

/// Counts distinct utterances per split by sorting identities.
pub fn analyze_unique_utterances(records: &[UtteranceRecord]) -> Result<UniqueCounts, ExperimentError> {
    if records.is_empty() {
        return Err(ExperimentError::EmptyLog);
    }
    let sorted = |split: Split| {
        let mut keys: Vec<_> = records.iter().filter(|r| r.split == split).map(identity).collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    };
    let train = sorted(Split::Train);
    let val = sorted(Split::Val);
    let val_novel = val.iter().filter(|k| train.binary_search(k).is_err()).count();
    Ok(UniqueCounts {
        train_unique: train.len(),
        val_unique: val.len(),
        val_novel,
        total_unique: train.len() + val_novel,
    })
}

/// Mean reward of every color and shape value over the world states that
/// elicited one message.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticsRow {
    /// Token sequence; `None` for the all-message aggregate.
    pub message: Option<Vec<usize>>,
    pub n_states: usize,
    pub color_means: Vec<f64>,
    pub shape_means: Vec<f64>,
    /// The two highest-mean colors and shapes, ties to the lower index.
    pub top_colors: [usize; 2],
    pub top_shapes: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MessageSemantics {
    pub n: usize,
    /// Messages by descending frequency (ties by token order), then the
    /// aggregate row.
    pub rows: Vec<SemanticsRow>,
}

fn top_two(means: &[f64]) -> [usize; 2] {
    let mut idx: Vec<usize> = (0..means.len()).collect();
    idx.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    [idx[0], idx[1.min(idx.len() - 1)]]
}

fn row(message: Option<Vec<usize>>, states: &[&[f64]], n: usize) -> SemanticsRow {
    let mut sums = vec![0.0; 2 * n];
    for w in states {
        for (s, v) in sums.iter_mut().zip(w.iter()) {
            *s += v;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / states.len() as f64).collect();
    let (color_means, shape_means) = (means[..n].to_vec(), means[n..].to_vec());
    SemanticsRow {
        message,
        n_states: states.len(),
        top_colors: top_two(&color_means),
        top_shapes: top_two(&shape_means),
        color_means,
        shape_means,
    }
}

/// Per-message mean reward of each feature value over every record in
/// `records` (one record per eliciting world state), plus the aggregate over
/// the whole log. Demonstration logs are rejected.
pub fn analyze_message_semantics(records: &[UtteranceRecord], space: &FeatureSpace) -> Result<MessageSemantics, ExperimentError> {
    if records.is_empty() {
        return Err(ExperimentError::EmptyLog);
    }
    if let Some(r) = records.iter().find(|r| r.kind != UtteranceKind::Language) {
        return Err(ExperimentError::ChannelMismatch {
            expected: UtteranceKind::Language,
            found: r.kind,
        });
    }
    let n = space.n();
    let worlds: Vec<_> = records
        .iter()
        .map(|r| {
            if r.world_state_id >= space.num_world_states() {
                return Err(ExperimentError::Format(format!("world state {} out of range", r.world_state_id)));
            }
            Ok(space.world_state(r.world_state_id))
        })
        .collect::<Result<_, _>>()?;
    let mut groups: BTreeMap<Vec<usize>, Vec<&[f64]>> = BTreeMap::new();
    for (r, w) in records.iter().zip(&worlds) {
        groups.entry(r.key()).or_default().push(w.reward_vector());
    }
    let mut messages: Vec<(Vec<usize>, Vec<&[f64]>)> = groups.into_iter().collect();
    messages.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(&b.0)));
    let mut rows: Vec<SemanticsRow> = messages.iter().map(|(m, states)| row(Some(m.clone()), states, n)).collect();
    let all: Vec<&[f64]> = worlds.iter().map(|w| w.reward_vector()).collect();
    rows.push(row(None, &all, n));
    Ok(MessageSemantics { n, rows })
}

impl MessageSemantics {
    /// `message,n_states,color_0..,shape_0..,top_colors,top_shapes`; the
    /// message is its space-separated tokens or `all`.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["message".to_string(), "n_states".to_string()];
        header.extend((0..self.n).map(|i| format!("color_{i}")));
        header.extend((0..self.n).map(|i| format!("shape_{i}")));
        header.push("top_colors".into());
        header.push("top_shapes".into());
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.rows {
            let message = match &r.message {
                Some(m) => m.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
                None => "all".into(),
            };
            let mut fields = vec![message, r.n_states.to_string()];
            fields.extend(r.color_means.iter().chain(&r.shape_means).map(f64::to_string));
            fields.push(format!("{} {}", r.top_colors[0], r.top_colors[1]));
            fields.push(format!("{} {}", r.top_shapes[0], r.top_shapes[1]));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}
