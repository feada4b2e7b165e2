use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::Channel;
use crate::env::Context;

/// One demonstration: a context and the action chosen in it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Demonstration {
    /// Index of `context` in the context enumeration.
    pub context_id: usize,
    pub context: Context,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Utterance {
    /// Exactly `K` token ids in `[0, V)`.
    Language(Vec<usize>),
    /// `k` pairwise-distinct demonstrations, in the order they were sent.
    Demonstrations(Vec<Demonstration>),
}

impl Utterance {
    pub fn kind(&self) -> UtteranceKind {
        match self {
            Utterance::Language(_) => UtteranceKind::Language,
            Utterance::Demonstrations(_) => UtteranceKind::Demonstration,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Utterance::Language(t) => t.len(),
            Utterance::Demonstrations(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtteranceKind {
    Language,
    Demonstration,
}

impl UtteranceKind {
    pub fn of_channel(channel: Channel) -> Self {
        if channel.is_demo() {
            UtteranceKind::Demonstration
        } else {
            UtteranceKind::Language
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DemoRecord {
    pub context_id: usize,
    /// Object ids (`color * n + shape`) of the context, ascending.
    pub objects: [usize; 3],
    pub action: usize,
}

/// One line of `utterances.jsonl`.
///
/// ```json
/// {"world_state_id":12,"split":"val","kind":"language","tokens":[3,3,17]}
/// {"world_state_id":4,"split":"train","kind":"demonstration","demos":[{"context_id":7,"objects":[0,1,5],"action":2}]}
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub world_state_id: usize,
    pub split: Split,
    pub kind: UtteranceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demos: Option<Vec<DemoRecord>>,
}

impl UtteranceRecord {
    pub fn new(world_state_id: usize, split: Split, utterance: &Utterance, n: usize) -> Self {
        match utterance {
            Utterance::Language(tokens) => Self {
                world_state_id,
                split,
                kind: UtteranceKind::Language,
                tokens: Some(tokens.clone()),
                demos: None,
            },
            Utterance::Demonstrations(demos) => Self {
                world_state_id,
                split,
                kind: UtteranceKind::Demonstration,
                tokens: None,
                demos: Some(
                    demos
                        .iter()
                        .map(|d| DemoRecord {
                            context_id: d.context_id,
                            objects: d.context.object_ids(n),
                            action: d.action,
                        })
                        .collect(),
                ),
            },
        }
    }

    /// Identity key used when counting distinct utterances: the token
    /// sequence, or the ordered `(context_id, action)` sequence.
    pub fn key(&self) -> Vec<usize> {
        match (&self.tokens, &self.demos) {
            (Some(t), _) => t.clone(),
            (None, Some(d)) => d.iter().flat_map(|r| [r.context_id, r.action]).collect(),
            (None, None) => Vec::new(),
        }
    }
}

pub fn write_jsonl<W: Write>(records: &[UtteranceRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<UtteranceRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
