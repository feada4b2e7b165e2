//! Joint optimization of teacher and student on expected reward, plus
//! evaluation in normalized reward.
//!
//! Each update samples a batch of training games, runs one batched exchange
//! with straight-through Gumbel-Softmax sampling, and minimizes
//! `-mean(J_T + J_ST)` where both terms are exact expectations over the three
//! actions of the game's context.

mod adam;
mod eval;

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    context_logits, write_jsonl, AgentError, AgentSpec, Agents, Channel, Decode, EnvTables, Split, UtteranceRecord,
    DEFAULT_VOCAB,
};
use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::env::{sample_game, split_world_states, EnvError, Environment, Game, MAX_VALUES, MIN_VALUES};

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use eval::{evaluate, evaluate_policy, evaluate_teacher, mean_sem, EvalSet, Evaluation};

/// Independent RNG streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Data = 1,
    Channel = 2,
    EvalTrain = 3,
    EvalVal = 4,
    EvalSelect = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("non-finite loss {loss} at update {update} (teacher reward {teacher}, student reward {student})")]
    NonFiniteLoss {
        update: usize,
        loss: f64,
        teacher: f64,
        student: f64,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Agent(AgentError::Autodiff(e))
    }
}

/// Everything that determines a run. Optional fields resolve to
/// channel- or size-dependent defaults in [`TrainConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n: usize,
    pub channel: Channel,
    /// Message length `K` or demo count `k`; defaults to 10 tokens or 2 demos.
    pub capacity: Option<usize>,
    pub vocab: usize,
    pub tau: f64,
    pub batch_size: usize,
    pub updates: usize,
    /// Adam step size. Defaults to 1e-4: at 1e-3 the speaker settles on a
    /// handful of messages before the student has learned to read any.
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Contexts per evaluated world state; defaults to `min(1000, C(n², 3))`.
    pub eval_contexts: Option<usize>,
    /// Cap on evaluated world states per split.
    pub eval_states: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 4,
            channel: Channel::Language,
            capacity: None,
            vocab: DEFAULT_VOCAB,
            tau: 1.0,
            batch_size: 32,
            updates: 4000,
            learning_rate: 1e-4,
            train_fraction: 0.8,
            seed: 0,
            eval_every: 200,
            eval_contexts: None,
            eval_states: 512,
        }
    }
}

pub const DEFAULT_LANGUAGE_CAPACITY: usize = 10;
pub const DEFAULT_DEMO_CAPACITY: usize = 2;
pub const MAX_EVAL_CONTEXTS: usize = 1000;

impl TrainConfig {
    pub fn capacity(&self) -> usize {
        self.capacity.unwrap_or(if self.channel.is_demo() {
            DEFAULT_DEMO_CAPACITY
        } else {
            DEFAULT_LANGUAGE_CAPACITY
        })
    }

    pub fn eval_contexts(&self) -> usize {
        self.eval_contexts
            .unwrap_or_else(|| MAX_EVAL_CONTEXTS.min(crate::env::binomial(self.n * self.n, 3)))
    }

    /// Copy with every optional field filled in.
    pub fn resolved(&self) -> Self {
        Self {
            capacity: Some(self.capacity()),
            eval_contexts: Some(self.eval_contexts()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, reason: &str| {
            Err(TrainError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if !(MIN_VALUES..=MAX_VALUES).contains(&self.n) {
            return bad("n", &format!("must lie in {MIN_VALUES}..={MAX_VALUES}, got {}", self.n));
        }
        if self.capacity() == 0 {
            return bad("capacity", "must be at least 1");
        }
        if self.channel.is_demo() && self.capacity() > crate::env::binomial(self.n * self.n, 3) {
            return bad("capacity", "exceeds the demonstration pool size");
        }
        if self.vocab == 0 {
            return bad("vocab", "must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be positive and finite");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.updates == 0 {
            return bad("updates", "must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be non-negative and finite");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction", "must lie strictly between 0 and 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1");
        }
        if self.eval_contexts() == 0 {
            return bad("eval_contexts", "must be at least 1");
        }
        if self.eval_states == 0 {
            return bad("eval_states", "must be at least 1");
        }
        Ok(())
    }

    pub fn agent_spec(&self) -> AgentSpec {
        AgentSpec {
            n: self.n,
            channel: self.channel,
            capacity: self.capacity(),
            vocab: self.vocab,
        }
    }

    /// Canonical JSON of the resolved config with the seed zeroed.
    pub fn canonical_json(&self) -> String {
        let mut c = self.resolved();
        c.seed = 0;
        serde_json::to_string(&c).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over [`TrainConfig::canonical_json`].
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// `<config hash>-s<seed>`.
    pub fn run_name(&self) -> String {
        format!("{}-s{}", self.config_hash(), self.seed)
    }
}

/// Loss and its two reward terms for one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub teacher_reward: f64,
    pub student_reward: f64,
}

/// `Σ_a softmax(logits)[a] · rewards[a]` per row: `[B]`.
pub fn expected_reward(tape: &mut Tape, logits: Var, rewards: Var) -> Result<Var, AutodiffError> {
    let p = tape.softmax(logits);
    tape.dot_rows(p, rewards)
}

/// `-mean(J_T + J_ST)` plus the two batch-mean terms as nodes.
pub fn objective(tape: &mut Tape, teacher_logits: Var, student_logits: Var, rewards: Var) -> Result<(Var, Var, Var), AutodiffError> {
    let j_t = expected_reward(tape, teacher_logits, rewards)?;
    let j_s = expected_reward(tape, student_logits, rewards)?;
    let total = tape.add(j_t, j_s)?;
    let mean = tape.mean(total);
    let loss = tape.scale(mean, -1.0);
    let j_t = tape.mean(j_t);
    let j_s = tape.mean(j_s);
    Ok((loss, j_t, j_s))
}

/// Builds the loss graph for a batch of games without stepping.
pub fn batch_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    agents: &Agents,
    bound: &crate::autodiff::Bound,
    tables: &EnvTables,
    games: &[Game],
    tau: f64,
    rng: &mut R,
) -> Result<(Var, Var, Var), TrainError> {
    let worlds: Vec<_> = games.iter().map(|g| g.world).collect();
    let contexts: Vec<_> = games.iter().map(|g| g.context).collect();
    let ex = agents.exchange(tape, bound, tables, &worlds, Decode::Sample { tau }, rng)?;
    let n = tables.n();
    let t_logits = context_logits(tape, ex.teacher_scores, &contexts, n)?;
    let s_logits = context_logits(tape, ex.student_scores, &contexts, n)?;
    let rewards: Vec<f64> = games.iter().flat_map(|g| g.action_rewards()).collect();
    let rewards = tape.constant(Tensor::matrix(games.len(), 3, rewards));
    Ok(objective(tape, t_logits, s_logits, rewards)?)
}

/// One forward pass, one backward pass and one Adam update over all
/// teacher and student parameters.
#[allow(clippy::too_many_arguments)]
pub fn training_step<R: Rng + ?Sized>(
    agents: &mut Agents,
    adam: &mut AdamState,
    tables: &EnvTables,
    games: &[Game],
    tau: f64,
    update: usize,
    rng: &mut R,
) -> Result<StepStats, TrainError> {
    let mut tape = Tape::new();
    let bound = agents.params.bind(&mut tape);
    let (loss, j_t, j_s) = batch_loss(&mut tape, agents, &bound, tables, games, tau, rng)?;
    let stats = StepStats {
        loss: tape.value(loss).item(),
        teacher_reward: tape.value(j_t).item(),
        student_reward: tape.value(j_s).item(),
    };
    if !stats.loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            update,
            loss: stats.loss,
            teacher: stats.teacher_reward,
            student: stats.student_reward,
        });
    }
    tape.backward(loss)?;
    let grads = agents.params.gradients(&tape, &bound);
    adam.step(&mut agents.params, &grads);
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub update: usize,
    pub split: Split,
    pub mean_normalized_reward: f64,
    pub sem: f64,
    pub n_games: usize,
}

pub const METRICS_HEADER: [&str; 5] = ["update", "split", "mean_normalized_reward", "sem", "n_games"];

/// Evaluation history of one run, ordered by update then split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<EvalRecord>,
}

impl RunMetrics {
    /// Mean normalized reward of the last evaluation on `split`.
    pub fn final_reward(&self, split: Split) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.split == split)
            .map(|r| r.mean_normalized_reward)
    }

    /// CSV text; floats use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = METRICS_HEADER.join(",");
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.update,
                r.split.name(),
                r.mean_normalized_reward,
                r.sem,
                r.n_games
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| TrainError::Format(e.to_string()))?;
        if header.iter().ne(METRICS_HEADER) {
            return Err(TrainError::Format(format!(
                "metrics header must be {}, found {}",
                METRICS_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| TrainError::Format(e.to_string()))?;
            let field = |i: usize| row.get(i).unwrap_or_default();
            let parse_err = |what: &str| TrainError::Format(format!("bad {what} in metrics row {:?}", row));
            records.push(EvalRecord {
                update: field(0).parse().map_err(|_| parse_err("update"))?,
                split: field(1).parse().map_err(|_| parse_err("split"))?,
                mean_normalized_reward: field(2).parse().map_err(|_| parse_err("mean"))?,
                sem: field(3).parse().map_err(|_| parse_err("sem"))?,
                n_games: field(4).parse().map_err(|_| parse_err("n_games"))?,
            });
        }
        Ok(Self { records })
    }
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: TrainConfig,
    pub metrics: RunMetrics,
    /// Final-evaluation utterances for both splits.
    pub utterances: Vec<UtteranceRecord>,
    pub agents: Agents,
    pub games_processed: usize,
    pub train_states: usize,
    pub val_states: usize,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const UTTERANCES_FILE: &str = "utterances.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

impl RunOutput {
    /// Writes `metrics.csv`, `utterances.jsonl` and `checkpoint.json`.
    pub fn write_to(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), self.metrics.to_csv())?;
        let file = fs::File::create(dir.join(UTTERANCES_FILE))?;
        write_jsonl(&self.utterances, BufWriter::new(file))?;
        self.agents.params.save(&dir.join(CHECKPOINT_FILE))?;
        Ok(())
    }
}

/// Evaluation state fixed for the whole run.
struct Evaluator {
    train: EvalSet,
    val: EvalSet,
    seed: u64,
}

impl Evaluator {
    fn run(&self, agents: &Agents, tables: &EnvTables, split: Split) -> Result<Evaluation, TrainError> {
        // The same stream every time, so random-demo baselines are scored on
        // identical draws at every evaluation point.
        let (set, stream) = match split {
            Split::Train => (&self.train, Stream::EvalTrain),
            Split::Val => (&self.val, Stream::EvalVal),
        };
        evaluate(agents, tables, set, &mut stream_rng(self.seed, stream))
    }
}

pub fn train_run(config: &TrainConfig) -> Result<RunOutput, TrainError> {
    train_run_with_progress(config, |_| {})
}

/// [`train_run`], reporting every evaluation record as it is produced.
pub fn train_run_with_progress(config: &TrainConfig, mut progress: impl FnMut(&EvalRecord)) -> Result<RunOutput, TrainError> {
    config.validate()?;
    let config = config.resolved();
    let tables = EnvTables::new(Environment::new(config.n)?);
    let space = &tables.env.space;
    let ids: Vec<usize> = (0..space.num_world_states()).collect();
    let (train_ids, val_ids) = split_world_states(&ids, config.train_fraction, config.seed)?;

    let mut agents = Agents::new(config.agent_spec(), &tables, &mut stream_rng(config.seed, Stream::Init))?;
    let mut adam = AdamState::new(&agents.params, config.learning_rate);
    let mut data_rng = stream_rng(config.seed, Stream::Data);
    let mut channel_rng = stream_rng(config.seed, Stream::Channel);

    let mut select_rng = stream_rng(config.seed, Stream::EvalSelect);
    let per_state = config.eval_contexts();
    let evaluator = Evaluator {
        train: EvalSet::sample(space, &train_ids, config.eval_states, per_state, &mut select_rng),
        val: EvalSet::sample(space, &val_ids, config.eval_states, per_state, &mut select_rng),
        seed: config.seed,
    };

    let mut metrics = RunMetrics::default();
    let mut record = |agents: &Agents, update: usize, metrics: &mut RunMetrics| -> Result<[Evaluation; 2], TrainError> {
        let mut out = Vec::with_capacity(2);
        for split in [Split::Train, Split::Val] {
            let e = evaluator.run(agents, &tables, split)?;
            let r = EvalRecord {
                update,
                split,
                mean_normalized_reward: e.mean,
                sem: e.sem,
                n_games: e.n_games,
            };
            progress(&r);
            metrics.records.push(r);
            out.push(e);
        }
        Ok(out.try_into().expect("two splits"))
    };

    record(&agents, 0, &mut metrics)?;
    let mut games = Vec::with_capacity(config.batch_size);
    let mut final_evals = None;
    for update in 1..=config.updates {
        games.clear();
        for _ in 0..config.batch_size {
            games.push(sample_game(space, &train_ids, tables.contexts(), &mut data_rng)?);
        }
        training_step(&mut agents, &mut adam, &tables, &games, config.tau, update, &mut channel_rng)?;
        if update % config.eval_every == 0 || update == config.updates {
            let evals = record(&agents, update, &mut metrics)?;
            if update == config.updates {
                final_evals = Some(evals);
            }
        }
    }

    let [train_eval, val_eval] = final_evals.expect("final update is evaluated");
    let n = config.n;
    let mut utterances = Vec::with_capacity(train_eval.utterances.len() + val_eval.utterances.len());
    for (split, set, eval) in [
        (Split::Train, &evaluator.train, &train_eval),
        (Split::Val, &evaluator.val, &val_eval),
    ] {
        for (world, u) in set.states.iter().zip(&eval.utterances) {
            utterances.push(UtteranceRecord::new(world.id(), split, u, n));
        }
    }
    Ok(RunOutput {
        games_processed: config.updates * config.batch_size,
        train_states: train_ids.len(),
        val_states: val_ids.len(),
        config,
        metrics,
        utterances,
        agents,
    })
}

/// Loads a run's parameters back into freshly built agents.
pub fn load_agents(config: &TrainConfig, checkpoint: &Path) -> Result<(EnvTables, Agents), TrainError> {
    config.validate()?;
    let tables = EnvTables::new(Environment::new(config.n)?);
    let mut agents = Agents::new(config.agent_spec(), &tables, &mut stream_rng(config.seed, Stream::Init))?;
    agents.params.load(checkpoint)?;
    Ok((tables, agents))
}

/// Snapshot of parameter values, for comparisons in tests and tools.
pub fn param_values(params: &ParamStore) -> Vec<Vec<f64>> {
    params.values().iter().map(|t| t.data().to_vec()).collect()
}
