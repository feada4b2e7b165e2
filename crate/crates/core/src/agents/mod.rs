//! Teacher and student networks for the language and demonstration channels.
//!
//! The teacher scores objects with `f_T(w)ᵀ g_T(o)` and speaks from a GRU
//! whose initial state is a projection of `f_T(w)`. In the language channel
//! each step emits one of `V` tokens; in the demonstration channel each step
//! picks one entry of the demo pool `D_w` by `h_T(d)ᵀ o_i`. The student reads
//! the utterance with its own GRU, projects the final state to `f_S(u)` and
//! scores objects with `f_S(u)ᵀ g_S(o)`.
//!
//! All forward passes are batched: a batch of world states produces one row
//! per world state in every tensor.

mod demo;
mod utterance;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    argmax, AutodiffError, Bound, GruCellParams, Linear, Mlp, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::env::{Context, Environment, WorldState, CONTEXT_SIZE};

pub use demo::{pair_row, random_demos, random_pool_indices, DemoEncoder, DemoPool, PairIndex};
pub use utterance::{
    read_jsonl, write_jsonl, DemoRecord, Demonstration, Split, Utterance, UtteranceKind, UtteranceRecord,
};

/// Output width of every MLP (`f`, `g`, `h`) and of `f_S(u)`.
pub const MLP_WIDTH: usize = 64;
pub const EMBED_SIZE: usize = 64;
pub const LANGUAGE_HIDDEN: usize = 100;
pub const DEMO_HIDDEN: usize = 64;
pub const DEFAULT_VOCAB: usize = 80;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("student reads {expected:?} utterances, got {found:?}")]
    ChannelMismatch {
        expected: UtteranceKind,
        found: UtteranceKind,
    },
    #[error("cannot send {k} distinct demonstrations from a pool of {pool}")]
    CapacityExceedsPool { k: usize, pool: usize },
    #[error("channel capacity must be at least 1")]
    ZeroCapacity,
    #[error("vocabulary must hold at least one token")]
    EmptyVocabulary,
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("demonstrations in one utterance must be distinct")]
    DuplicateDemonstration,
    #[error("world state has n = {found}, agents were built for n = {expected}")]
    SpaceMismatch { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Language,
    DemoPedagogical,
    DemoRandom,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Language, Channel::DemoPedagogical, Channel::DemoRandom];

    pub fn is_demo(self) -> bool {
        !matches!(self, Channel::Language)
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Language => "language",
            Channel::DemoPedagogical => "demo_pedagogical",
            Channel::DemoRandom => "demo_random",
        }
    }
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown channel `{s}`"))
    }
}

/// How the teacher turns per-step logits into a token or demo choice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decode {
    /// Straight-through Gumbel-Softmax at temperature `tau`.
    Sample { tau: f64 },
    /// Argmax, lowest index on ties; not differentiable.
    Greedy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub n: usize,
    pub channel: Channel,
    /// Message length `K` (language) or demo count `k`.
    pub capacity: usize,
    pub vocab: usize,
}

/// Environment constants shared by every forward pass of a run.
#[derive(Clone, Debug)]
pub struct EnvTables {
    pub env: Environment,
    /// φ of every object, `[n² x 2n]`.
    pub phi: Tensor,
    pub pairs: PairIndex,
}

impl EnvTables {
    pub fn new(env: Environment) -> Self {
        let rows = env.space.num_objects();
        let phi = Tensor::matrix(rows, env.space.feature_len(), env.phi_table());
        let pairs = PairIndex::new(&env);
        Self { env, phi, pairs }
    }

    pub fn n(&self) -> usize {
        self.env.n()
    }

    pub fn contexts(&self) -> &[Context] {
        &self.env.contexts
    }
}

#[derive(Clone, Debug)]
struct Speaker {
    init: Linear,
    gru: GruCellParams,
    start: ParamId,
    out: SpeakerOut,
}

impl Speaker {
    /// `W f_T(w) + b`.
    fn initial_state(&self, tape: &mut Tape, bound: &Bound, f_t: Var) -> Result<Var, AutodiffError> {
        self.init.forward(tape, bound, f_t)
    }
}

#[derive(Clone, Debug)]
enum SpeakerOut {
    Language { head: Linear, embed: ParamId },
    Demo { encoder: DemoEncoder },
}

#[derive(Clone, Debug)]
pub struct Teacher {
    /// `f_T`: world state (raw reward vector) to `MLP_WIDTH`.
    pub world: Mlp,
    /// `g_T`: φ(object) to `MLP_WIDTH`.
    pub objects: Mlp,
    speaker: Option<Speaker>,
}

#[derive(Clone, Debug)]
enum Reader {
    Language { embed: ParamId },
    Demo { encoder: DemoEncoder },
}

#[derive(Clone, Debug)]
pub struct Student {
    /// `g_S`: φ(object) to `MLP_WIDTH`; also feeds `h_S` in demo channels.
    pub objects: Mlp,
    gru: GruCellParams,
    readout: Linear,
    reader: Reader,
}

/// Result of one batched teacher→student exchange.
#[derive(Debug)]
pub struct Exchange {
    /// `f_T(w)ᵀ g_T(o)` for every object: `[B x n²]`.
    pub teacher_scores: Var,
    /// `f_S(u)ᵀ g_S(o)` for every object: `[B x n²]`.
    pub student_scores: Var,
    pub utterances: Vec<Utterance>,
    /// Transmitted one-hots per step: `[B x V]` or `[B x |pool|]`.
    pub messages: Vec<Var>,
    /// Logits each message was drawn from (masked for demos); empty for
    /// random demonstrations.
    pub message_logits: Vec<Var>,
    /// Demo pools, one per world state; empty for the language channel.
    pub pools: Vec<DemoPool>,
}

/// A teacher-student pair and the parameters they own.
#[derive(Clone, Debug)]
pub struct Agents {
    pub spec: AgentSpec,
    pub params: ParamStore,
    pub teacher: Teacher,
    pub student: Student,
}

fn one_hot_argmax_rows(values: &Tensor) -> Vec<usize> {
    let (rows, _) = values.rows_cols();
    (0..rows).map(|r| argmax(values.row(r))).collect()
}

fn select<R: Rng + ?Sized>(tape: &mut Tape, logits: Var, decode: Decode, rng: &mut R) -> Result<Var, AgentError> {
    Ok(match decode {
        Decode::Sample { tau } => tape.gumbel_softmax_st(logits, tau, rng)?,
        Decode::Greedy => {
            let value = tape.value(logits);
            let width = value.rows_cols().1;
            let picks = one_hot_argmax_rows(value);
            tape.constant(Tensor::one_hot_rows(&picks, width))
        }
    })
}

/// Gathers `[B x 3]` per-action logits from per-object scores.
pub fn context_logits(tape: &mut Tape, scores: Var, contexts: &[Context], n: usize) -> Result<Var, AutodiffError> {
    let idx: Vec<usize> = contexts.iter().flat_map(|c| c.object_ids(n)).collect();
    tape.gather_cols(scores, &idx)
}

impl Agents {
    pub fn new<R: Rng + ?Sized>(spec: AgentSpec, tables: &EnvTables, rng: &mut R) -> Result<Self, AgentError> {
        if spec.capacity == 0 {
            return Err(AgentError::ZeroCapacity);
        }
        if spec.n != tables.n() {
            return Err(AgentError::SpaceMismatch {
                expected: tables.n(),
                found: spec.n,
            });
        }
        if spec.channel.is_demo() && spec.capacity > tables.contexts().len() {
            return Err(AgentError::CapacityExceedsPool {
                k: spec.capacity,
                pool: tables.contexts().len(),
            });
        }
        if spec.channel == Channel::Language && spec.vocab == 0 {
            return Err(AgentError::EmptyVocabulary);
        }
        let feat = 2 * spec.n;
        let mut params = ParamStore::new();
        let p = &mut params;

        let world = Mlp::new(p, "teacher.world", feat, MLP_WIDTH, MLP_WIDTH, rng);
        let objects = Mlp::new(p, "teacher.objects", feat, MLP_WIDTH, MLP_WIDTH, rng);
        let speaker = match spec.channel {
            Channel::Language => {
                let h = LANGUAGE_HIDDEN;
                Some(Speaker {
                    init: Linear::new(p, "teacher.init", MLP_WIDTH, h, rng),
                    gru: GruCellParams::new(p, "teacher.gru", EMBED_SIZE, h, rng),
                    start: p.uniform("teacher.start", &[1, EMBED_SIZE], EMBED_SIZE, rng),
                    out: SpeakerOut::Language {
                        head: Linear::new(p, "teacher.head", h, spec.vocab, rng),
                        // A one-hot row has fan-in 1, so token embeddings start in U(-1, 1).
                        embed: p.uniform("teacher.embed", &[spec.vocab, EMBED_SIZE], 1, rng),
                    },
                })
            }
            Channel::DemoPedagogical => {
                let h = DEMO_HIDDEN;
                Some(Speaker {
                    init: Linear::new(p, "teacher.init", MLP_WIDTH, h, rng),
                    gru: GruCellParams::new(p, "teacher.gru", MLP_WIDTH, h, rng),
                    start: p.uniform("teacher.start", &[1, MLP_WIDTH], MLP_WIDTH, rng),
                    out: SpeakerOut::Demo {
                        encoder: DemoEncoder::new(p, "teacher.demo", MLP_WIDTH, MLP_WIDTH, MLP_WIDTH, rng),
                    },
                })
            }
            Channel::DemoRandom => None,
        };
        let teacher = Teacher {
            world,
            objects,
            speaker,
        };

        let s_objects = Mlp::new(p, "student.objects", feat, MLP_WIDTH, MLP_WIDTH, rng);
        let (hidden, input, reader) = match spec.channel {
            Channel::Language => (
                LANGUAGE_HIDDEN,
                EMBED_SIZE,
                Reader::Language {
                    embed: p.uniform("student.embed", &[spec.vocab, EMBED_SIZE], 1, rng),
                },
            ),
            Channel::DemoPedagogical | Channel::DemoRandom => (
                DEMO_HIDDEN,
                MLP_WIDTH,
                Reader::Demo {
                    encoder: DemoEncoder::new(p, "student.demo", MLP_WIDTH, MLP_WIDTH, MLP_WIDTH, rng),
                },
            ),
        };
        let student = Student {
            objects: s_objects,
            gru: GruCellParams::new(p, "student.gru", input, hidden, rng),
            readout: Linear::new(p, "student.readout", hidden, MLP_WIDTH, rng),
            reader,
        };
        Ok(Self {
            spec,
            params,
            teacher,
            student,
        })
    }

    pub fn channel(&self) -> Channel {
        self.spec.channel
    }

    fn check_worlds(&self, worlds: &[WorldState]) -> Result<(), AgentError> {
        match worlds.iter().find(|w| w.n() != self.spec.n) {
            Some(w) => Err(AgentError::SpaceMismatch {
                expected: self.spec.n,
                found: w.n(),
            }),
            None => Ok(()),
        }
    }

    fn world_input(&self, tape: &mut Tape, worlds: &[WorldState]) -> Var {
        let feat = 2 * self.spec.n;
        let data = worlds.iter().flat_map(|w| w.reward_vector().iter().copied()).collect();
        tape.constant(Tensor::matrix(worlds.len(), feat, data))
    }

    /// `f_T(w)` for a batch: `[B x 64]`.
    pub fn teacher_world(&self, tape: &mut Tape, bound: &Bound, worlds: &[WorldState]) -> Result<Var, AgentError> {
        self.check_worlds(worlds)?;
        let w = self.world_input(tape, worlds);
        Ok(self.teacher.world.forward(tape, bound, w)?)
    }

    /// Object encodings of every object id: `[n² x 64]`.
    pub fn teacher_objects(&self, tape: &mut Tape, bound: &Bound, tables: &EnvTables) -> Result<Var, AgentError> {
        let phi = tape.constant(tables.phi.clone());
        Ok(self.teacher.objects.forward(tape, bound, phi)?)
    }

    pub fn student_objects(&self, tape: &mut Tape, bound: &Bound, tables: &EnvTables) -> Result<Var, AgentError> {
        let phi = tape.constant(tables.phi.clone());
        Ok(self.student.objects.forward(tape, bound, phi)?)
    }

    /// Runs the full teacher→student exchange for a batch of world states.
    ///
    /// Demo pools are rebuilt from the teacher scores of this very pass.
    pub fn exchange<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tables: &EnvTables,
        worlds: &[WorldState],
        decode: Decode,
        rng: &mut R,
    ) -> Result<Exchange, AgentError> {
        let f_t = self.teacher_world(tape, bound, worlds)?;
        let g_t = self.teacher_objects(tape, bound, tables)?;
        let teacher_scores = tape.matmul_nt(f_t, g_t)?;
        let g_s = self.student_objects(tape, bound, tables)?;

        let (f_s, utterances, messages, message_logits, pools) = match self.spec.channel {
            Channel::Language => {
                let speech = self.speak_language(tape, bound, f_t, decode, rng)?;
                let f_s = self.read_language(tape, bound, &speech.messages)?;
                (f_s, speech.utterances, speech.messages, speech.logits, Vec::new())
            }
            Channel::DemoPedagogical | Channel::DemoRandom => {
                let scores = tape.value(teacher_scores).clone();
                let pools: Vec<DemoPool> = worlds
                    .iter()
                    .enumerate()
                    .map(|(b, w)| DemoPool::from_object_scores(w.id(), tables.contexts(), tables.n(), scores.row(b)))
                    .collect();
                let speech = if self.spec.channel == Channel::DemoRandom {
                    self.speak_random(tape, &pools, rng)?
                } else {
                    self.speak_demos(tape, bound, tables, f_t, g_t, &pools, self.spec.capacity, decode, rng)?
                };
                let f_s = self.read_demos(tape, bound, tables, g_s, &speech.messages, &pools)?;
                (f_s, speech.utterances, speech.messages, speech.logits, pools)
            }
        };
        let student_scores = tape.matmul_nt(f_s, g_s)?;
        Ok(Exchange {
            teacher_scores,
            student_scores,
            utterances,
            messages,
            message_logits,
            pools,
        })
    }

    fn speaker(&self) -> &Speaker {
        self.teacher
            .speaker
            .as_ref()
            .expect("channel with a learned speaker")
    }

    fn speak_language<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        f_t: Var,
        decode: Decode,
        rng: &mut R,
    ) -> Result<Speech, AgentError> {
        let speaker = self.speaker();
        let SpeakerOut::Language { head, embed } = &speaker.out else {
            unreachable!("language speaker");
        };
        let batch = tape.value(f_t).rows_cols().0;
        let mut h = speaker.initial_state(tape, bound, f_t)?;
        let mut x = tape.embedding_lookup(bound[speaker.start], &vec![0; batch])?;
        let mut speech = Speech::default();
        let mut tokens = vec![Vec::with_capacity(self.spec.capacity); batch];
        for step in 0..self.spec.capacity {
            h = speaker.gru.step(tape, bound, x, h)?;
            let logits = head.forward(tape, bound, h)?;
            let y = select(tape, logits, decode, rng)?;
            for (b, t) in one_hot_argmax_rows(tape.value(y)).into_iter().enumerate() {
                tokens[b].push(t);
            }
            if step + 1 < self.spec.capacity {
                x = tape.matmul(y, bound[*embed])?;
            }
            speech.messages.push(y);
            speech.logits.push(logits);
        }
        speech.utterances = tokens.into_iter().map(Utterance::Language).collect();
        Ok(speech)
    }

    #[allow(clippy::too_many_arguments)]
    fn speak_demos<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tables: &EnvTables,
        f_t: Var,
        g_t: Var,
        pools: &[DemoPool],
        k: usize,
        decode: Decode,
        rng: &mut R,
    ) -> Result<Speech, AgentError> {
        let speaker = self.speaker();
        let SpeakerOut::Demo { encoder } = &speaker.out else {
            unreachable!("demo speaker");
        };
        let batch = pools.len();
        let pool_len = pools.first().map_or(0, DemoPool::len);
        if k > pool_len {
            return Err(AgentError::CapacityExceedsPool { k, pool: pool_len });
        }
        let rows: Vec<usize> = pools.iter().flat_map(DemoPool::table_rows).collect();
        let hidden = encoder.hidden_all(tape, bound, g_t, &tables.pairs)?;
        let mut h = speaker.initial_state(tape, bound, f_t)?;
        let mut x = tape.embedding_lookup(bound[speaker.start], &vec![0; batch])?;
        let mut mask = vec![false; batch * pool_len];
        let mut picks = vec![Vec::with_capacity(k); batch];
        let mut speech = Speech::default();
        for step in 0..k {
            h = speaker.gru.step(tape, bound, x, h)?;
            let mut logits = encoder.scores(tape, bound, h, hidden, &rows)?;
            if step > 0 {
                logits = tape.masked_fill(logits, &mask)?;
            }
            let y = select(tape, logits, decode, rng)?;
            for (b, j) in one_hot_argmax_rows(tape.value(y)).into_iter().enumerate() {
                mask[b * pool_len + j] = true;
                picks[b].push(j);
            }
            if step + 1 < k {
                x = encoder.mix(tape, bound, y, hidden, &rows)?;
            }
            speech.messages.push(y);
            speech.logits.push(logits);
        }
        speech.utterances = picks
            .into_iter()
            .zip(pools)
            .map(|(p, pool)| Utterance::Demonstrations(p.into_iter().map(|j| pool.demos[j]).collect()))
            .collect();
        Ok(speech)
    }

    fn speak_random<R: Rng + ?Sized>(&self, tape: &mut Tape, pools: &[DemoPool], rng: &mut R) -> Result<Speech, AgentError> {
        let k = self.spec.capacity;
        let pool_len = pools.first().map_or(0, DemoPool::len);
        let picks: Vec<Vec<usize>> = pools
            .iter()
            .map(|p| random_pool_indices(p.len(), k, rng))
            .collect::<Result<_, _>>()?;
        let mut speech = Speech::default();
        for step in 0..k {
            let col: Vec<usize> = picks.iter().map(|p| p[step]).collect();
            speech
                .messages
                .push(tape.constant(Tensor::one_hot_rows(&col, pool_len)));
        }
        speech.utterances = picks
            .into_iter()
            .zip(pools)
            .map(|(p, pool)| Utterance::Demonstrations(p.into_iter().map(|j| pool.demos[j]).collect()))
            .collect();
        Ok(speech)
    }

    /// Student encoding `f_S(u)` of language messages given as one-hot rows.
    fn read_language(&self, tape: &mut Tape, bound: &Bound, messages: &[Var]) -> Result<Var, AgentError> {
        let Reader::Language { embed } = &self.student.reader else {
            unreachable!("language reader");
        };
        let batch = tape.value(messages[0]).rows_cols().0;
        let mut h = tape.constant(Tensor::zeros(&[batch, self.student.gru.hidden_size]));
        for &y in messages {
            let x = tape.matmul(y, bound[*embed])?;
            h = self.student.gru.step(tape, bound, x, h)?;
        }
        Ok(self.student.readout.forward(tape, bound, h)?)
    }

    fn read_demos(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tables: &EnvTables,
        g_s: Var,
        messages: &[Var],
        pools: &[DemoPool],
    ) -> Result<Var, AgentError> {
        let Reader::Demo { encoder } = &self.student.reader else {
            unreachable!("demo reader");
        };
        let rows: Vec<usize> = pools.iter().flat_map(DemoPool::table_rows).collect();
        let hidden = encoder.hidden_all(tape, bound, g_s, &tables.pairs)?;
        let mut h = tape.constant(Tensor::zeros(&[pools.len(), self.student.gru.hidden_size]));
        for &y in messages {
            let x = encoder.mix(tape, bound, y, hidden, &rows)?;
            h = self.student.gru.step(tape, bound, x, h)?;
        }
        Ok(self.student.readout.forward(tape, bound, h)?)
    }

    /// `T_game(· | c, w)`: softmax over the three context objects.
    pub fn teacher_game_policy(&self, tables: &EnvTables, world: &WorldState, context: &Context) -> Result<[f64; 3], AgentError> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let f_t = self.teacher_world(&mut tape, &bound, std::slice::from_ref(world))?;
        let g_t = self.teacher_objects(&mut tape, &bound, tables)?;
        let scores = tape.matmul_nt(f_t, g_t)?;
        let logits = context_logits(&mut tape, scores, std::slice::from_ref(context), tables.n())?;
        let p = tape.softmax(logits);
        Ok(to_probs(tape.value(p).data()))
    }

    /// `D_w` from the teacher's current argmax choices.
    pub fn build_demo_pool(&self, tables: &EnvTables, world: &WorldState) -> Result<DemoPool, AgentError> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let f_t = self.teacher_world(&mut tape, &bound, std::slice::from_ref(world))?;
        let g_t = self.teacher_objects(&mut tape, &bound, tables)?;
        let scores = tape.matmul_nt(f_t, g_t)?;
        Ok(DemoPool::from_object_scores(
            world.id(),
            tables.contexts(),
            tables.n(),
            tape.value(scores).data(),
        ))
    }

    /// One language utterance of exactly `K` tokens.
    pub fn generate_language<R: Rng + ?Sized>(
        &self,
        world: &WorldState,
        decode: Decode,
        rng: &mut R,
    ) -> Result<Utterance, AgentError> {
        if self.spec.channel != Channel::Language {
            return Err(AgentError::ChannelMismatch {
                expected: UtteranceKind::of_channel(self.spec.channel),
                found: UtteranceKind::Language,
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let f_t = self.teacher_world(&mut tape, &bound, std::slice::from_ref(world))?;
        let speech = self.speak_language(&mut tape, &bound, f_t, decode, rng)?;
        Ok(speech.utterances.into_iter().next().expect("one world state"))
    }

    /// `k` distinct demonstrations chosen from `pool` by the teacher's
    /// demo RNN (pedagogical channel only).
    pub fn generate_demos<R: Rng + ?Sized>(
        &self,
        tables: &EnvTables,
        world: &WorldState,
        pool: &DemoPool,
        k: usize,
        decode: Decode,
        rng: &mut R,
    ) -> Result<Utterance, AgentError> {
        if self.spec.channel != Channel::DemoPedagogical {
            return Err(AgentError::ChannelMismatch {
                expected: UtteranceKind::of_channel(self.spec.channel),
                found: UtteranceKind::Demonstration,
            });
        }
        if k > pool.len() {
            return Err(AgentError::CapacityExceedsPool { k, pool: pool.len() });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let f_t = self.teacher_world(&mut tape, &bound, std::slice::from_ref(world))?;
        let g_t = self.teacher_objects(&mut tape, &bound, tables)?;
        let speech = self.speak_demos(
            &mut tape,
            &bound,
            tables,
            f_t,
            g_t,
            std::slice::from_ref(pool),
            k,
            decode,
            rng,
        )?;
        Ok(speech.utterances.into_iter().next().expect("one world state"))
    }

    /// Teacher-side demo encoding `h_T(d)`; `None` without a demo speaker.
    pub fn encode_teacher_demo(&self, tables: &EnvTables, demo: &Demonstration) -> Result<Option<Vec<f64>>, AgentError> {
        let Some(Speaker {
            out: SpeakerOut::Demo { encoder },
            ..
        }) = &self.teacher.speaker
        else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let g = self.teacher_objects(&mut tape, &bound, tables)?;
        let e = encoder.encode(&mut tape, &bound, g, demo.context.object_ids(tables.n()), demo.action)?;
        Ok(Some(tape.value(e).data().to_vec()))
    }

    /// Student-side demo encoding `h_S(d)`, built on `g_S`.
    pub fn encode_student_demo(&self, tables: &EnvTables, demo: &Demonstration) -> Result<Option<Vec<f64>>, AgentError> {
        let Reader::Demo { encoder } = &self.student.reader else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let g = self.student_objects(&mut tape, &bound, tables)?;
        let e = encoder.encode(&mut tape, &bound, g, demo.context.object_ids(tables.n()), demo.action)?;
        Ok(Some(tape.value(e).data().to_vec()))
    }

    /// `f_S(u)` for a standalone utterance: `[1 x 64]`.
    pub fn student_utterance_encoding(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tables: &EnvTables,
        utterance: &Utterance,
    ) -> Result<Var, AgentError> {
        let expected = UtteranceKind::of_channel(self.spec.channel);
        if utterance.kind() != expected {
            return Err(AgentError::ChannelMismatch {
                expected,
                found: utterance.kind(),
            });
        }
        if utterance.is_empty() {
            return Err(AgentError::ZeroCapacity);
        }
        match utterance {
            Utterance::Language(tokens) => {
                if let Some(&token) = tokens.iter().find(|&&t| t >= self.spec.vocab) {
                    return Err(AgentError::TokenOutOfRange {
                        token,
                        vocab: self.spec.vocab,
                    });
                }
                let messages: Vec<Var> = tokens
                    .iter()
                    .map(|&t| tape.constant(Tensor::one_hot_rows(&[t], self.spec.vocab)))
                    .collect();
                self.read_language(tape, bound, &messages)
            }
            Utterance::Demonstrations(demos) => {
                let mut seen = std::collections::HashSet::new();
                if !demos.iter().all(|d| seen.insert((d.context_id, d.action))) {
                    return Err(AgentError::DuplicateDemonstration);
                }
                let Reader::Demo { encoder } = &self.student.reader else {
                    unreachable!("demo reader");
                };
                let g_s = self.student_objects(tape, bound, tables)?;
                let table = encoder.encode_all(tape, bound, g_s, &tables.pairs)?;
                let mut h = tape.constant(Tensor::zeros(&[1, self.student.gru.hidden_size]));
                for d in demos {
                    let x = tape.embedding_lookup(table, &[pair_row(d.context_id, d.action)])?;
                    h = self.student.gru.step(tape, bound, x, h)?;
                }
                Ok(self.student.readout.forward(tape, bound, h)?)
            }
        }
    }

    /// `S(· | u, c)`: softmax over the three context objects.
    pub fn student_policy(&self, tables: &EnvTables, utterance: &Utterance, context: &Context) -> Result<[f64; 3], AgentError> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let f_s = self.student_utterance_encoding(&mut tape, &bound, tables, utterance)?;
        let g_s = self.student_objects(&mut tape, &bound, tables)?;
        let scores = tape.matmul_nt(f_s, g_s)?;
        let logits = context_logits(&mut tape, scores, std::slice::from_ref(context), tables.n())?;
        let p = tape.softmax(logits);
        Ok(to_probs(tape.value(p).data()))
    }
}

fn to_probs(data: &[f64]) -> [f64; CONTEXT_SIZE] {
    [data[0], data[1], data[2]]
}

#[derive(Default)]
struct Speech {
    messages: Vec<Var>,
    logits: Vec<Var>,
    utterances: Vec<Utterance>,
}
