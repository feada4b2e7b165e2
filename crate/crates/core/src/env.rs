//! The signaling-bandits environment.
//!
//! Objects have a color and a shape, each drawn from `n` values. A world
//! state assigns every color value one reward from an evenly spaced ladder on
//! `[-6, 6]` and every shape value one from `[-3, 3]`; an object's reward is
//! the sum of its color and shape rewards. A game pairs a world state with a
//! context of three distinct objects.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const MIN_VALUES: usize = 2;
pub const MAX_VALUES: usize = 6;
pub const CONTEXT_SIZE: usize = 3;
pub const COLOR_REWARD_MAX: f64 = 6.0;
pub const SHAPE_REWARD_MAX: f64 = 3.0;

pub const COLOR_NAMES: [&str; MAX_VALUES] = ["red", "blue", "green", "purple", "orange", "yellow"];
pub const SHAPE_NAMES: [&str; MAX_VALUES] = ["circle", "square", "triangle", "pentagon", "hexagon", "star"];

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("feature value count {0} outside supported range {MIN_VALUES}..={MAX_VALUES}")]
    UnsupportedValues(usize),
    #[error("action {0} out of range for a {CONTEXT_SIZE}-object context")]
    ActionOutOfRange(usize),
    #[error("train fraction {fraction} of {total} states leaves an empty split")]
    EmptySplit { fraction: f64, total: usize },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("context objects must be pairwise distinct and in range")]
    InvalidContext,
}

/// `n` values per feature and their reward ladders.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpace {
    n: usize,
    color_rewards: Vec<f64>,
    shape_rewards: Vec<f64>,
}

fn ladder(n: usize, max: f64) -> Vec<f64> {
    (0..n).map(|i| -max + 2.0 * max * i as f64 / (n - 1) as f64).collect()
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

impl FeatureSpace {
    pub fn new(n: usize) -> Result<Self, EnvError> {
        if !(MIN_VALUES..=MAX_VALUES).contains(&n) {
            return Err(EnvError::UnsupportedValues(n));
        }
        Ok(Self {
            n,
            color_rewards: ladder(n, COLOR_REWARD_MAX),
            shape_rewards: ladder(n, SHAPE_REWARD_MAX),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn color_rewards(&self) -> &[f64] {
        &self.color_rewards
    }

    pub fn shape_rewards(&self) -> &[f64] {
        &self.shape_rewards
    }

    pub fn num_objects(&self) -> usize {
        self.n * self.n
    }

    /// Length of the boolean encoding φ and of the reward vector `w`.
    pub fn feature_len(&self) -> usize {
        2 * self.n
    }

    pub fn num_world_states(&self) -> usize {
        factorial(self.n).pow(2)
    }

    pub fn num_contexts(&self) -> usize {
        binomial(self.num_objects(), CONTEXT_SIZE)
    }

    pub fn object(&self, id: usize) -> ObjectSpec {
        ObjectSpec {
            color: id / self.n,
            shape: id % self.n,
        }
    }

    /// φ(object): one-hot color block followed by one-hot shape block.
    pub fn phi(&self, object: ObjectSpec) -> Vec<f64> {
        let mut v = vec![0.0; 2 * self.n];
        v[object.color] = 1.0;
        v[self.n + object.shape] = 1.0;
        v
    }

    /// The `id`-th world state in enumeration order, without enumerating.
    pub fn world_state(&self, id: usize) -> WorldState {
        assert!(id < self.num_world_states(), "world state id {id} out of range");
        let per = factorial(self.n);
        let color = unrank_permutation(self.n, id / per);
        let shape = unrank_permutation(self.n, id % per);
        WorldState::from_assignments(self, id, &color, &shape)
    }
}

/// Lexicographic permutation unranking (factorial number system).
fn unrank_permutation(n: usize, mut rank: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let f = factorial(i);
        out.push(pool.remove(rank / f));
        rank %= f;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectSpec {
    pub color: usize,
    pub shape: usize,
}

impl ObjectSpec {
    pub fn id(self, n: usize) -> usize {
        self.color * n + self.shape
    }
}

/// Reward assignment to every feature value.
///
/// `color_assignment[c]` is the index into the space's color ladder given to
/// color `c` (likewise for shapes); `reward_vector` is `w`, colors first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldState {
    id: usize,
    n: u8,
    color_assignment: [u8; MAX_VALUES],
    shape_assignment: [u8; MAX_VALUES],
    reward_vector: [f64; 2 * MAX_VALUES],
}

impl WorldState {
    fn from_assignments(space: &FeatureSpace, id: usize, color: &[usize], shape: &[usize]) -> Self {
        let n = space.n;
        let mut ws = WorldState {
            id,
            n: n as u8,
            color_assignment: [0; MAX_VALUES],
            shape_assignment: [0; MAX_VALUES],
            reward_vector: [0.0; 2 * MAX_VALUES],
        };
        for i in 0..n {
            ws.color_assignment[i] = color[i] as u8;
            ws.shape_assignment[i] = shape[i] as u8;
            ws.reward_vector[i] = space.color_rewards[color[i]];
            ws.reward_vector[n + i] = space.shape_rewards[shape[i]];
        }
        ws
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn color_assignment(&self) -> &[u8] {
        &self.color_assignment[..self.n()]
    }

    pub fn shape_assignment(&self) -> &[u8] {
        &self.shape_assignment[..self.n()]
    }

    pub fn reward_vector(&self) -> &[f64] {
        &self.reward_vector[..2 * self.n()]
    }

    /// `wᵀφ(object)`.
    pub fn object_reward(&self, object: ObjectSpec) -> f64 {
        self.reward_vector[object.color] + self.reward_vector[self.n() + object.shape]
    }
}

/// Three distinct objects in ascending `(color, shape)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Context {
    objects: [ObjectSpec; CONTEXT_SIZE],
}

impl Context {
    pub fn new(space: &FeatureSpace, mut objects: [ObjectSpec; CONTEXT_SIZE]) -> Result<Self, EnvError> {
        objects.sort();
        let distinct = objects.windows(2).all(|w| w[0] != w[1]);
        let in_range = objects.iter().all(|o| o.color < space.n && o.shape < space.n);
        if !distinct || !in_range {
            return Err(EnvError::InvalidContext);
        }
        Ok(Self { objects })
    }

    pub fn objects(&self) -> &[ObjectSpec; CONTEXT_SIZE] {
        &self.objects
    }

    pub fn object_ids(&self, n: usize) -> [usize; CONTEXT_SIZE] {
        self.objects.map(|o| o.id(n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Game {
    pub context: Context,
    pub world: WorldState,
}

impl Game {
    pub fn action_rewards(&self) -> [f64; CONTEXT_SIZE] {
        self.context.objects.map(|o| self.world.object_reward(o))
    }
}

/// All `n!·n!` world states, color permutation outer, both lexicographic.
pub fn enumerate_world_states(space: &FeatureSpace) -> Vec<WorldState> {
    (0..space.num_world_states()).map(|id| space.world_state(id)).collect()
}

/// All `C(n², 3)` contexts in lexicographic order of object ids.
pub fn enumerate_contexts(space: &FeatureSpace) -> Vec<Context> {
    let m = space.num_objects();
    let mut out = Vec::with_capacity(space.num_contexts());
    for a in 0..m {
        for b in a + 1..m {
            for c in b + 1..m {
                out.push(Context {
                    objects: [space.object(a), space.object(b), space.object(c)],
                });
            }
        }
    }
    out
}

pub fn reward(game: &Game, action: usize) -> Result<f64, EnvError> {
    game.context
        .objects
        .get(action)
        .map(|&o| game.world.object_reward(o))
        .ok_or(EnvError::ActionOutOfRange(action))
}

/// `(raw - mean) / (max - mean)` over the three action rewards: 1 for the
/// best action, 0 in expectation under a uniform choice. Degenerate contexts
/// (all rewards equal) score 1.
pub fn normalize(raw: f64, action_rewards: &[f64; CONTEXT_SIZE]) -> f64 {
    let mean = action_rewards.iter().sum::<f64>() / CONTEXT_SIZE as f64;
    let max = action_rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == mean {
        return 1.0;
    }
    (raw - mean) / (max - mean)
}

pub fn normalized_reward(raw: f64, game: &Game) -> f64 {
    normalize(raw, &game.action_rewards())
}

/// Seeded shuffle, then the first `round(fraction · len)` items (half
/// rounds up) go to training and the rest to validation.
pub fn split_world_states<T: Clone>(all: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), EnvError> {
    if all.is_empty() {
        return Err(EnvError::Empty("world state list"));
    }
    let total = all.len();
    let train_len = (fraction * total as f64 + 0.5).floor();
    if !(fraction > 0.0 && fraction < 1.0) || train_len < 1.0 || train_len >= total as f64 {
        return Err(EnvError::EmptySplit { fraction, total });
    }
    let mut shuffled = all.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = shuffled.split_off(train_len as usize);
    Ok((shuffled, val))
}

/// World state uniform over `state_ids`, context uniform over `contexts`.
pub fn sample_game<R: Rng + ?Sized>(
    space: &FeatureSpace,
    state_ids: &[usize],
    contexts: &[Context],
    rng: &mut R,
) -> Result<Game, EnvError> {
    if state_ids.is_empty() {
        return Err(EnvError::Empty("world state list"));
    }
    if contexts.is_empty() {
        return Err(EnvError::Empty("context list"));
    }
    let world = space.world_state(state_ids[rng.gen_range(0..state_ids.len())]);
    let context = contexts[rng.gen_range(0..contexts.len())];
    Ok(Game { context, world })
}

/// Feature space plus its context enumeration, shared read-only by a run.
#[derive(Clone, Debug)]
pub struct Environment {
    pub space: FeatureSpace,
    pub contexts: Vec<Context>,
}

impl Environment {
    pub fn new(n: usize) -> Result<Self, EnvError> {
        let space = FeatureSpace::new(n)?;
        let contexts = enumerate_contexts(&space);
        Ok(Self { space, contexts })
    }

    pub fn n(&self) -> usize {
        self.space.n
    }

    /// φ of every object, row `id`: `[n² x 2n]` row-major.
    pub fn phi_table(&self) -> Vec<f64> {
        (0..self.space.num_objects())
            .flat_map(|id| self.space.phi(self.space.object(id)))
            .collect()
    }
}

/// CSV with columns `id, <color names...>, <shape names...>`, one reward per
/// feature value.
pub fn write_world_states_csv<W: Write>(space: &FeatureSpace, out: W) -> csv::Result<()> {
    let n = space.n;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend(COLOR_NAMES[..n].iter().map(|s| s.to_string()));
    header.extend(SHAPE_NAMES[..n].iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for id in 0..space.num_world_states() {
        let ws = space.world_state(id);
        let mut row = vec![id.to_string()];
        row.extend(ws.reward_vector().iter().map(|r| r.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV with columns `id, object0, object1, object2` (object ids
/// `color * n + shape`) followed by each object's color and shape names.
pub fn write_contexts_csv<W: Write>(space: &FeatureSpace, out: W) -> csv::Result<()> {
    let n = space.n;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "id", "object0", "object1", "object2", "color0", "shape0", "color1", "shape1", "color2", "shape2",
    ])?;
    for (id, ctx) in enumerate_contexts(space).iter().enumerate() {
        let mut row = vec![id.to_string()];
        row.extend(ctx.object_ids(n).iter().map(|o| o.to_string()));
        for o in ctx.objects() {
            row.push(COLOR_NAMES[o.color].to_string());
            row.push(SHAPE_NAMES[o.shape].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
