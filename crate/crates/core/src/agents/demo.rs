use rand::Rng;

use super::{AgentError, Demonstration, Utterance};
use crate::autodiff::{AutodiffError, Bound, Linear, ParamStore, Tape, Tensor, Var};
use crate::env::{Context, Environment, CONTEXT_SIZE};

/// `(context, action)` pairs for every enumerated context, flattened so
/// that pair `3 * context_id + action` is row `3 * context_id + action` of
/// a demo-encoding table.
#[derive(Clone, Debug)]
pub struct PairIndex {
    /// `slot_objects[s][p]`: object id in slot `s` of pair `p`'s context.
    pub slot_objects: [Vec<usize>; CONTEXT_SIZE],
    pub actions: Vec<usize>,
}

impl PairIndex {
    pub fn new(env: &Environment) -> Self {
        let n = env.n();
        let pairs = CONTEXT_SIZE * env.contexts.len();
        let mut slot_objects: [Vec<usize>; CONTEXT_SIZE] = Default::default();
        for s in &mut slot_objects {
            s.reserve(pairs);
        }
        let mut actions = Vec::with_capacity(pairs);
        for ctx in &env.contexts {
            let ids = ctx.object_ids(n);
            for a in 0..CONTEXT_SIZE {
                for (slot, &id) in ids.iter().enumerate() {
                    slot_objects[slot].push(id);
                }
                actions.push(a);
            }
        }
        Self { slot_objects, actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

pub fn pair_row(context_id: usize, action: usize) -> usize {
    CONTEXT_SIZE * context_id + action
}

/// Demonstration MLP: the three object encodings of the context, in
/// canonical order, concatenated with a one-hot of the chosen action, then
/// two affine layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct DemoEncoder {
    pub hidden: Linear,
    pub out: Linear,
    object_width: usize,
}

impl DemoEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        object_width: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let input = CONTEXT_SIZE * object_width + CONTEXT_SIZE;
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            out: Linear::new(store, &format!("{name}.1"), hidden, output, rng),
            object_width,
        }
    }

    /// Encodes one demonstration; `objects` holds the object encodings
    /// (`[n² x D]`, row = object id). Returns `[1 x out]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        objects: Var,
        object_ids: [usize; CONTEXT_SIZE],
        action: usize,
    ) -> Result<Var, AutodiffError> {
        let mut parts = Vec::with_capacity(CONTEXT_SIZE + 1);
        for id in object_ids {
            parts.push(tape.embedding_lookup(objects, &[id])?);
        }
        let mut one_hot = vec![0.0; CONTEXT_SIZE];
        one_hot[action] = 1.0;
        parts.push(tape.constant(Tensor::matrix(1, CONTEXT_SIZE, one_hot)));
        let x = tape.concat(&parts)?;
        let h = self.hidden.forward(tape, bound, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, bound, h)
    }

    /// Hidden-layer activations (after the ReLU) of every `(context,
    /// action)` pair: `[3C x hidden]`, row `p` for pair `p`.
    ///
    /// The first layer is split into per-slot blocks so each object is
    /// projected once and pairs only sum precomputed rows.
    pub fn hidden_all(&self, tape: &mut Tape, bound: &Bound, objects: Var, pairs: &PairIndex) -> Result<Var, AutodiffError> {
        let w = bound[self.hidden.weight];
        let d = self.object_width;
        let mut tables = Vec::with_capacity(CONTEXT_SIZE + 2);
        for slot in 0..CONTEXT_SIZE {
            let block = tape.slice_cols(w, slot * d, (slot + 1) * d)?;
            tables.push(tape.matmul_nt(objects, block)?);
        }
        let action_block = tape.slice_cols(w, CONTEXT_SIZE * d, CONTEXT_SIZE * d + CONTEXT_SIZE)?;
        // Row a of action_blockᵀ is the first-layer response to one-hot(a).
        let eye = tape.constant(Tensor::one_hot_rows(&[0, 1, 2], CONTEXT_SIZE));
        tables.push(tape.matmul_nt(eye, action_block)?);
        let bias = bound[self.hidden.bias];
        let width = tape.shape(bias)[0];
        tables.push(tape.reshape(bias, vec![1, width])?);
        let zeros = vec![0; pairs.len()];
        let [s0, s1, s2] = &pairs.slot_objects;
        let pre = tape.sum_lookups(&tables, &[s0, s1, s2, &pairs.actions, &zeros])?;
        Ok(tape.relu(pre))
    }

    /// Encodes every `(context, action)` pair at once; row `p` of the
    /// `[3C x out]` result equals `encode` of pair `p`.
    pub fn encode_all(&self, tape: &mut Tape, bound: &Bound, objects: Var, pairs: &PairIndex) -> Result<Var, AutodiffError> {
        let h = self.hidden_all(tape, bound, objects, pairs)?;
        self.out.forward(tape, bound, h)
    }

    /// Scores `<query[b], encode(pair)>` for the pairs listed in `rows`
    /// (`S` per batch row), given `hidden = hidden_all(..)`.
    ///
    /// Computed as `<query[b] · W_out, hidden[pair]>`, which omits the
    /// per-row constant `<query[b], b_out>`; softmax over a row, and hence
    /// every selection probability and its gradient, is unchanged.
    pub fn scores(&self, tape: &mut Tape, bound: &Bound, query: Var, hidden: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
        let q = tape.matmul(query, bound[self.out.weight])?;
        tape.gather_dot(q, hidden, rows)
    }

    /// `Σ_s weights[b][s] · encode(rows[b][s])` for weights that sum to one
    /// per row (one-hot selections).
    pub fn mix(&self, tape: &mut Tape, bound: &Bound, weights: Var, hidden: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
        let h = tape.gather_mix(weights, hidden, rows)?;
        self.out.forward(tape, bound, h)
    }
}

/// `D_w`: the teacher's argmax action for every enumerated context under
/// one world state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemoPool {
    pub world_state_id: usize,
    pub demos: Vec<Demonstration>,
}

impl DemoPool {
    /// Builds the pool from per-object teacher scores (`f_T(w)ᵀ g_T(o)` for
    /// every object id). Ties go to the lowest action index.
    pub fn from_object_scores(world_state_id: usize, contexts: &[Context], n: usize, scores: &[f64]) -> Self {
        let demos = contexts
            .iter()
            .enumerate()
            .map(|(context_id, ctx)| {
                let ids = ctx.object_ids(n);
                let mut action = 0;
                for a in 1..CONTEXT_SIZE {
                    if scores[ids[a]] > scores[ids[action]] {
                        action = a;
                    }
                }
                Demonstration {
                    context_id,
                    context: *ctx,
                    action,
                }
            })
            .collect();
        Self { world_state_id, demos }
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    /// Rows of the all-pairs demo-encoding table, one per pool entry.
    pub fn table_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.demos.iter().map(|d| pair_row(d.context_id, d.action))
    }
}

/// `k` pool indices drawn uniformly without replacement, in draw order.
pub fn random_pool_indices<R: Rng + ?Sized>(pool_len: usize, k: usize, rng: &mut R) -> Result<Vec<usize>, AgentError> {
    if k > pool_len {
        return Err(AgentError::CapacityExceedsPool { k, pool: pool_len });
    }
    Ok(rand::seq::index::sample(rng, pool_len, k).into_vec())
}

/// Random-demonstration baseline: `k` distinct demos from the pool.
pub fn random_demos<R: Rng + ?Sized>(pool: &DemoPool, k: usize, rng: &mut R) -> Result<Utterance, AgentError> {
    let idx = random_pool_indices(pool.len(), k, rng)?;
    Ok(Utterance::Demonstrations(idx.into_iter().map(|i| pool.demos[i]).collect()))
}
