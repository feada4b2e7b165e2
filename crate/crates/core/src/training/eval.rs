use rand::seq::index;
use rand::Rng;

use super::TrainError;
use crate::agents::{Agents, Decode, EnvTables, Utterance};
use crate::autodiff::{argmax, Tape};
use crate::env::{normalized_reward, reward, Context, FeatureSpace, Game, WorldState};

/// World states per batched forward pass during evaluation.
const EVAL_CHUNK: usize = 128;

/// The games an evaluation scores: a fixed subset of world states and, for
/// each, a fixed subset of context ids.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub states: Vec<WorldState>,
    /// Ascending context ids per state.
    pub contexts: Vec<Vec<usize>>,
}

impl EvalSet {
    /// Keeps every state when `state_ids.len() <= max_states`, otherwise a
    /// uniform subset; per state, all contexts or `per_state` of them drawn
    /// without replacement.
    pub fn sample<R: Rng + ?Sized>(
        space: &FeatureSpace,
        state_ids: &[usize],
        max_states: usize,
        per_state: usize,
        rng: &mut R,
    ) -> Self {
        let chosen: Vec<usize> = if state_ids.len() <= max_states {
            state_ids.to_vec()
        } else {
            let mut pick = index::sample(rng, state_ids.len(), max_states).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|i| state_ids[i]).collect()
        };
        let total = space.num_contexts();
        let contexts = chosen
            .iter()
            .map(|_| {
                if per_state >= total {
                    (0..total).collect()
                } else {
                    let mut c = index::sample(rng, total, per_state).into_vec();
                    c.sort_unstable();
                    c
                }
            })
            .collect();
        Self {
            states: chosen.into_iter().map(|id| space.world_state(id)).collect(),
            contexts,
        }
    }

    pub fn num_games(&self) -> usize {
        self.contexts.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub mean: f64,
    pub sem: f64,
    pub n_games: usize,
    /// One greedy utterance per evaluated world state (learned student only).
    pub utterances: Vec<Utterance>,
}

/// Mean and standard error (sample standard deviation / √N).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Scores an arbitrary chooser on every game of the set.
pub fn evaluate_policy(set: &EvalSet, contexts: &[Context], mut choose: impl FnMut(&Game) -> usize) -> Result<Evaluation, TrainError> {
    let mut values = Vec::with_capacity(set.num_games());
    for (world, ids) in set.states.iter().zip(&set.contexts) {
        for &c in ids {
            let game = Game {
                context: contexts[c],
                world: *world,
            };
            let raw = reward(&game, choose(&game))?;
            values.push(normalized_reward(raw, &game));
        }
    }
    Ok(finish(values, Vec::new()))
}

fn finish(values: Vec<f64>, utterances: Vec<Utterance>) -> Evaluation {
    let (mean, sem) = mean_sem(&values);
    Evaluation {
        mean,
        sem,
        n_games: values.len(),
        utterances,
    }
}

/// Argmax over each context's three object scores, recorded as normalized
/// reward.
fn score_rows(scores: &[f64], states: &[WorldState], contexts: &[Vec<usize>], tables: &EnvTables, values: &mut Vec<f64>) {
    let width = tables.env.space.num_objects();
    let n = tables.n();
    for (b, world) in states.iter().enumerate() {
        let row = &scores[b * width..(b + 1) * width];
        for &c in &contexts[b] {
            let context = tables.contexts()[c];
            let ids = context.object_ids(n);
            let action = argmax(&ids.map(|i| row[i]));
            let game = Game { context, world: *world };
            let raw = game.action_rewards()[action];
            values.push(normalized_reward(raw, &game));
        }
    }
}

/// Greedy utterance per world state (demo pools rebuilt from the current
/// teacher), then the student's argmax action on each sampled context.
pub fn evaluate<R: Rng + ?Sized>(agents: &Agents, tables: &EnvTables, set: &EvalSet, rng: &mut R) -> Result<Evaluation, TrainError> {
    let mut values = Vec::with_capacity(set.num_games());
    let mut utterances = Vec::with_capacity(set.states.len());
    for (states, ctx) in set.states.chunks(EVAL_CHUNK).zip(set.contexts.chunks(EVAL_CHUNK)) {
        let mut tape = Tape::new();
        let bound = agents.params.bind_frozen(&mut tape);
        let ex = agents.exchange(&mut tape, &bound, tables, states, Decode::Greedy, rng)?;
        score_rows(tape.value(ex.student_scores).data(), states, ctx, tables, &mut values);
        utterances.extend(ex.utterances);
    }
    Ok(finish(values, utterances))
}

/// The teacher playing the game itself, greedily.
pub fn evaluate_teacher(agents: &Agents, tables: &EnvTables, set: &EvalSet) -> Result<Evaluation, TrainError> {
    let mut values = Vec::with_capacity(set.num_games());
    for (states, ctx) in set.states.chunks(EVAL_CHUNK).zip(set.contexts.chunks(EVAL_CHUNK)) {
        let mut tape = Tape::new();
        let bound = agents.params.bind_frozen(&mut tape);
        let f = agents.teacher_world(&mut tape, &bound, states)?;
        let g = agents.teacher_objects(&mut tape, &bound, tables)?;
        let scores = tape.matmul_nt(f, g).map_err(crate::agents::AgentError::from)?;
        score_rows(tape.value(scores).data(), states, ctx, tables, &mut values);
    }
    Ok(finish(values, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Environment;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sem_matches_hand_values() {
        let (m, s) = mean_sem(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sem(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn eval_set_respects_caps() {
        let env = Environment::new(3).unwrap();
        let ids: Vec<usize> = (0..36).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = EvalSet::sample(&env.space, &ids, 100, 1000, &mut rng);
        assert_eq!(all.states.len(), 36);
        assert_eq!(all.num_games(), 36 * 84);
        let some = EvalSet::sample(&env.space, &ids, 10, 20, &mut rng);
        assert_eq!(some.states.len(), 10);
        assert!(some.contexts.iter().all(|c| c.len() == 20 && c.windows(2).all(|w| w[0] < w[1])));
    }

    #[test]
    fn oracle_chooser_scores_one() {
        let env = Environment::new(3).unwrap();
        let ids: Vec<usize> = (0..36).collect();
        let set = EvalSet::sample(&env.space, &ids, 36, 84, &mut ChaCha8Rng::seed_from_u64(1));
        let e = evaluate_policy(&set, &env.contexts, |g| {
            let r = g.action_rewards();
            argmax(&r)
        })
        .unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.sem, 0.0);
    }
}
