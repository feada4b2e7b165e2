use std::ops::Index;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tape, Tensor, Var};

const CHECKPOINT_FORMAT: &str = "teachsim-params/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    params: Vec<CheckpointEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Adds a tensor drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("param shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone())).collect())
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }

    /// Gradients after `tape.backward`, zero-filled for parameters the loss
    /// does not touch.
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .zip(bound.vars())
            .map(|(v, &var)| tape.grad(var).map_or_else(|| vec![0.0; v.len()], <[f64]>::to_vec))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, v)| CheckpointEntry {
                    name: name.clone(),
                    shape: v.shape().to_vec(),
                    values: v.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&ckpt).expect("checkpoint serializes")
    }

    /// Overwrites every parameter from a checkpoint with exactly the same
    /// names and shapes, in any order. Nothing is modified on error.
    pub fn load_json(&mut self, json: &str) -> Result<(), AutodiffError> {
        let ckpt: Checkpoint =
            serde_json::from_str(json).map_err(|e| AutodiffError::CheckpointFormat(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(AutodiffError::CheckpointFormat(format!(
                "unsupported format `{}`",
                ckpt.format
            )));
        }
        let mut staged: Vec<Option<Tensor>> = vec![None; self.values.len()];
        for entry in ckpt.params {
            let Some(i) = self.names.iter().position(|n| *n == entry.name) else {
                return Err(AutodiffError::CheckpointUnexpected(entry.name));
            };
            if entry.shape != self.values[i].shape() {
                return Err(AutodiffError::CheckpointShape {
                    name: entry.name,
                    expected: self.values[i].shape().to_vec(),
                    found: entry.shape,
                });
            }
            let t = Tensor::new(entry.shape, entry.values)
                .map_err(|e| AutodiffError::CheckpointFormat(format!("{}: {e}", entry.name)))?;
            staged[i] = Some(t);
        }
        if let Some(i) = staged.iter().position(Option::is_none) {
            return Err(AutodiffError::CheckpointMissing(self.names[i].clone()));
        }
        self.values = staged.into_iter().map(Option::unwrap).collect();
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), AutodiffError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), AutodiffError> {
        let json = std::fs::read_to_string(path)?;
        self.load_json(&json)
    }
}

/// Affine layer `x · Wᵀ + b` with `W: [out x in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let weight = store.uniform(format!("{name}.weight"), &[output, input], input, rng);
        let bias = store.uniform(format!("{name}.bias"), &[output], input, rng);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, AutodiffError> {
        let xw = tape.matmul_nt(x, bound[self.weight])?;
        tape.add_row(xw, bound[self.bias])
    }
}

/// Two affine layers with a ReLU between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            out: Linear::new(store, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, AutodiffError> {
        let h = self.hidden.forward(tape, bound, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, bound, h)
    }
}
