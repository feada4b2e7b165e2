use rand::Rng;

use super::{AutodiffError, Bound, ParamId, ParamStore, Tape, Var};

/// Weights of one GRU cell.
///
/// Gate rows are stacked in the order (reset `r`, update `z`, candidate `n`):
///
/// ```text
/// r  = σ(W_r x + b_r + U_r h + c_r)
/// z  = σ(W_z x + b_z + U_z h + c_z)
/// n  = tanh(W_n x + b_n + r ⊙ (U_n h + c_n))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCellParams {
    /// `[3H x I]`
    pub input_to_gates: ParamId,
    /// `[3H x H]`
    pub hidden_to_gates: ParamId,
    /// `[3H]`
    pub input_bias: ParamId,
    /// `[3H]`
    pub hidden_bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruCellParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let g = 3 * hidden_size;
        Self {
            input_to_gates: store.uniform(format!("{name}.w_ih"), &[g, input_size], input_size, rng),
            hidden_to_gates: store.uniform(format!("{name}.w_hh"), &[g, hidden_size], hidden_size, rng),
            input_bias: store.uniform(format!("{name}.b_ih"), &[g], input_size, rng),
            hidden_bias: store.uniform(format!("{name}.b_hh"), &[g], hidden_size, rng),
            input_size,
            hidden_size,
        }
    }

    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var) -> Result<Var, AutodiffError> {
        gru_cell(
            tape,
            [
                bound[self.input_to_gates],
                bound[self.hidden_to_gates],
                bound[self.input_bias],
                bound[self.hidden_bias],
            ],
            x,
            h,
        )
    }
}

/// One GRU step. `x` is `[B x I]` (or `[I]`), `h` is `[B x H]` (or `[H]`);
/// `weights` are `[w_ih, w_hh, b_ih, b_hh]` as laid out in [`GruCellParams`].
pub fn gru_cell(tape: &mut Tape, weights: [Var; 4], x: Var, h: Var) -> Result<Var, AutodiffError> {
    let [w_ih, w_hh, b_ih, b_hh] = weights;
    let hidden = tape.shape(h).last().copied().unwrap_or(0);
    let gates = 3 * hidden;
    let (ws, us) = (tape.shape(w_ih).to_vec(), tape.shape(w_hh).to_vec());
    if ws.len() != 2 || ws[0] != gates || us != [gates, hidden] || tape.shape(x).last() != Some(&ws[1]) {
        return Err(AutodiffError::ShapeMismatch {
            op: "gru_cell",
            lhs: tape.shape(x).to_vec(),
            rhs: ws,
        });
    }
    let vector_input = tape.shape(x).len() == 1;
    if vector_input != (tape.shape(h).len() == 1)
        || tape.value(x).rows_cols().0 != tape.value(h).rows_cols().0
    {
        return Err(AutodiffError::ShapeMismatch {
            op: "gru_cell",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(h).to_vec(),
        });
    }

    let gi = tape.matmul_nt(x, w_ih)?;
    let gi = tape.add_row(gi, b_ih)?;
    let gh = tape.matmul_nt(h, w_hh)?;
    let gh = tape.add_row(gh, b_hh)?;

    let (i_rz, h_rz) = (tape.slice_cols(gi, 0, 2 * hidden)?, tape.slice_cols(gh, 0, 2 * hidden)?);
    let rz = tape.add(i_rz, h_rz)?;
    let rz = tape.sigmoid(rz);
    let r = tape.slice_cols(rz, 0, hidden)?;
    let z = tape.slice_cols(rz, hidden, 2 * hidden)?;

    let i_n = tape.slice_cols(gi, 2 * hidden, gates)?;
    let h_n = tape.slice_cols(gh, 2 * hidden, gates)?;
    let gated = tape.mul(r, h_n)?;
    let n = tape.add(i_n, gated)?;
    let n = tape.tanh(n);

    // h' = n + z ⊙ (h - n)
    let diff = tape.sub(h, n)?;
    let keep = tape.mul(z, diff)?;
    tape.add(n, keep)
}
