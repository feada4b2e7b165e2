use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::tensor::{argmax, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Parameter-free op kinds reachable through [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Concat,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    LogSoftmax,
    EmbeddingLookup,
    Sum,
    Mean,
    DotRows,
    Scale,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Concat,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::EmbeddingLookup,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::DotRows,
        OpKind::Scale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::DotRows => "dot_rows",
            OpKind::Scale => "scale",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| AutodiffError::UnknownOp(s.to_string()))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, f64),
    Concat(Vec<Var>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Lookup { table: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    DotRows(Var, Var),
    SliceCols { a: Var, start: usize },
    GatherCols { a: Var, idx: Vec<usize> },
    ScatterCols { a: Var, idx: Vec<usize> },
    GatherDot { a: Var, table: Var, idx: Vec<usize> },
    GatherMix { w: Var, table: Var, idx: Vec<usize> },
    SumLookups { tables: Vec<Var>, idx: Vec<Vec<usize>> },
    MaskedFill { a: Var, mask: Vec<bool> },
    GumbelSt { logits: Var, soft: Vec<f64>, tau: f64 },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation, replayed in reverse by
/// [`Tape::backward`].
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and the reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `out = beta * out + op(a) * op(b)` for row-major matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[f64],
    (br, bc): (usize, usize),
    tb: bool,
    out: &mut [f64],
    beta: f64,
) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    assert_eq!(a.len(), ar * ac);
    assert_eq!(b.len(), br * bc);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    // SAFETY: the asserts above pin every slice length to the dimensions and
    // strides handed to the kernel, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_row(input: &[f64], out: &mut [f64]) {
    let max = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(input) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard Gumbel draws `-ln(-ln u)`, with `u` clamped to `[1e-12, 1 - 1e-12]`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], for leaves only.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Dispatch a parameter-free op by kind.
    ///
    /// `embedding_lookup` reads its row indices from the second input, and
    /// `scale` its factor from the second input (a scalar); neither of those
    /// second inputs is differentiated.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Arity {
                    op: kind.name(),
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Concat => {
                if inputs.is_empty() {
                    return Err(AutodiffError::Arity {
                        op: kind.name(),
                        expected: 1,
                        got: 0,
                    });
                }
                self.concat(inputs)
            }
            OpKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Tanh => {
                arity(1)?;
                Ok(self.tanh(inputs[0]))
            }
            OpKind::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::Softmax => {
                arity(1)?;
                Ok(self.softmax(inputs[0]))
            }
            OpKind::LogSoftmax => {
                arity(1)?;
                Ok(self.log_softmax(inputs[0]))
            }
            OpKind::EmbeddingLookup => {
                arity(2)?;
                let mut idx = Vec::with_capacity(self.value(inputs[1]).len());
                for &x in self.value(inputs[1]).data() {
                    if x < 0.0 || x.fract() != 0.0 {
                        return Err(AutodiffError::InvalidIndex {
                            op: kind.name(),
                            value: x,
                        });
                    }
                    idx.push(x as usize);
                }
                self.embedding_lookup(inputs[0], &idx)
            }
            OpKind::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::DotRows => {
                arity(2)?;
                self.dot_rows(inputs[0], inputs[1])
            }
            OpKind::Scale => {
                arity(2)?;
                let factor = self.value(inputs[1]);
                if !factor.is_scalar() {
                    return Err(AutodiffError::NotScalar(factor.shape().to_vec()));
                }
                let factor = factor.item();
                Ok(self.scale(inputs[0], factor))
            }
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `a · b` with numpy-style handling of 1-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`; the layout used by every linear layer (`[out x in]` weights).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.is_empty() || (ta && sa.len() != 2) || (tb && sb.len() != 2) {
            return Err(self.mismatch("matmul", a, b));
        }
        let (ar, ac) = if sa.len() == 1 { (1, sa[0]) } else { (sa[0], sa[1]) };
        let (br, bc) = if sb.len() == 1 { (sb[0], 1) } else { (sb[0], sb[1]) };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            (ar, ac),
            ta,
            self.value(b).data(),
            (br, bc),
            tb,
            &mut out,
            0.0,
        );
        let shape = match (sa.len(), sb.len()) {
            (1, 1) => vec![],
            (1, _) => vec![n],
            (_, 1) => vec![m],
            _ => vec![m, n],
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out).expect("matmul shape"),
            Op::MatMul { a, b, ta, tb },
            rg,
        ))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::new(self.shape(a).to_vec(), data).expect("same shape"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.value(a).rows_cols();
        let rs = self.shape(row);
        let ok = matches!(rs, [d] if *d == cols) || matches!(rs, [1, d] if *d == cols);
        if !ok || self.shape(a).is_empty() {
            return Err(self.mismatch("add_row", a, row));
        }
        let mut t = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for chunk in t.data_mut().chunks_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow { a, row }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= factor);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs[0];
        let rank = self.shape(first).len();
        let rows = self.value(first).rows_cols().0;
        for &v in &inputs[1..] {
            let s = self.shape(v);
            if s.len() != rank || rank == 0 || self.value(v).rows_cols().0 != rows {
                return Err(self.mismatch("concat", first, v));
            }
        }
        if rank == 0 {
            return Err(self.mismatch("concat", first, first));
        }
        let widths: Vec<usize> = inputs.iter().map(|&v| self.value(v).rows_cols().1).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in inputs {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(shape, data).expect("concat"), Op::Concat(inputs.to_vec()), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = f(*x));
        t
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (_, cols) = src.rows_cols();
        let mut t = src.clone();
        for (o, i) in t.data_mut().chunks_mut(cols).zip(src.data().chunks(cols)) {
            softmax_row(i, o);
        }
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (_, cols) = src.rows_cols();
        let mut t = src.clone();
        for row in t.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Gathers rows of a 2-D `table`: output is `[idx.len() x D]`.
    pub fn embedding_lookup(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "embedding_lookup",
                lhs: shape.to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(idx.len(), cols, data),
            Op::Lookup {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Per-row inner products of two equally shaped tensors; output `[rows]`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.shape(a).is_empty() {
            return Err(self.mismatch("dot_rows", a, b));
        }
        let (rows, cols) = self.value(a).rows_cols();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = (0..rows)
            .map(|r| {
                va[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&vb[r * cols..(r + 1) * cols])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::vector(data), Op::DotRows(a, b), rg))
    }

    /// Columns `start..end` of a 1-D or 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.rows_cols();
        if t.shape().is_empty() || start > end || end > cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let shape = if t.shape().len() == 1 { vec![width] } else { vec![rows, width] };
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data).expect("slice"), Op::SliceCols { a, start }, rg))
    }

    /// Per-row column gather: `out[r][s] = a[r][idx[r * S + s]]`, with
    /// `S = idx.len() / rows`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.rows_cols();
        if t.shape().len() != 2 || rows == 0 || !idx.len().is_multiple_of(rows) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let per_row = idx.len() / rows;
        let mut data = Vec::with_capacity(idx.len());
        for (r, chunk) in idx.chunks(per_row.max(1)).enumerate().take(rows) {
            let row = t.row(r);
            for &c in chunk {
                if c >= cols {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "gather_cols",
                        index: c,
                        bound: cols,
                    });
                }
                data.push(row[c]);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(rows, per_row, data),
            Op::GatherCols { a, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Inverse of [`Tape::gather_cols`]: places `a[r][s]` at column
    /// `idx[r * S + s]` of a zero `[rows x width]` matrix (duplicates add).
    pub fn scatter_cols(&mut self, a: Var, idx: &[usize], width: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, per_row) = t.rows_cols();
        if t.shape().len() != 2 || idx.len() != rows * per_row {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut data = vec![0.0; rows * width];
        for (k, (&c, &x)) in idx.iter().zip(t.data()).enumerate() {
            if c >= width {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "scatter_cols",
                    index: c,
                    bound: width,
                });
            }
            data[(k / per_row) * width + c] += x;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(rows, width, data),
            Op::ScatterCols { a, idx: idx.to_vec() },
            rg,
        ))
    }

    fn check_gather_table(&self, op: &'static str, rows: usize, table: Var, idx: &[usize]) -> Result<(usize, usize)> {
        let t = self.value(table);
        if t.shape().len() != 2 || rows == 0 || !idx.len().is_multiple_of(rows) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let (bound, _) = t.rows_cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= bound) {
            return Err(AutodiffError::IndexOutOfRange { op, index: bad, bound });
        }
        Ok((bound, idx.len() / rows))
    }

    /// `out[b][s] = <a[b], table[idx[b * S + s]]>`: scores of `S` table rows
    /// per batch row, without materializing the full `a · tableᵀ`.
    pub fn gather_dot(&mut self, a: Var, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, dim) = self.value(a).rows_cols();
        if self.value(a).shape().len() != 2 || self.value(table).rows_cols().1 != dim {
            return Err(self.mismatch("gather_dot", a, table));
        }
        let (_, per_row) = self.check_gather_table("gather_dot", rows, table, idx)?;
        let (at, tt) = (self.value(a), self.value(table));
        // A dense product and a gather beat per-pair dot products: the
        // GEMM kernel reuses each table row across the whole batch.
        let width = tt.rows_cols().0;
        let mut full = vec![0.0; rows * width];
        gemm(at.data(), (rows, dim), false, tt.data(), (width, dim), true, &mut full, 0.0);
        let data = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| full[(k / per_row) * width + i])
            .collect();
        let rg = self.rg(&[a, table]);
        Ok(self.push(
            Tensor::matrix(rows, per_row, data),
            Op::GatherDot { a, table, idx: idx.to_vec() },
            rg,
        ))
    }

    /// `out[b] = Σ_s w[b][s] · table[idx[b * S + s]]`; zero weights are
    /// skipped in the forward pass.
    pub fn gather_mix(&mut self, w: Var, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, per_row) = self.value(w).rows_cols();
        if self.value(w).shape().len() != 2 || idx.len() != rows * per_row {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_mix",
                lhs: self.shape(w).to_vec(),
                rhs: vec![idx.len()],
            });
        }
        self.check_gather_table("gather_mix", rows, table, idx)?;
        let (wt, tt) = (self.value(w), self.value(table));
        let dim = tt.rows_cols().1;
        let mut data = vec![0.0; rows * dim];
        let weights = wt.data();
        for s in 0..per_row {
            for b in 0..rows {
                let k = b * per_row + s;
                if weights[k] != 0.0 {
                    axpy(&mut data[b * dim..(b + 1) * dim], weights[k], tt.row(idx[k]));
                }
            }
        }
        let rg = self.rg(&[w, table]);
        Ok(self.push(
            Tensor::matrix(rows, dim, data),
            Op::GatherMix { w, table, idx: idx.to_vec() },
            rg,
        ))
    }

    /// `out[r] = Σ_t tables[t][idx[t][r]]`: several embedding lookups summed
    /// in one pass. Every table is `[rows_t x D]`; every index list has the
    /// same length.
    pub fn sum_lookups(&mut self, tables: &[Var], idx: &[&[usize]]) -> Result<Var> {
        if tables.is_empty() || tables.len() != idx.len() {
            return Err(AutodiffError::Arity {
                op: "sum_lookups",
                expected: tables.len().max(1),
                got: idx.len(),
            });
        }
        let dim = self.value(tables[0]).rows_cols().1;
        let len = idx[0].len();
        for (&t, ids) in tables.iter().zip(idx) {
            let v = self.value(t);
            if v.shape().len() != 2 || v.rows_cols().1 != dim || ids.len() != len {
                return Err(self.mismatch("sum_lookups", tables[0], t));
            }
            let bound = v.rows_cols().0;
            if let Some(&bad) = ids.iter().find(|&&i| i >= bound) {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "sum_lookups",
                    index: bad,
                    bound,
                });
            }
        }
        let mut data = vec![0.0; len * dim];
        for (&t, ids) in tables.iter().zip(idx) {
            let v = self.value(t);
            for (r, &i) in ids.iter().enumerate() {
                axpy(&mut data[r * dim..(r + 1) * dim], 1.0, v.row(i));
            }
        }
        let rg = self.rg(tables);
        Ok(self.push(
            Tensor::matrix(len, dim, data),
            Op::SumLookups {
                tables: tables.to_vec(),
                idx: idx.iter().map(|i| i.to_vec()).collect(),
            },
            rg,
        ))
    }

    /// Sets masked entries to `-inf`; they receive no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_fill",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut t = self.value(a).clone();
        for (x, &m) in t.data_mut().iter_mut().zip(mask) {
            if m {
                *x = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MaskedFill { a, mask: mask.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Straight-through Gumbel-Softmax, row-wise.
    ///
    /// Forward value is the exact one-hot of `argmax(logits + g)`; the
    /// backward pass uses the Jacobian of `softmax((logits + g) / tau)`.
    /// Noise is drawn row-major, one uniform per entry.
    pub fn gumbel_softmax_st<R: Rng + ?Sized>(&mut self, logits: Var, tau: f64, rng: &mut R) -> Result<Var> {
        let noise = gumbel_noise(rng, self.value(logits).len());
        self.gumbel_softmax_st_with_noise(logits, tau, &noise)
    }

    /// [`Tape::gumbel_softmax_st`] with caller-supplied noise.
    pub fn gumbel_softmax_st_with_noise(&mut self, logits: Var, tau: f64, noise: &[f64]) -> Result<Var> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(AutodiffError::InvalidTemperature(tau));
        }
        let t = self.value(logits);
        if t.shape().is_empty() || noise.len() != t.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "gumbel_softmax_st",
                lhs: t.shape().to_vec(),
                rhs: vec![noise.len()],
            });
        }
        let (_, cols) = t.rows_cols();
        let perturbed: Vec<f64> = t.data().iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
        let mut soft = vec![0.0; perturbed.len()];
        let mut hard = vec![0.0; perturbed.len()];
        for ((p, s), h) in perturbed
            .chunks(cols)
            .zip(soft.chunks_mut(cols))
            .zip(hard.chunks_mut(cols))
        {
            softmax_row(p, s);
            h[argmax(p)] = 1.0;
        }
        let out = Tensor::new(t.shape().to_vec(), hard).expect("same shape");
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::GumbelSt { logits, soft, tau }, rg))
    }

    /// Reverse sweep from a scalar `loss`, leaving `∂loss/∂leaf` on every
    /// differentiable leaf. Gradients from previous calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Allocates the gradient buffer of `v` on first use; false for constants.
        let slot = |grads: &mut [Option<Vec<f64>>], v: Var| -> bool {
            let input = &nodes[v.0];
            if input.requires_grad {
                grads[v.0].get_or_insert_with(|| vec![0.0; input.value.len()]);
            }
            input.requires_grad
        };
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let sa = val(a).shape();
                let sb = val(b).shape();
                let (ar, ac) = if sa.len() == 1 { (1, sa[0]) } else { (sa[0], sa[1]) };
                let (br, bc) = if sb.len() == 1 { (sb[0], 1) } else { (sb[0], sb[1]) };
                let m = if ta { ac } else { ar };
                let n = if tb { br } else { bc };
                if slot(grads, a) {
                    let da = grads[a.0].as_mut().unwrap();
                    if ta {
                        gemm(val(b).data(), (br, bc), tb, g, (m, n), true, da, 1.0);
                    } else {
                        gemm(g, (m, n), false, val(b).data(), (br, bc), !tb, da, 1.0);
                    }
                }
                if slot(grads, b) {
                    let db = grads[b.0].as_mut().unwrap();
                    if tb {
                        gemm(g, (m, n), true, val(a).data(), (ar, ac), ta, db, 1.0);
                    } else {
                        gemm(val(a).data(), (ar, ac), !ta, g, (m, n), false, db, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if slot(grads, v) {
                        axpy(grads[v.0].as_mut().unwrap(), sign, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if slot(grads, v) {
                        axpy(grads[v.0].as_mut().unwrap(), sign, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if slot(grads, *a) {
                    let other = val(*b).data();
                    let da = grads[a.0].as_mut().unwrap();
                    for ((d, &gi), &o) in da.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
                if slot(grads, *b) {
                    let other = val(*a).data();
                    let db = grads[b.0].as_mut().unwrap();
                    for ((d, &gi), &o) in db.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            Op::AddRow { a, row } => {
                if slot(grads, *a) {
                    axpy(grads[a.0].as_mut().unwrap(), 1.0, g);
                }
                if slot(grads, *row) {
                    let dr = grads[row.0].as_mut().unwrap();
                    let cols = dr.len();
                    for chunk in g.chunks(cols) {
                        axpy(dr, 1.0, chunk);
                    }
                }
            }
            Op::Scale(a, f) => {
                if slot(grads, *a) {
                    axpy(grads[a.0].as_mut().unwrap(), *f, g);
                }
            }
            Op::Concat(inputs) => {
                let (rows, total) = out.rows_cols();
                let mut offset = 0;
                for &v in inputs {
                    let w = val(v).rows_cols().1;
                    if slot(grads, v) {
                        let dv = grads[v.0].as_mut().unwrap();
                        for r in 0..rows {
                            axpy(&mut dv[r * w..(r + 1) * w], 1.0, &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Relu(a) => {
                if slot(grads, *a) {
                    let x = val(*a).data();
                    let da = grads[a.0].as_mut().unwrap();
                    for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if slot(grads, *a) {
                    let da = grads[a.0].as_mut().unwrap();
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if slot(grads, *a) {
                    let da = grads[a.0].as_mut().unwrap();
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax(a) => {
                if slot(grads, *a) {
                    let cols = out.rows_cols().1;
                    softmax_backward(grads[a.0].as_mut().unwrap(), g, out.data(), cols, 1.0);
                }
            }
            Op::LogSoftmax(a) => {
                if slot(grads, *a) {
                    let cols = out.rows_cols().1;
                    let da = grads[a.0].as_mut().unwrap();
                    for ((d, gr), y) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(out.data().chunks(cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((di, &gi), &yi) in d.iter_mut().zip(gr).zip(y) {
                            *di += gi - yi.exp() * total;
                        }
                    }
                }
            }
            Op::Lookup { table, idx } => {
                if slot(grads, *table) {
                    let cols = val(*table).rows_cols().1;
                    let dt = grads[table.0].as_mut().unwrap();
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(&mut dt[i * cols..(i + 1) * cols], 1.0, &g[k * cols..(k + 1) * cols]);
                    }
                }
            }
            Op::Sum(a) => {
                if slot(grads, *a) {
                    grads[a.0].as_mut().unwrap().iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if slot(grads, *a) {
                    let da = grads[a.0].as_mut().unwrap();
                    let share = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::DotRows(a, b) => {
                let cols = val(*a).rows_cols().1;
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if slot(grads, v) {
                        let o = val(other).data();
                        let dv = grads[v.0].as_mut().unwrap();
                        for (r, &gr) in g.iter().enumerate() {
                            axpy(&mut dv[r * cols..(r + 1) * cols], gr, &o[r * cols..(r + 1) * cols]);
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if slot(grads, *a) {
                    let cols = val(*a).rows_cols().1;
                    let (rows, width) = out.rows_cols();
                    let da = grads[a.0].as_mut().unwrap();
                    for r in 0..rows {
                        axpy(&mut da[r * cols + start..r * cols + start + width], 1.0, &g[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::GatherCols { a, idx } => {
                if slot(grads, *a) {
                    let cols = val(*a).rows_cols().1;
                    let per_row = out.rows_cols().1;
                    let da = grads[a.0].as_mut().unwrap();
                    for (k, (&c, &gi)) in idx.iter().zip(g).enumerate() {
                        da[(k / per_row) * cols + c] += gi;
                    }
                }
            }
            Op::ScatterCols { a, idx } => {
                if slot(grads, *a) {
                    let width = out.rows_cols().1;
                    let per_row = val(*a).rows_cols().1;
                    let da = grads[a.0].as_mut().unwrap();
                    for (k, (&c, d)) in idx.iter().zip(da.iter_mut()).enumerate() {
                        *d += g[(k / per_row) * width + c];
                    }
                }
            }
            Op::GatherDot { a, table, idx } => {
                let (rows, dim) = val(*a).rows_cols();
                let per_row = out.rows_cols().1;
                let (at, tt) = (val(*a), val(*table));
                let width = tt.rows_cols().0;
                let mut dfull = vec![0.0; rows * width];
                for (k, (&i, &gk)) in idx.iter().zip(g).enumerate() {
                    dfull[(k / per_row) * width + i] += gk;
                }
                if slot(grads, *a) {
                    let da = grads[a.0].as_mut().unwrap();
                    gemm(&dfull, (rows, width), false, tt.data(), (width, dim), false, da, 1.0);
                }
                if slot(grads, *table) {
                    let dt = grads[table.0].as_mut().unwrap();
                    gemm(&dfull, (rows, width), true, at.data(), (rows, dim), false, dt, 1.0);
                }
            }
            Op::GatherMix { w, table, idx } => {
                let dim = out.rows_cols().1;
                let (rows, per_row) = val(*w).rows_cols();
                let (wt, tt) = (val(*w), val(*table));
                if slot(grads, *w) {
                    let width = tt.rows_cols().0;
                    let mut full = vec![0.0; rows * width];
                    gemm(g, (rows, dim), false, tt.data(), (width, dim), true, &mut full, 0.0);
                    let dw = grads[w.0].as_mut().unwrap();
                    for (k, (&i, d)) in idx.iter().zip(dw.iter_mut()).enumerate() {
                        *d += full[(k / per_row) * width + i];
                    }
                }
                if slot(grads, *table) {
                    let dt = grads[table.0].as_mut().unwrap();
                    for (k, (&i, &x)) in idx.iter().zip(wt.data()).enumerate() {
                        if x != 0.0 {
                            let b = k / per_row;
                            axpy(&mut dt[i * dim..(i + 1) * dim], x, &g[b * dim..(b + 1) * dim]);
                        }
                    }
                }
            }
            Op::SumLookups { tables, idx } => {
                let dim = out.rows_cols().1;
                for (t, ids) in tables.iter().zip(idx) {
                    if slot(grads, *t) {
                        let dt = grads[t.0].as_mut().unwrap();
                        for (r, &i) in ids.iter().enumerate() {
                            axpy(&mut dt[i * dim..(i + 1) * dim], 1.0, &g[r * dim..(r + 1) * dim]);
                        }
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                if slot(grads, *a) {
                    let da = grads[a.0].as_mut().unwrap();
                    for ((d, &gi), &m) in da.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *d += gi;
                        }
                    }
                }
            }
            Op::GumbelSt { logits, soft, tau } => {
                if slot(grads, *logits) {
                    let cols = out.rows_cols().1;
                    softmax_backward(grads[logits.0].as_mut().unwrap(), g, soft, cols, 1.0 / tau);
                }
            }
            Op::Reshape(a) => {
                if slot(grads, *a) {
                    axpy(grads[a.0].as_mut().unwrap(), 1.0, g);
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `dx += factor * s ⊙ (g - <s, g>)` row by row.
fn softmax_backward(dx: &mut [f64], g: &[f64], s: &[f64], cols: usize, factor: f64) {
    for ((d, gr), sr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(s.chunks(cols)) {
        let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
        for ((di, &gi), &si) in d.iter_mut().zip(gr).zip(sr) {
            *di += factor * si * (gi - dot);
        }
    }
}
