//! Reverse-mode differentiation over matrix operations.
//!
//! A [`Tape`] records each forward operation as a node holding its result and
//! its parents, in topological order by construction. [`Tape::backward`]
//! walks the nodes once in reverse, accumulating exact vector-Jacobian
//! products into a gradient per leaf. Tapes are rebuilt every forward pass
//! (define-by-run), so per-step structure like sampled masks or varying batch
//! shapes costs nothing extra.
//!
//! Shape mismatches are contract violations and panic with the op name and
//! the offending shapes.

use crate::linalg::Matrix;

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a tape node; cheap to copy, carries its shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    /// `a + row` with `row` broadcast over the rows of `a`.
    AddRow(usize, usize),
    /// `a ⊙ row` with `row` broadcast over the rows of `a`.
    MulRow(usize, usize),
    Scale(usize, f64),
    Hadamard(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LayerNorm(usize),
    Gelu(usize),
    Relu(usize),
    Slice {
        input: usize,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    MeanAll(usize),
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar loss with respect to every node that influenced
/// it; leaves that the loss never touched report zeros.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// ∂loss/∂var, zero-filled if the variable did not reach the loss.
    pub fn wrt(&self, var: Var) -> Matrix {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Matrix::zeros(var.rows, var.cols),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `var` during the forward pass.
    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.id].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var { id, rows, cols }
    }

    /// Registers an input; gradients accumulate here.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            a.cols, b.rows,
            "matmul: {}x{} incompatible with {}x{}",
            a.rows, a.cols, b.rows, b.cols
        );
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::Matmul(a.id, b.id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            (a.rows, a.cols),
            (b.rows, b.cols),
            "add: {}x{} vs {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        );
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a.id, b.id))
    }

    /// Adds a 1×m row vector to every row of an n×m matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert!(
            row.rows == 1 && row.cols == a.cols,
            "add_row: row {}x{} does not broadcast over {}x{}",
            row.rows,
            row.cols,
            a.rows,
            a.cols
        );
        let r = self.value(row).row(0).to_vec();
        let base = self.value(a);
        let value = Matrix::from_fn(a.rows, a.cols, |i, j| base.get(i, j) + r[j]);
        self.push(value, Op::AddRow(a.id, row.id))
    }

    /// Multiplies every row of an n×m matrix by a 1×m row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert!(
            row.rows == 1 && row.cols == a.cols,
            "mul_row: row {}x{} does not broadcast over {}x{}",
            row.rows,
            row.cols,
            a.rows,
            a.cols
        );
        let r = self.value(row).row(0).to_vec();
        let base = self.value(a);
        let value = Matrix::from_fn(a.rows, a.cols, |i, j| base.get(i, j) * r[j]);
        self.push(value, Op::MulRow(a.id, row.id))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a.id, factor))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            (a.rows, a.cols),
            (b.rows, b.cols),
            "hadamard: {}x{} vs {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        );
        let value = self.value(a).hadamard(self.value(b));
        self.push(value, Op::Hadamard(a.id, b.id))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a.id))
    }

    /// Numerically stable softmax applied to each row independently.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(a.rows, a.cols);
        for i in 0..a.rows {
            softmax_into(x.row(i), value.row_mut(i));
        }
        self.push(value, Op::SoftmaxRows(a.id))
    }

    /// Per-row normalization `(x − μ)/√(var + ε)` with ε = 1e-5 and the
    /// biased variance; affine gain/bias are separate `mul_row`/`add_row`.
    pub fn layernorm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(a.rows, a.cols);
        for i in 0..a.rows {
            let (mean, inv_std) = layernorm_stats(x.row(i));
            for j in 0..a.cols {
                value.set(i, j, (x.get(i, j) - mean) * inv_std);
            }
        }
        self.push(value, Op::LayerNorm(a.id))
    }

    /// Exact Gaussian-CDF GELU: `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_fn(a.rows, a.cols, |i, j| {
            let v = x.get(i, j);
            v * gauss_cdf(v)
        });
        self.push(value, Op::Gelu(a.id))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_fn(a.rows, a.cols, |i, j| x.get(i, j).max(0.0));
        self.push(value, Op::Relu(a.id))
    }

    /// Copies the `rows × cols` submatrix starting at (row0, col0).
    pub fn slice(&mut self, a: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Var {
        assert!(
            row0 + rows <= a.rows && col0 + cols <= a.cols,
            "slice: window {row0}+{rows} x {col0}+{cols} outside {}x{}",
            a.rows,
            a.cols
        );
        let x = self.value(a);
        let value = Matrix::from_fn(rows, cols, |i, j| x.get(row0 + i, col0 + j));
        self.push(
            value,
            Op::Slice {
                input: a.id,
                row0,
                col0,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = parts[0].cols;
        let mut rows = 0;
        for p in parts {
            assert_eq!(
                p.cols, cols,
                "concat_rows: column mismatch {} vs {cols}",
                p.cols
            );
            rows += p.rows;
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut r = 0;
        for p in parts {
            for i in 0..p.rows {
                value.row_mut(r).copy_from_slice(self.nodes[p.id].value.row(i));
                r += 1;
            }
        }
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = parts[0].rows;
        let mut cols = 0;
        for p in parts {
            assert_eq!(p.rows, rows, "concat_cols: row mismatch {} vs {rows}", p.rows);
            cols += p.cols;
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            for i in 0..rows {
                for j in 0..p.cols {
                    value.set(i, c0 + j, self.nodes[p.id].value.get(i, j));
                }
            }
            c0 += p.cols;
        }
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Mean over all entries, as a 1×1 matrix.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = (a.rows * a.cols) as f64;
        let m = x.data().iter().sum::<f64>() / n;
        self.push(Matrix::new(1, 1, vec![m]), Op::MeanAll(a.id))
    }

    /// Selects rows of `table` by index; gradients scatter-add back.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        for &ix in indices {
            assert!(
                ix < table.rows,
                "gather_rows: index {ix} out of range for {} rows",
                table.rows
            );
        }
        let t = self.value(table);
        let mut value = Matrix::zeros(indices.len(), table.cols);
        for (i, &ix) in indices.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(ix));
        }
        self.push(
            value,
            Op::GatherRows {
                table: table.id,
                indices: indices.to_vec(),
            },
        )
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        assert_eq!(
            labels.len(),
            logits.rows,
            "cross_entropy: {} labels for {} logit rows",
            labels.len(),
            logits.rows
        );
        for &l in labels {
            assert!(
                l < logits.cols,
                "cross_entropy: label {l} out of range for {} classes",
                logits.cols
            );
        }
        let x = self.value(logits);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = Matrix::new(1, 1, vec![total / labels.len() as f64]);
        self.push(
            value,
            Op::CrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
            },
        )
    }

    /// Scalar value of a 1×1 variable.
    pub fn scalar(&self, var: Var) -> f64 {
        assert_eq!(
            (var.rows, var.cols),
            (1, 1),
            "scalar: variable is {}x{}",
            var.rows,
            var.cols
        );
        self.value(var).get(0, 0)
    }

    /// Accumulates ∂`loss`/∂node for every node, visiting each exactly once
    /// in reverse topological order. `loss` must be 1×1.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            (loss.rows, loss.cols),
            (1, 1),
            "backward: loss must be scalar, got {}x{}",
            loss.rows,
            loss.cols
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::new(1, 1, vec![1.0]));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.apply_vjp(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        Gradients { grads }
    }

    fn apply_vjp(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let accumulate = |grads: &mut [Option<Matrix>], target: usize, delta: Matrix| {
            match &mut grads[target] {
                Some(existing) => *existing = existing.add(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                accumulate(grads, *a, g.matmul(&vb.transpose()));
                accumulate(grads, *b, va.transpose().matmul(g));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                let mut dr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        dr.set(0, j, dr.get(0, j) + g.get(i, j));
                    }
                }
                accumulate(grads, *row, dr);
            }
            Op::MulRow(a, row) => {
                let va = &self.nodes[*a].value;
                let vr = &self.nodes[*row].value;
                let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * vr.get(0, j));
                let mut dr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        dr.set(0, j, dr.get(0, j) + g.get(i, j) * va.get(i, j));
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *row, dr);
            }
            Op::Scale(a, factor) => {
                accumulate(grads, *a, g.scale(*factor));
            }
            Op::Hadamard(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                accumulate(grads, *a, g.hadamard(vb));
                accumulate(grads, *b, g.hadamard(va));
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, g.transpose());
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut dx = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: f64 = (0..g.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..g.cols() {
                        dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm(a) => {
                let x = &self.nodes[*a].value;
                let y = &self.nodes[id].value;
                let m = g.cols() as f64;
                let mut dx = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (_, inv_std) = layernorm_stats(x.row(i));
                    let g_mean: f64 = g.row(i).iter().sum::<f64>() / m;
                    let gy_mean: f64 = (0..g.cols())
                        .map(|j| g.get(i, j) * y.get(i, j))
                        .sum::<f64>()
                        / m;
                    for j in 0..g.cols() {
                        let v = inv_std * (g.get(i, j) - g_mean - y.get(i, j) * gy_mean);
                        dx.set(i, j, v);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                let dx = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    let v = x.get(i, j);
                    g.get(i, j) * (gauss_cdf(v) + v * gauss_pdf(v))
                });
                accumulate(grads, *a, dx);
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let dx = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    if x.get(i, j) > 0.0 {
                        g.get(i, j)
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *a, dx);
            }
            Op::Slice { input, row0, col0 } => {
                let (rows, cols) = self.nodes[*input].value.shape();
                let mut dx = Matrix::zeros(rows, cols);
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        dx.set(row0 + i, col0 + j, g.get(i, j));
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for &p in parts {
                    let (prows, pcols) = self.nodes[p].value.shape();
                    let piece = Matrix::from_fn(prows, pcols, |i, j| g.get(r + i, j));
                    r += prows;
                    accumulate(grads, p, piece);
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for &p in parts {
                    let (prows, pcols) = self.nodes[p].value.shape();
                    let piece = Matrix::from_fn(prows, pcols, |i, j| g.get(i, c + j));
                    c += pcols;
                    accumulate(grads, p, piece);
                }
            }
            Op::MeanAll(a) => {
                let (rows, cols) = self.nodes[*a].value.shape();
                let scale = g.get(0, 0) / (rows * cols) as f64;
                accumulate(grads, *a, Matrix::from_fn(rows, cols, |_, _| scale));
            }
            Op::GatherRows { table, indices } => {
                let (rows, cols) = self.nodes[*table].value.shape();
                let mut dt = Matrix::zeros(rows, cols);
                for (i, &ix) in indices.iter().enumerate() {
                    for j in 0..cols {
                        dt.set(ix, j, dt.get(ix, j) + g.get(i, j));
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::CrossEntropy { logits, labels } => {
                let x = &self.nodes[*logits].value;
                let upstream = g.get(0, 0);
                let batch = labels.len() as f64;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                let mut probs = vec![0.0; x.cols()];
                for (i, &label) in labels.iter().enumerate() {
                    softmax_into(x.row(i), &mut probs);
                    for j in 0..x.cols() {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dx.set(i, j, upstream * (probs[j] - onehot) / batch);
                    }
                }
                accumulate(grads, *logits, dx);
            }
        }
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn layernorm_stats(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mean = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + LAYERNORM_EPS).sqrt())
}

fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Compares an analytic gradient against central finite differences.
///
/// `f` evaluates the scalar function at a point and returns the value together
/// with its analytic gradient. The result is the maximum over entries of
/// `|analytic − numeric| / max(1, |numeric|)` with
/// `numeric = (f(x + h·eᵢⱼ) − f(x − h·eᵢⱼ)) / (2h)`.
pub fn grad_check<F>(f: F, x: &Matrix, h: f64) -> f64
where
    F: Fn(&Matrix) -> (f64, Matrix),
{
    assert!(h > 0.0, "grad_check: step must be positive");
    let (_, analytic) = f(x);
    assert_eq!(
        analytic.shape(),
        x.shape(),
        "grad_check: analytic gradient shape {:?} != input shape {:?}",
        analytic.shape(),
        x.shape()
    );
    let mut worst = 0.0f64;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut plus = x.clone();
            plus.set(i, j, x.get(i, j) + h);
            let mut minus = x.clone();
            minus.set(i, j, x.get(i, j) - h);
            let numeric = (f(&plus).0 - f(&minus).0) / (2.0 * h);
            let err = (analytic.get(i, j) - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}
