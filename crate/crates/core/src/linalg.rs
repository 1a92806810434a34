//! Dense linear algebra over `f64`: row-major matrices, the Kronecker
//! product, a one-sided Jacobi SVD, and a seeded counter-based RNG.
//!
//! Everything here is deterministic: the same inputs (and the same seed)
//! produce bit-identical outputs. Matrices are desk-scale; allocation is
//! guarded by an element budget so a typo cannot ask for a full-scale
//! 7M-column matrix by accident.

use thiserror::Error;

/// Default cap on `rows × cols` for operations that allocate new matrices.
pub const DEFAULT_ELEMENT_BUDGET: usize = 1 << 26;

/// Maximum Jacobi sweeps before `svd` gives up.
const MAX_SVD_SWEEPS: usize = 60;

/// Relative off-diagonal threshold for Jacobi convergence: a column pair is
/// considered orthogonal when |bₚ·b_q| ≤ 1e-12·‖bₚ‖‖b_q‖.
const SVD_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix {rows}x{cols} exceeds the element budget of {budget} entries")]
    ElementBudget {
        rows: usize,
        cols: usize,
        budget: usize,
    },
    #[error("SVD did not converge after {sweeps} sweeps")]
    SvdDidNotConverge { sweeps: usize },
}

/// A dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Wraps `data` (row-major) as a `rows × cols` matrix.
    ///
    /// Panics if the length does not match; that is a caller bug, not a
    /// recoverable condition.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Matrix::new: data length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "Matrix::from_rows: ragged rows");
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self · other`; panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} incompatible with {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.shape(),
            other.shape(),
            "add: {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.shape(),
            other.shape(),
            "sub: {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * factor).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.shape(),
            other.shape(),
            "hadamard: {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Matrix::new(self.rows, self.cols, data)
    }

    /// √(Σ entries²), permutation-invariant: the squares are summed in a
    /// canonical order with compensation, so any layout bijection of the
    /// same entries yields the same norm bit-for-bit.
    pub fn frobenius_norm(&self) -> f64 {
        let mut squares: Vec<f64> = self.data.iter().map(|x| x * x).collect();
        squares.sort_unstable_by(f64::total_cmp);
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for &x in &squares {
            let t = sum + x;
            if sum.abs() >= x.abs() {
                comp += (sum - t) + x;
            } else {
                comp += (x - t) + sum;
            }
            sum = t;
        }
        (sum + comp).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Kronecker product `a ⊗ b` under the default element budget.
///
/// `out[(i·p)+k, (j·q)+l] = a[i,j]·b[k,l]` for `b` of shape `p × q`.
pub fn kronecker(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    kronecker_with_budget(a, b, DEFAULT_ELEMENT_BUDGET)
}

/// Kronecker product with an explicit element budget.
pub fn kronecker_with_budget(
    a: &Matrix,
    b: &Matrix,
    budget: usize,
) -> Result<Matrix, LinalgError> {
    let rows = a.rows() * b.rows();
    let cols = a.cols() * b.cols();
    let elems = (rows as u128) * (cols as u128);
    if elems > budget as u128 {
        return Err(LinalgError::ElementBudget { rows, cols, budget });
    }
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let aij = a.get(i, j);
            if aij == 0.0 {
                continue;
            }
            for k in 0..b.rows() {
                for l in 0..b.cols() {
                    out.set(i * b.rows() + k, j * b.cols() + l, aij * b.get(k, l));
                }
            }
        }
    }
    Ok(out)
}

/// Thin SVD `m = u · diag(sigma) · vᵀ` with `r = min(rows, cols)`.
///
/// `sigma` is sorted non-increasing; `u` (m×r) and `v` (n×r) have
/// orthonormal columns, including columns paired with zero singular values
/// (those are filled by basis completion).
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    /// Reassembles `u · diag(sigma) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let r = self.sigma.len();
        let mut out = Matrix::zeros(self.u.rows(), self.v.rows());
        for i in 0..self.u.rows() {
            for j in 0..self.v.rows() {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += self.u.get(i, k) * self.sigma[k] * self.v.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

/// Singular value decomposition by one-sided Jacobi rotations.
///
/// Deterministic for a fixed input: sweeps run in a fixed pair order and ties
/// resolve to whatever order the rotations produce.
pub fn svd(m: &Matrix) -> Result<SvdResult, LinalgError> {
    assert!(
        m.rows() >= 1 && m.cols() >= 1,
        "svd: empty matrix {}x{}",
        m.rows(),
        m.cols()
    );
    if m.rows() < m.cols() {
        // Work on the transpose and swap the factors back.
        let t = svd(&m.transpose())?;
        return Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }

    let rows = m.rows();
    let n = m.cols();
    let mut b = m.clone();
    let mut v = Matrix::identity(n);

    let mut converged = false;
    for _sweep in 0..MAX_SVD_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    let bp = b.get(i, p);
                    let bq = b.get(i, q);
                    app += bp * bp;
                    aqq += bq * bq;
                    apq += bp * bq;
                }
                if apq.abs() <= SVD_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let bp = b.get(i, p);
                    let bq = b.get(i, q);
                    b.set(i, p, c * bp - s * bq);
                    b.set(i, q, s * bp + c * bq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::SvdDidNotConverge {
            sweeps: MAX_SVD_SWEEPS,
        });
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..rows).map(|i| b.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &bj| norms[bj].partial_cmp(&norms[a]).unwrap());

    let mut sigma = Vec::with_capacity(n);
    let mut u = Matrix::zeros(rows, n);
    let mut v_sorted = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        sigma.push(norms[src]);
        for i in 0..rows {
            u.set(i, dst, b.get(i, src));
        }
        for i in 0..n {
            v_sorted.set(i, dst, v.get(i, src));
        }
    }

    // Normalize the left vectors; complete an orthonormal basis where the
    // singular value vanished and the column carries no direction.
    let tiny = f64::EPSILON * norms.iter().cloned().fold(1.0f64, f64::max);
    for j in 0..n {
        if sigma[j] > tiny {
            for i in 0..rows {
                u.set(i, j, u.get(i, j) / sigma[j]);
            }
        } else {
            sigma[j] = sigma[j].max(0.0);
            complete_column(&mut u, j);
        }
    }

    Ok(SvdResult {
        u,
        sigma,
        v: v_sorted,
    })
}

/// Replaces column `j` of `u` with a unit vector orthogonal to all other
/// columns, found by projecting out candidates e₀, e₁, … .
fn complete_column(u: &mut Matrix, j: usize) {
    let rows = u.rows();
    let cols = u.cols();
    for candidate in 0..rows {
        let mut col = vec![0.0; rows];
        col[candidate] = 1.0;
        // Two Gram-Schmidt passes for numerical cleanliness.
        for _ in 0..2 {
            for k in 0..cols {
                if k == j {
                    continue;
                }
                let dot: f64 = (0..rows).map(|i| col[i] * u.get(i, k)).sum();
                for i in 0..rows {
                    col[i] -= dot * u.get(i, k);
                }
            }
        }
        let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            for i in 0..rows {
                u.set(i, j, col[i] / norm);
            }
            return;
        }
    }
    // rows ≥ cols guarantees a candidate exists.
    unreachable!("basis completion failed");
}

/// SplitMix64: a 64-bit counter-based generator. Identical seeds give
/// identical streams on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below: empty range");
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (two uniforms per draw).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.normal() * std).collect();
        Matrix::new(rows, cols, data)
    }

    /// Derives an independent stream; used to decouple init, data, and mask
    /// sampling inside one seeded run.
    pub fn derive(&self, salt: u64) -> Rng {
        let mut r = Rng::new(self.state ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        r.next_u64();
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn kronecker_identity_left_factor() {
        let a = Matrix::from_rows(&[&[1.0]]);
        let b = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let k = kronecker(&a, &b).unwrap();
        assert_eq!(k, b);
    }

    #[test]
    fn kronecker_hand_expanded() {
        let a = Matrix::from_rows(&[&[1.0, 2.0]]);
        let b = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let k = kronecker(&a, &b).unwrap();
        let expected = Matrix::from_rows(&[&[1.0, 2.0, 2.0, 4.0], &[3.0, 4.0, 6.0, 8.0]]);
        assert_eq!(k, expected);
    }

    #[test]
    fn kronecker_unit_left_entry_preserves_norm() {
        let a = Matrix::from_rows(&[&[1.0, 0.0]]);
        let b = Matrix::from_rows(&[&[0.3, -1.2], &[2.5, 0.7]]);
        let k = kronecker(&a, &b).unwrap();
        assert!((k.frobenius_norm() - b.frobenius_norm()).abs() < 1e-15);
    }

    #[test]
    fn kronecker_respects_element_budget() {
        let a = Matrix::zeros(100, 100);
        let b = Matrix::zeros(100, 100);
        let err = kronecker_with_budget(&a, &b, 1_000_000).unwrap_err();
        match err {
            LinalgError::ElementBudget { rows, cols, budget } => {
                assert_eq!((rows, cols, budget), (10_000, 10_000, 1_000_000));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn kronecker_norm_factorizes_over_seeded_pairs() {
        let mut rng = Rng::new(7);
        for _ in 0..100 {
            let a = rng.gaussian_matrix(2, 3, 1.0);
            let b = rng.gaussian_matrix(4, 2, 1.0);
            let k = kronecker(&a, &b).unwrap();
            let lhs = k.frobenius_norm();
            let rhs = a.frobenius_norm() * b.frobenius_norm();
            assert!(
                (lhs - rhs).abs() <= 1e-12 * rhs.max(1.0),
                "norm identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn kronecker_is_bilinear_in_left_factor() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let alpha = rng.normal();
            let a = rng.gaussian_matrix(2, 2, 1.0);
            let b = rng.gaussian_matrix(3, 2, 1.0);
            let lhs = kronecker(&a.scale(alpha), &b).unwrap();
            let rhs = kronecker(&a, &b).unwrap().scale(alpha);
            assert!(max_abs_diff(&lhs, &rhs) <= 1e-12 * rhs.max_abs().max(1.0));
        }
    }

    #[test]
    fn frobenius_norm_basics() {
        assert_eq!(Matrix::zeros(3, 4).frobenius_norm(), 0.0);
        let m = Matrix::from_rows(&[&[3.0, 4.0]]);
        assert!((m.frobenius_norm() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn svd_diagonal() {
        let m = Matrix::from_rows(&[&[3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]);
        let r = svd(&m).unwrap();
        assert!((r.sigma[0] - 3.0).abs() < 1e-12);
        assert!((r.sigma[1] - 2.0).abs() < 1e-12);
        assert!((r.sigma[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_rank_one_outer_product() {
        let u = [1.0, 2.0, -1.0];
        let v = [0.5, -1.5];
        let m = Matrix::from_fn(3, 2, |i, j| u[i] * v[j]);
        let r = svd(&m).unwrap();
        let unorm = (u.iter().map(|x| x * x).sum::<f64>()).sqrt();
        let vnorm = (v.iter().map(|x| x * x).sum::<f64>()).sqrt();
        assert!((r.sigma[0] - unorm * vnorm).abs() < 1e-12);
        assert!(r.sigma[1].abs() < 1e-12);
        assert_orthonormal(&r.u, 1e-9);
        assert_orthonormal(&r.v, 1e-9);
    }

    #[test]
    fn svd_reconstructs_seeded_rectangular() {
        let mut rng = Rng::new(42);
        let m = rng.gaussian_matrix(5, 7, 1.0);
        let r = svd(&m).unwrap();
        let back = r.reconstruct();
        let err = m.sub(&back).frobenius_norm() / m.frobenius_norm();
        assert!(err <= 1e-10, "relative reconstruction error {err}");
    }

    #[test]
    fn svd_zero_matrix_completes_basis() {
        let m = Matrix::zeros(4, 3);
        let r = svd(&m).unwrap();
        assert!(r.sigma.iter().all(|&s| s == 0.0));
        assert_orthonormal(&r.u, 1e-12);
        assert_orthonormal(&r.v, 1e-12);
    }

    fn assert_orthonormal(m: &Matrix, tol: f64) {
        for a in 0..m.cols() {
            for b in a..m.cols() {
                let dot: f64 = (0..m.rows()).map(|i| m.get(i, a) * m.get(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (dot - want).abs() <= tol,
                    "columns {a},{b}: inner product {dot}, wanted {want}"
                );
            }
        }
    }

    #[test]
    fn svd_invariants_over_seeded_matrices() {
        let mut rng = Rng::new(2024);
        for case in 0..100 {
            let rows = 1 + rng.below(32);
            let cols = 1 + rng.below(32);
            let m = rng.gaussian_matrix(rows, cols, 1.0);
            let r = svd(&m).unwrap();
            for w in r.sigma.windows(2) {
                assert!(w[0] >= w[1], "sigma not sorted in case {case}");
            }
            assert_orthonormal(&r.u, 1e-9);
            assert_orthonormal(&r.v, 1e-9);
            let err = m.sub(&r.reconstruct()).frobenius_norm();
            assert!(
                err <= 1e-10 * m.frobenius_norm().max(1.0),
                "case {case}: reconstruction error {err}"
            );
        }
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(124);
        assert_ne!(Rng::new(123).next_u64(), c.next_u64());
    }

    #[test]
    fn rng_normal_moments_are_sane() {
        let mut rng = Rng::new(5);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
