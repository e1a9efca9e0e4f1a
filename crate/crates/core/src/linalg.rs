//! Dense row-major matrices with just enough linear algebra for low-rank
//! adapter aggregation: products, weighted sums, and a one-sided Jacobi
//! singular value decomposition with balanced-factor truncation.

#![allow(clippy::needless_range_loop)]

use thiserror::Error;

/// Maximum number of Jacobi sweeps before giving up. Exceeding this is a
/// hard error, never a silent best-effort result.
pub const JACOBI_MAX_SWEEPS: usize = 60;

/// Column-pair dot products must fall below this fraction of the squared
/// Frobenius norm for the sweep loop to stop.
pub const JACOBI_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("jacobi svd did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

/// Dense row-major matrix of `f64`. Both dimensions are at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix, LinalgError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LinalgError::InvalidArgument {
                op: "from_vec",
                msg: format!("{} values for a {}x{} matrix", data.len(), rows, cols),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested row slices; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Matrix {
        assert!(!rows.is_empty() && !rows[0].is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Standard matrix product; `self.cols` must equal `rhs.rows`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: rhs.rows,
                rhs_cols: rhs.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lrow = &self.data[i * self.cols..(i + 1) * self.cols];
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &lv) in lrow.iter().enumerate() {
                if lv == 0.0 {
                    continue;
                }
                let rrow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &rv) in orow.iter_mut().zip(rrow.iter()) {
                    *o += lv * rv;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_check("add", rhs)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_check("sub", rhs)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> Result<f64, LinalgError> {
        self.zip_check("max_abs_diff", rhs)?;
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn zip_check(&self, op: &'static str, rhs: &Matrix) -> Result<(), LinalgError> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::ShapeMismatch {
                op,
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: rhs.rows,
                rhs_cols: rhs.cols,
            });
        }
        Ok(())
    }
}

/// Element-wise `sum_k weights[k] * mats[k]`.
///
/// Zero-weight terms are skipped and the first non-zero term initializes the
/// accumulator, so one-hot weights return the selected matrix bit-for-bit.
pub fn weighted_sum(mats: &[Matrix], weights: &[f64]) -> Result<Matrix, LinalgError> {
    if mats.is_empty() {
        return Err(LinalgError::EmptyInput("weighted_sum"));
    }
    if mats.len() != weights.len() {
        return Err(LinalgError::InvalidArgument {
            op: "weighted_sum",
            msg: format!("{} matrices but {} weights", mats.len(), weights.len()),
        });
    }
    if !weights.iter().all(|w| w.is_finite()) {
        return Err(LinalgError::NonFinite("weighted_sum weights"));
    }
    let shape = mats[0].shape();
    for m in &mats[1..] {
        if m.shape() != shape {
            return Err(LinalgError::ShapeMismatch {
                op: "weighted_sum",
                lhs_rows: shape.0,
                lhs_cols: shape.1,
                rhs_rows: m.rows,
                rhs_cols: m.cols,
            });
        }
    }

    let mut acc: Option<Matrix> = None;
    for (m, &w) in mats.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        match acc.as_mut() {
            None => acc = Some(m.scale(w)),
            Some(a) => {
                for (av, mv) in a.data.iter_mut().zip(&m.data) {
                    *av += w * mv;
                }
            }
        }
    }
    Ok(acc.unwrap_or_else(|| Matrix::zeros(shape.0, shape.1)))
}

/// Thin SVD: `u` is m x k with orthonormal columns, `sigma` holds k
/// non-increasing non-negative values, `vt` is k x n with orthonormal rows,
/// where k = min(m, n).
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    /// U * diag(sigma) * V^T.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.sigma.len();
        let mut out = Matrix::zeros(self.u.rows(), self.vt.cols());
        for i in 0..out.rows {
            for j in 0..out.cols {
                let mut s = 0.0;
                for t in 0..k {
                    s += self.u.at(i, t) * self.sigma[t] * self.vt.at(t, j);
                }
                out.data[i * out.cols + j] = s;
            }
        }
        out
    }
}

/// One-sided Jacobi SVD.
///
/// Column pairs of a working copy are rotated until every pairwise dot
/// product falls below `JACOBI_REL_TOL` times the squared Frobenius norm of
/// the input. Wide matrices are transposed internally. The largest-magnitude
/// entry of each left singular vector is forced positive so repeated runs
/// produce identical output.
pub fn svd(m: &Matrix) -> Result<SvdResult, LinalgError> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite("svd input"));
    }
    if m.rows >= m.cols {
        svd_tall(m)
    } else {
        let r = svd_tall(&m.transpose())?;
        // M^T = U S V^T  =>  M = V S U^T
        Ok(SvdResult {
            u: r.vt.transpose(),
            sigma: r.sigma,
            vt: r.u.transpose(),
        })
    }
}

fn svd_tall(m: &Matrix) -> Result<SvdResult, LinalgError> {
    let (rows, cols) = m.shape();
    debug_assert!(rows >= cols);
    // Column-major working copy: cols_data[j] is the j-th column.
    let mut work: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.at(i, j)).collect())
        .collect();
    let mut v = Matrix::identity(cols);

    let frob2: f64 = m.data.iter().map(|x| x * x).sum();
    let threshold = JACOBI_REL_TOL * frob2;

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut any_rotation = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let mut gamma = 0.0;
                for r in 0..rows {
                    gamma += work[i][r] * work[j][r];
                }
                if gamma.abs() <= threshold {
                    continue;
                }
                any_rotation = true;
                let mut alpha = 0.0;
                let mut beta = 0.0;
                for r in 0..rows {
                    alpha += work[i][r] * work[i][r];
                    beta += work[j][r] * work[j][r];
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let wi = work[i][r];
                    let wj = work[j][r];
                    work[i][r] = c * wi - s * wj;
                    work[j][r] = s * wi + c * wj;
                }
                for r in 0..cols {
                    let vi = v.at(r, i);
                    let vj = v.at(r, j);
                    v.set(r, i, c * vi - s * vj);
                    v.set(r, j, s * vi + c * vj);
                }
            }
        }
        if !any_rotation {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    // Singular values are the column norms; sort descending (stable).
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = work
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

    let mut u = Matrix::zeros(rows, cols);
    let mut sigma = vec![0.0; cols];
    let mut vt = Matrix::zeros(cols, cols);
    let mut zero_cols: Vec<usize> = Vec::new();
    for (slot, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma[slot] = s;
        for r in 0..cols {
            vt.set(slot, r, v.at(r, src));
        }
        if s > 1e-150 {
            for r in 0..rows {
                u.set(r, slot, work[src][r] / s);
            }
        } else {
            sigma[slot] = 0.0;
            zero_cols.push(slot);
        }
    }

    // Orthonormal completion for zero singular values: Gram-Schmidt canonical
    // basis vectors against the columns already in place.
    for &slot in &zero_cols {
        let mut filled = false;
        for cand in 0..rows {
            let mut col = vec![0.0; rows];
            col[cand] = 1.0;
            for other in 0..cols {
                if other == slot || (sigma[other] == 0.0 && other > slot) {
                    continue;
                }
                let mut dot = 0.0;
                for r in 0..rows {
                    dot += col[r] * u.at(r, other);
                }
                for r in 0..rows {
                    col[r] -= dot * u.at(r, other);
                }
            }
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for r in 0..rows {
                    u.set(r, slot, col[r] / norm);
                }
                filled = true;
                break;
            }
        }
        debug_assert!(filled, "orthonormal completion failed");
    }

    // Sign convention: largest-magnitude entry of each U column positive.
    for j in 0..cols {
        let mut best = 0usize;
        let mut best_abs = 0.0;
        for r in 0..rows {
            let a = u.at(r, j).abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if u.at(best, j) < 0.0 {
            for r in 0..rows {
                let x = u.at(r, j);
                u.set(r, j, -x);
            }
            for c in 0..vt.cols() {
                let x = vt.at(j, c);
                vt.set(j, c, -x);
            }
        }
    }

    Ok(SvdResult { u, sigma, vt })
}

/// Keep the top `min(rank, k)` singular triplets and split the spectrum
/// evenly: B = U_r * sqrt(S_r), A = sqrt(S_r) * V_r^T, so B*A is the best
/// rank-`rank` Frobenius approximation of the decomposed matrix and both
/// factors carry comparable norms.
pub fn truncate_svd(s: &SvdResult, rank: usize) -> Result<(Matrix, Matrix), LinalgError> {
    if rank == 0 {
        return Err(LinalgError::InvalidArgument {
            op: "truncate_svd",
            msg: "rank must be >= 1".to_string(),
        });
    }
    let keep = rank.min(s.sigma.len());
    let d = s.u.rows();
    let dp = s.vt.cols();
    let mut b = Matrix::zeros(d, keep);
    let mut a = Matrix::zeros(keep, dp);
    for t in 0..keep {
        let root = s.sigma[t].sqrt();
        for i in 0..d {
            b.set(i, t, s.u.at(i, t) * root);
        }
        for j in 0..dp {
            a.set(t, j, root * s.vt.at(t, j));
        }
    }
    Ok((b, a))
}
