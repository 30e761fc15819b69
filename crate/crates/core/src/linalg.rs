//! Householder QR and dense least squares.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// How [`least_squares`] treats a (numerically) rank-deficient design matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankPolicy {
    /// Fail on the first column `j` whose distance from the span of the
    /// preceding columns is at most `rtol` times its own norm.
    Error { rtol: f64 },
    /// Minimum-norm solution from the SVD of the triangular factor,
    /// discarding singular values below `rcond` times the largest.
    MinimumNorm { rcond: f64 },
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::Error { rtol: 1e-10 }
    }
}

/// Compact Householder factorization `A = Q R` of an `m x n` matrix, `m >= n`.
#[derive(Debug, Clone)]
pub struct Qr {
    /// R in the upper triangle, reflector tails below the diagonal.
    packed: DMatrix<f64>,
    /// Reflector heads (the diagonal element of each `v`).
    heads: Vec<f64>,
    /// `2 / vᵀv` per reflector, zero when the column was already reduced.
    betas: Vec<f64>,
    col_norms: Vec<f64>,
}

impl Qr {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let (m, n) = a.shape();
        if m < n {
            return Err(Error::Shape(format!(
                "least squares needs rows >= columns, got {m} x {n}"
            )));
        }
        let col_norms = (0..n).map(|j| a.column(j).norm()).collect();
        let mut packed = a.clone();
        let mut heads = vec![0.0; n];
        let mut betas = vec![0.0; n];
        let data = packed.as_mut_slice();
        for j in 0..n {
            let (done, rest) = data.split_at_mut((j + 1) * m);
            let col = &mut done[j * m..];
            let norm = col[j..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                heads[j] = 0.0;
                betas[j] = 0.0;
                col[j] = 0.0;
                continue;
            }
            let alpha = if col[j] > 0.0 { -norm } else { norm };
            let head = col[j] - alpha;
            let vtv = head * head + col[j + 1..].iter().map(|v| v * v).sum::<f64>();
            let beta = 2.0 / vtv;
            heads[j] = head;
            betas[j] = beta;
            col[j] = alpha;
            let tail = &col[j + 1..];
            for other in rest.chunks_exact_mut(m) {
                let dot = head * other[j]
                    + tail.iter().zip(&other[j + 1..]).map(|(v, x)| v * x).sum::<f64>();
                let s = beta * dot;
                other[j] -= s * head;
                for (x, v) in other[j + 1..].iter_mut().zip(tail) {
                    *x -= s * v;
                }
            }
        }
        Ok(Self {
            packed,
            heads,
            betas,
            col_norms,
        })
    }

    pub fn nrows(&self) -> usize {
        self.packed.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.packed.ncols()
    }

    /// Diagonal of R.
    pub fn r_diagonal(&self) -> Vec<f64> {
        (0..self.ncols()).map(|j| self.packed[(j, j)]).collect()
    }

    /// Upper-triangular `n x n` factor.
    pub fn r(&self) -> DMatrix<f64> {
        let n = self.ncols();
        DMatrix::from_fn(n, n, |i, j| if i <= j { self.packed[(i, j)] } else { 0.0 })
    }

    /// First column that is dependent on its predecessors at tolerance `rtol`.
    pub fn first_dependent(&self, rtol: f64) -> Option<usize> {
        (0..self.ncols()).find(|&j| {
            let cn = self.col_norms[j];
            cn == 0.0 || self.packed[(j, j)].abs() <= rtol * cn
        })
    }

    /// Overwrites `b` with `Qᵀ b`.
    pub fn apply_qt(&self, b: &mut DMatrix<f64>) {
        let m = self.nrows();
        assert_eq!(b.nrows(), m, "rhs row count");
        let q = self.packed.as_slice();
        for j in 0..self.ncols() {
            let beta = self.betas[j];
            if beta == 0.0 {
                continue;
            }
            let head = self.heads[j];
            let tail = &q[j * m + j + 1..(j + 1) * m];
            for col in b.as_mut_slice().chunks_exact_mut(m) {
                let dot =
                    head * col[j] + tail.iter().zip(&col[j + 1..]).map(|(v, x)| v * x).sum::<f64>();
                let s = beta * dot;
                col[j] -= s * head;
                for (x, v) in col[j + 1..].iter_mut().zip(tail) {
                    *x -= s * v;
                }
            }
        }
    }

    /// Solves `min ‖A X − B‖` column by column.
    pub fn solve(&self, b: &DMatrix<f64>, policy: RankPolicy) -> Result<DMatrix<f64>> {
        let n = self.ncols();
        if let RankPolicy::Error { rtol } = policy {
            if let Some(column) = self.first_dependent(rtol) {
                return Err(Error::RankDeficient {
                    column,
                    name: format!("column {column}"),
                });
            }
        }
        let mut qtb = b.clone();
        self.apply_qt(&mut qtb);
        let top = qtb.rows(0, n).into_owned();
        match policy {
            RankPolicy::Error { .. } => Ok(self.back_substitute(top)),
            RankPolicy::MinimumNorm { rcond } => {
                let svd = self.r().svd(true, true);
                let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
                let smax = svd.singular_values.max();
                let mut uty = u.transpose() * top;
                for (i, &s) in svd.singular_values.iter().enumerate() {
                    let inv = if s > rcond * smax && s > 0.0 { 1.0 / s } else { 0.0 };
                    uty.row_mut(i).scale_mut(inv);
                }
                Ok(vt.transpose() * uty)
            }
        }
    }

    fn back_substitute(&self, mut y: DMatrix<f64>) -> DMatrix<f64> {
        let n = self.ncols();
        for mut col in y.column_iter_mut() {
            for i in (0..n).rev() {
                let mut acc = col[i];
                for k in i + 1..n {
                    acc -= self.packed[(i, k)] * col[k];
                }
                col[i] = acc / self.packed[(i, i)];
            }
        }
        y
    }
}

/// Least-squares solution of `A X ≈ B` via Householder QR.
pub fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>, policy: RankPolicy) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "design has {} rows, targets have {}",
            a.nrows(),
            b.nrows()
        )));
    }
    Qr::new(a)?.solve(b, policy)
}
