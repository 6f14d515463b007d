//! Dense factorizations used by the design and GLM code.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value / pivot threshold: `max(m, n) * eps`.
pub fn rank_tolerance(m: usize, n: usize) -> f64 {
    m.max(n).max(1) as f64 * f64::EPSILON
}

/// Householder QR with column pivoting on the largest remaining column norm
/// (Businger-Golub), so `|R[k,k]|` is non-increasing and a small trailing
/// pivot signals rank deficiency.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// R in the upper triangle, zeros below.
    packed: DMatrix<f64>,
    /// R's diagonal.
    diag: Vec<f64>,
    /// Householder reflector for step k, acting on rows k..m.
    vectors: Vec<DVector<f64>>,
    /// `perm[k]` is the original column placed at position k.
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    pub fn new(mut a: DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let steps = m.min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut diag = Vec::with_capacity(steps);
        let mut vectors = Vec::with_capacity(steps);
        for k in 0..steps {
            let (best, _) = (k..n)
                .map(|j| (j, a.view((k, j), (m - k, 1)).norm_squared()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best != k {
                a.swap_columns(k, best);
                perm.swap(k, best);
            }
            let x: DVector<f64> = a.view((k, k), (m - k, 1)).column(0).clone_owned();
            let norm = x.norm();
            if norm == 0.0 {
                diag.push(0.0);
                vectors.push(DVector::zeros(m - k));
                continue;
            }
            let alpha = if x[0] > 0.0 { -norm } else { norm };
            let mut v = x;
            v[0] -= alpha;
            let vv = v.norm_squared();
            if vv > 0.0 {
                let tau = 2.0 / vv;
                for j in k + 1..n {
                    let mut col = a.column_mut(j);
                    let mut seg = col.rows_mut(k, m - k);
                    let s = tau * v.dot(&seg);
                    seg.axpy(-s, &v, 1.0);
                }
            }
            a[(k, k)] = alpha;
            for r in k + 1..m {
                a[(r, k)] = 0.0;
            }
            diag.push(alpha);
            vectors.push(v);
        }
        let tol = rank_tolerance(m, n) * diag.first().map_or(0.0, |d| d.abs());
        let rank = diag.iter().take_while(|d| d.abs() > tol).count();
        Self {
            packed: a,
            diag,
            vectors,
            perm,
            rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ncols(&self) -> usize {
        self.packed.ncols()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.ncols()
    }

    /// Original column indices that the pivoting pushed past the numerical rank.
    pub fn dependent_columns(&self) -> Vec<usize> {
        let mut cols = self.perm[self.rank..].to_vec();
        cols.sort_unstable();
        cols
    }

    fn apply_qt(&self, b: &mut DVector<f64>) {
        let m = b.len();
        for (k, v) in self.vectors.iter().enumerate() {
            let vv = v.norm_squared();
            if vv == 0.0 {
                continue;
            }
            let mut seg = b.rows_mut(k, m - k);
            let s = 2.0 / vv * v.dot(&seg);
            seg.axpy(-s, v, 1.0);
        }
    }

    fn back_substitute(&self, rhs: &mut DVector<f64>) {
        let n = self.ncols();
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for j in i + 1..n {
                s -= self.packed[(i, j)] * rhs[j];
            }
            rhs[i] = s / self.diag[i];
        }
    }

    /// Least-squares solution of `A x = b`; `None` when A is rank deficient.
    pub fn solve_least_squares(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        if !self.is_full_rank() || self.packed.nrows() < self.ncols() {
            return None;
        }
        let mut qtb = b.clone();
        self.apply_qt(&mut qtb);
        let n = self.ncols();
        let mut z = qtb.rows(0, n).clone_owned();
        self.back_substitute(&mut z);
        let mut x = DVector::zeros(n);
        for (k, &col) in self.perm.iter().enumerate() {
            x[col] = z[k];
        }
        Some(x)
    }

    /// `(A'A)^-1` in the original column order; `None` when A is rank deficient.
    pub fn inverse_gram(&self) -> Option<DMatrix<f64>> {
        if !self.is_full_rank() || self.packed.nrows() < self.ncols() {
            return None;
        }
        let n = self.ncols();
        // R^-1, upper triangular
        let mut rinv = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut e = DVector::zeros(n);
            e[c] = 1.0;
            self.back_substitute(&mut e);
            rinv.set_column(c, &e);
        }
        let inner = &rinv * rinv.transpose();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(self.perm[i], self.perm[j])] = inner[(i, j)];
            }
        }
        Some(out)
    }
}

/// Numerical rank with an orthonormal null-space basis, from the SVD.
#[derive(Debug, Clone)]
pub struct RankInfo {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// Orthonormal basis of `{v : X v = 0}`, one vector per column.
    pub null_space: Vec<DVector<f64>>,
}

/// Rank by the convention `sigma < max(m, n) * eps * sigma_max` counts as zero.
pub fn svd_rank(x: &DMatrix<f64>) -> RankInfo {
    let (m, n) = x.shape();
    // pad with zero rows so the SVD yields a full n x n right factor
    let padded = if m < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (m, n)).copy_from(x);
        p
    } else {
        x.clone()
    };
    let svd = padded.svd(false, true);
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let vt = svd.v_t.expect("requested V");
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let tol = rank_tolerance(m, n) * smax;
    let mut null_space = Vec::new();
    let mut rank = 0;
    for (idx, &s) in sv.iter().enumerate() {
        if s > tol {
            rank += 1;
        } else {
            null_space.push(vt.row(idx).transpose());
        }
    }
    let mut sorted = sv;
    sorted.sort_by(|a, b| b.total_cmp(a));
    RankInfo {
        rank,
        singular_values: sorted,
        null_space,
    }
}
