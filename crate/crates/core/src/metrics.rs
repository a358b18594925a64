//! Evaluation metrics: permutation-aligned endmember MSE, optimal
//! assignment, SNR and singular value spectra.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimal assignment with dual potentials; `row_to_col[i]` is row `i`'s column.
struct Assignment {
    total: f64,
    row_to_col: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Shortest-augmenting-path Hungarian method on the sub-matrix `rows × cols`.
fn solve_assignment(cost: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> Assignment {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| cost[(rows[i - 1], cols[j - 1])];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| a(i + 1, row_to_col[i] + 1)).sum();
    Assignment {
        total,
        row_to_col,
        u,
        v,
    }
}

/// Minimum-cost permutation for a square cost matrix; `perm[i]` is the column
/// assigned to row `i`.
///
/// Among optimal permutations (costs equal within `1e-12` relative) the
/// lexicographically smallest is returned.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.shape();
    if n != m {
        return Err(Error::Dimension(format!("cost matrix must be square, got {n}x{m}")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("cost matrix entries must be finite".into()));
    }
    let scale = cost.iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * (1.0 + scale * n as f64);

    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut perm = Vec::with_capacity(n);
    for i in 0..n {
        let rows: Vec<usize> = (i..n).collect();
        let best = solve_assignment(cost, &rows, &free_cols);
        let mut chosen = best.row_to_col[0];
        // candidates must be tight under the optimal dual (complementary slackness)
        for (pos, &col) in free_cols.iter().enumerate() {
            if pos >= chosen {
                break;
            }
            let reduced = cost[(i, col)] - best.u[1] - best.v[pos + 1];
            if reduced > tol {
                continue;
            }
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != col).collect();
            let rest = if rows.len() > 1 {
                solve_assignment(cost, &rows[1..], &rest_cols).total
            } else {
                0.0
            };
            if cost[(i, col)] + rest <= best.total + tol {
                chosen = pos;
                break;
            }
        }
        perm.push(free_cols.remove(chosen));
    }
    Ok(perm)
}

/// Result of permutation-aligned endmember comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// `permutation[i]` is the ground-truth column matched to estimated column `i`.
    pub permutation: Vec<usize>,
    pub mse: f64,
    /// Squared error of every ground-truth column against its matched estimate.
    pub column_errors: Vec<f64>,
}

/// `‖A_est Π − A★‖²_F / (K ‖A★‖²_F)` with `Π` the optimal column assignment
/// on squared Euclidean distances.
pub fn aligned_mse(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<AlignmentResult> {
    if est.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "estimate is {:?} but ground truth is {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    let k = truth.ncols();
    let truth_norm = truth.norm_squared();
    if k == 0 || !(truth_norm > 0.0) {
        return Err(Error::InvalidInput("ground truth must be a non-zero matrix".into()));
    }
    let cost = DMatrix::from_fn(k, k, |i, j| (est.column(i) - truth.column(j)).norm_squared());
    let permutation = hungarian(&cost)?;
    let mut column_errors = vec![0.0; k];
    for (i, &j) in permutation.iter().enumerate() {
        column_errors[j] = cost[(i, j)];
    }
    let mse = column_errors.iter().sum::<f64>() / (k as f64 * truth_norm);
    Ok(AlignmentResult {
        permutation,
        mse,
        column_errors,
    })
}

/// `10 log10(‖AZ‖²_F / (σ² M N))`.
pub fn snr_db(a: &DMatrix<f64>, z: &DMatrix<f64>, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidInput(format!("noise variance {sigma2} must be positive")));
    }
    if a.ncols() != z.nrows() {
        return Err(Error::Dimension(format!(
            "cannot multiply {:?} by {:?}",
            a.shape(),
            z.shape()
        )));
    }
    let signal = (a * z).norm_squared();
    Ok(10.0 * (signal / (sigma2 * (a.nrows() * z.ncols()) as f64)).log10())
}

/// Singular values in descending order, by one-sided Jacobi rotations.
pub fn singular_spectrum(b: &DMatrix<f64>) -> Vec<f64> {
    let mut u = if b.nrows() >= b.ncols() {
        b.clone()
    } else {
        b.transpose()
    };
    let k = u.ncols();
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..u.nrows() {
                    let (x, y) = (u[(r, p)], u[(r, q)]);
                    u[(r, p)] = c * x - s * y;
                    u[(r, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut values: Vec<f64> = u.column_iter().map(|c| c.norm()).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}
