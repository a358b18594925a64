//! One-layer initializers: vertex component analysis (VCA) for endmember
//! extraction and simplex-constrained least squares for abundances.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::dirichlet::{DirichletParam, BETA_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::top_eigenvalue_psd;
use crate::model::{ModelDims, PixelMatrix};
use crate::rng::{derive_seed, seeded};
use crate::simplex::project_in_place;

/// Selected vertices of the data cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct VcaResult {
    /// `M × k` matrix of the selected data columns.
    pub endmembers: DMatrix<f64>,
    /// Column indices of `Y` that were selected, in selection order.
    pub indices: Vec<usize>,
    /// Estimated SNR in dB (`+inf` for noiseless data).
    pub snr_db: f64,
    /// Whether the projective projection branch was used.
    pub projective: bool,
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

fn argmax_abs(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v.abs() > best_val {
            best_val = v.abs();
            best = i;
        }
    }
    best
}

/// Vertex component analysis.
///
/// Estimates the signal subspace from the mean-removed data, chooses between
/// projective projection and a lifted `k-1` dimensional projection by the
/// SNR threshold `15 + 10 log10(k)` dB, then selects `k` pixels by repeated
/// projection onto random directions orthogonal to the vertices found so far.
/// Ties in the argmax go to the lowest pixel index.
pub fn vca(y: &PixelMatrix, k: usize, seed: u64) -> Result<VcaResult> {
    let data = y.data();
    let (m, n) = (data.nrows(), data.ncols());
    if k == 0 {
        return Err(Error::InvalidInput("VCA needs at least one endmember".into()));
    }
    if k > m.min(n) {
        return Err(Error::InvalidInput(format!(
            "cannot extract {k} endmembers from {m} bands and {n} pixels"
        )));
    }
    if data.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidInput("VCA input is identically zero".into()));
    }

    let mean = data.column_mean();
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let nf = n as f64;

    if k == 1 {
        let (_, u) = sorted_eigen(data * data.transpose() / nf);
        let dir = u.column(0);
        let idx = argmax_abs(data.column_iter().map(|c| dir.dot(&c)));
        return Ok(VcaResult {
            endmembers: data.columns(idx, 1).into_owned(),
            indices: vec![idx],
            snr_db: f64::INFINITY,
            projective: true,
        });
    }

    let (values, u) = sorted_eigen(&centered * centered.transpose() / nf);
    let top = values[0].max(0.0);
    let rank = values.iter().filter(|&&v| v > top * 1e-10 && v > 0.0).count();
    if rank + 1 < k {
        return Err(Error::InsufficientDiversity(format!(
            "mean-removed data has rank {rank}, but {k} vertices need an affine span of dimension {}",
            k - 1
        )));
    }

    let uk = u.columns(0, k);
    let xp = uk.transpose() * &centered;
    let power_y = data.norm_squared() / nf;
    let power_x = xp.norm_squared() / nf + mean.norm_squared();
    let snr_db = estimate_snr(power_y, power_x, k, m);
    let threshold = 15.0 + 10.0 * (k as f64).log10();

    let projected = if snr_db > threshold {
        projective_projection(data, k)
    } else {
        None
    };
    let projective = projected.is_some();
    let cloud = match projected {
        Some(c) => c,
        None => {
            let d = k - 1;
            let x = xp.rows(0, d).into_owned();
            let c = x.column_iter().map(|col| col.norm()).fold(0.0, f64::max);
            let mut lifted = DMatrix::from_element(k, n, c);
            lifted.rows_mut(0, d).copy_from(&x);
            lifted
        }
    };

    let mut rng = seeded(seed);
    let mut indices = Vec::with_capacity(k);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let span: Vec<DVector<f64>> = if i == 0 {
            let mut e = DVector::zeros(k);
            e[k - 1] = 1.0;
            vec![e]
        } else {
            basis.clone()
        };
        let f = random_orthogonal_direction(&span, k, &mut rng)?;
        let idx = argmax_abs(cloud.column_iter().map(|c| f.dot(&c)));
        indices.push(idx);
        push_orthonormal(&mut basis, cloud.column(idx).into_owned());
    }

    let endmembers = DMatrix::from_fn(m, k, |r, c| data[(r, indices[c])]);
    Ok(VcaResult {
        endmembers,
        indices,
        snr_db,
        projective,
    })
}

fn estimate_snr(power_y: f64, power_x: f64, k: usize, m: usize) -> f64 {
    let noise = power_y - power_x;
    if noise <= power_y * 1e-13 {
        return f64::INFINITY;
    }
    let signal = power_x - (k as f64 / m as f64) * power_y;
    if signal <= 0.0 {
        return f64::NEG_INFINITY;
    }
    10.0 * (signal / noise).log10()
}

/// Projects onto the top-`k` uncentered subspace and rescales every pixel onto
/// the hyperplane `xᵀu = 1`; `None` if some pixel has a non-positive scale.
fn projective_projection(data: &DMatrix<f64>, k: usize) -> Option<DMatrix<f64>> {
    let n = data.ncols();
    let (_, u) = sorted_eigen(data * data.transpose() / n as f64);
    let mut x = u.columns(0, k).transpose() * data;
    let centroid = x.column_mean();
    for mut col in x.column_iter_mut() {
        let scale = col.dot(&centroid);
        if !(scale > 0.0) {
            return None;
        }
        col /= scale;
    }
    Some(x)
}

/// Gram-Schmidt step; near-dependent vectors are skipped.
fn push_orthonormal(basis: &mut Vec<DVector<f64>>, mut v: DVector<f64>) {
    let scale = v.norm();
    for _ in 0..2 {
        for q in basis.iter() {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
    }
    let norm = v.norm();
    if norm > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        basis.push(v / norm);
    }
}

fn random_orthogonal_direction(
    span: &[DVector<f64>],
    k: usize,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    for _ in 0..64 {
        let mut f = DVector::from_fn(k, |_, _| rng.random::<f64>());
        for _ in 0..2 {
            for q in span {
                let proj = q.dot(&f);
                f.axpy(-proj, q, 1.0);
            }
        }
        let norm = f.norm();
        if norm > 1e-12 {
            return Ok(f / norm);
        }
    }
    Err(Error::InsufficientDiversity(
        "selected vertices already span the projected subspace".into(),
    ))
}

/// Simplex-constrained least squares `min ‖y − A s‖² s.t. s ≥ 0, Σs = 1`,
/// solved by restarted accelerated projected gradient.
#[derive(Debug, Clone)]
pub struct SclsSolver {
    a: DMatrix<f64>,
    gram: DMatrix<f64>,
    lipschitz: f64,
    max_iters: usize,
    tol: f64,
}

impl SclsSolver {
    pub fn new(a: DMatrix<f64>) -> Self {
        let gram = a.transpose() * &a;
        let lipschitz = top_eigenvalue_psd(&gram, 50, 1e-10);
        Self {
            a,
            gram,
            lipschitz,
            max_iters: 1000,
            tol: 1e-10,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// `½‖y − A s‖²`.
    pub fn objective(&self, y: &[f64], s: &[f64]) -> f64 {
        let r = DVector::from_column_slice(y) - &self.a * DVector::from_column_slice(s);
        0.5 * r.norm_squared()
    }

    /// `‖Π(s − ∇/L) − s‖`, zero exactly at the constrained minimizer.
    pub fn kkt_residual(&self, y: &[f64], s: &[f64]) -> f64 {
        let b = self.a.tr_mul(&DVector::from_column_slice(y));
        let s = DVector::from_column_slice(s);
        self.step_residual(&b, &s)
    }

    fn step_residual(&self, b: &DVector<f64>, s: &DVector<f64>) -> f64 {
        let grad = &self.gram * s - b;
        let mut p = s - grad / self.lipschitz;
        project_in_place(p.as_mut_slice());
        (p - s).norm()
    }

    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let k = self.a.ncols();
        if k == 1 {
            return vec![1.0];
        }
        if !(self.lipschitz > 0.0) {
            return vec![1.0 / k as f64; k];
        }
        let b = self.a.tr_mul(&DVector::from_column_slice(y));
        let step = 1.0 / self.lipschitz;
        let mut x = DVector::from_element(k, 1.0 / k as f64);
        let mut z = x.clone();
        let mut t = 1.0f64;
        for _ in 0..self.max_iters {
            let grad = &self.gram * &z - &b;
            let mut next = &z - grad * step;
            project_in_place(next.as_mut_slice());
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            if (&z - &next).dot(&(&next - &x)) > 0.0 {
                // momentum points uphill: restart
                z = next.clone();
                t = 1.0;
            } else {
                z = &next + (&next - &x) * ((t - 1.0) / t_next);
                t = t_next;
            }
            x = next;
            if self.step_residual(&b, &x) < self.tol {
                break;
            }
        }
        x.as_slice().to_vec()
    }
}

/// Convenience wrapper for a single pixel.
pub fn scls(y: &[f64], a: &DMatrix<f64>) -> Vec<f64> {
    SclsSolver::new(a.clone()).solve(y)
}

/// Solves simplex-constrained least squares for every pixel in parallel; `K × N`.
pub fn scls_all(y: &PixelMatrix, a: &DMatrix<f64>) -> DMatrix<f64> {
    let solver = SclsSolver::new(a.clone());
    let cols: Vec<Vec<f64>> = (0..y.pixels())
        .into_par_iter()
        .map(|n| solver.solve(y.data().column(n).as_slice()))
        .collect();
    DMatrix::from_fn(a.ncols(), y.pixels(), |i, j| cols[j][i])
}

/// Starting point of the variational fit.
#[derive(Debug, Clone, PartialEq)]
pub struct InitResult {
    pub a1: DMatrix<f64>,
    /// Initial Dirichlet parameters, `KP × N`.
    pub beta: DMatrix<f64>,
    /// Mixing layers `S1 … S_{P-1}` drawn column-wise from `Dir(1)`.
    pub layers: Vec<DMatrix<f64>>,
    pub seed: u64,
    /// Pixel indices chosen by VCA for the core basis.
    pub core_indices: Vec<usize>,
    /// Pixel indices chosen by VCA for the expanded abundance estimate.
    pub expanded_indices: Vec<usize>,
}

/// Core basis from VCA with `K1` vertices, clipped at zero; abundances from simplex-constrained
/// least squares against a second VCA run with `KP` vertices, turned into
/// Dirichlet parameters `max(KP · ŝ, β_floor)`; mixing layers sampled from
/// the flat Dirichlet.
pub fn init_all(y: &PixelMatrix, dims: &ModelDims, seed: u64) -> Result<InitResult> {
    check_dims_against(y, dims)?;
    let k1 = dims.core();
    let kp = dims.expanded();

    let core = vca(y, k1, seed)?;
    let expanded = if dims.depth() == 1 {
        core.clone()
    } else {
        vca(y, kp, derive_seed(seed, 1))?
    };
    let s_hat = scls_all(y, &expanded.endmembers);
    let c0 = kp as f64;
    let beta = s_hat.map(|s| (c0 * s).max(BETA_FLOOR));

    let mut rng = seeded(derive_seed(seed, 2));
    let layers = dims
        .layers
        .windows(2)
        .map(|w| {
            let flat = DirichletParam::uniform(w[0]);
            let mut s = DMatrix::zeros(w[0], w[1]);
            for j in 0..w[1] {
                let draw = flat.sample(&mut rng);
                s.column_mut(j).copy_from_slice(&draw);
            }
            s
        })
        .collect();

    Ok(InitResult {
        a1: core.endmembers.map(|v| v.max(0.0)),
        beta,
        layers,
        seed,
        core_indices: core.indices,
        expanded_indices: expanded.indices,
    })
}

pub(crate) fn check_dims_against(y: &PixelMatrix, dims: &ModelDims) -> Result<()> {
    crate::model::validate_dims(dims)?;
    if dims.bands != y.bands() || dims.pixels != y.pixels() {
        return Err(Error::InvalidDims(format!(
            "dims describe {}x{} data but the input is {}x{}",
            dims.bands,
            dims.pixels,
            y.bands(),
            y.pixels()
        )));
    }
    Ok(())
}
