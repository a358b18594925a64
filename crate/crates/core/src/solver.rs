//! Variational maximum-likelihood fitting of the multilayer model.
//!
//! Each pixel's abundance vector gets a Dirichlet variational posterior
//! `q_n = Dir(β_n)`. With `B` the expanded endmembers, `m_n` and `P_n` the
//! first and second moments of `q_n`, the lower bound is
//!
//! ```text
//! r_n = ‖y_n‖² − 2 y_nᵀ B m_n + tr(BᵀB P_n)
//! F   = (1/N) Σ_n [ −(M/2) log(2πσ²) − r_n / (2σ²) + log Γ(KP) + H(β_n) ]
//! ```
//!
//! [`fit`] maximizes `F` by alternating: projected ascent with Armijo
//! backtracking on every `β_n`, one monotone accelerated proximal gradient pass on `A1` and on
//! each mixing layer in order, then the closed-form noise variance. Every
//! sub-step leaves `F` non-decreasing.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{entropy_of, DirichletParam, BETA_FLOOR};
use crate::error::{Error, Result};
use crate::init::{check_dims_against, init_all, InitResult};
use crate::linalg::{frob_dot, top_eigenvalue_psd};
use crate::model::{compose_expanded, AbundanceMatrix, FactorStack, ModelDims, PixelMatrix};
use crate::simplex::project_columns;
use crate::special::{ln_gamma_unchecked, tetragamma_unchecked, trigamma_unchecked};

const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const MAX_SHIFTS: usize = 40;

/// Per-pixel Dirichlet parameters, `KP × N`, every entry at least [`BETA_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    beta: DMatrix<f64>,
}

impl VariationalParams {
    pub fn new(mut beta: DMatrix<f64>) -> Result<Self> {
        if beta.nrows() == 0 || beta.ncols() == 0 {
            return Err(Error::InvalidInput("variational parameters must be non-empty".into()));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidInput("variational parameters must be finite".into()));
        }
        beta.apply(|b| *b = b.max(BETA_FLOOR));
        Ok(Self { beta })
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn components(&self) -> usize {
        self.beta.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.beta.ncols()
    }

    pub fn param(&self, n: usize) -> DirichletParam {
        DirichletParam::new(self.beta.column(n).iter().copied().collect())
            .expect("stored parameters are finite")
    }

    /// Posterior-mean abundances `m_n = β_n / Σβ_n`.
    pub fn means(&self) -> AbundanceMatrix {
        let mut m = self.beta.clone();
        for mut c in m.column_iter_mut() {
            let s = c.sum();
            c /= s;
        }
        AbundanceMatrix::new(m).expect("normalized columns lie on the simplex")
    }

    /// Per-pixel mean columns and the summed second moment `Σ_n P_n`.
    fn moments(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let k = self.components();
        let means = self.means().into_inner();
        let mut second = DMatrix::zeros(k, k);
        for col in self.beta.column_iter() {
            let s = col.sum();
            let c = s * (s + 1.0);
            for j in 0..k {
                for i in 0..k {
                    second[(i, j)] += col[i] * col[j] / c;
                }
                second[(j, j)] += col[j] / c;
            }
        }
        (means, second)
    }
}

/// Search direction of the per-pixel `β` ascent steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BetaMethod {
    /// Plain gradient direction.
    #[default]
    Gradient,
    /// Newton direction on the free coordinates, curvature shifted to be
    /// negative definite.
    Newton,
}

/// Tunables of the alternating maximization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_outer_iters: usize,
    pub beta_steps_per_outer: usize,
    pub apg_iters_per_factor: usize,
    /// Stop when the relative ELBO gain of an outer iteration falls below this; 0 disables.
    pub rel_elbo_tol: f64,
    pub sigma2_floor: f64,
    pub seed: u64,
    #[serde(default)]
    pub beta_method: BetaMethod,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 100,
            beta_steps_per_outer: 10,
            apg_iters_per_factor: 1,
            rel_elbo_tol: 1e-7,
            sigma2_floor: 1e-12,
            seed: 0,
            beta_method: BetaMethod::Gradient,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 || self.beta_steps_per_outer == 0 || self.apg_iters_per_factor == 0 {
            return Err(Error::InvalidInput("iteration counts must be at least 1".into()));
        }
        if !(self.rel_elbo_tol >= 0.0) || !(self.sigma2_floor > 0.0) {
            return Err(Error::InvalidInput(
                "tolerance must be nonnegative and the variance floor positive".into(),
            ));
        }
        Ok(())
    }
}

/// Terms of the closed-form lower bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms {
    /// Expected squared residuals `r_n`.
    pub residuals: Vec<f64>,
    /// `F`, nats per pixel.
    pub objective: f64,
    /// `Σ_n H(β_n)`.
    pub entropy_sum: f64,
    /// `log Γ(KP)`, the log density of the flat Dirichlet prior.
    pub log_prior: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub elbo: f64,
    pub sigma2: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub initial_elbo: f64,
    pub initial_sigma2: f64,
    pub records: Vec<TraceRecord>,
    pub stop: StopReason,
}

impl FitTrace {
    pub fn elbos(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.elbo).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub stack: FactorStack,
    pub betas: VariationalParams,
    pub trace: FitTrace,
    pub init: Option<InitResult>,
}

/// Which sub-step of an outer iteration just finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubStep {
    Beta,
    CoreBasis,
    /// Zero-based mixing-layer index.
    Layer(usize),
    Sigma2,
}

pub struct FitEvent<'a> {
    pub iteration: usize,
    pub step: SubStep,
    pub stack: &'a FactorStack,
    pub betas: &'a VariationalParams,
}

fn check_shapes(y: &PixelMatrix, stack: &FactorStack, betas: &VariationalParams) -> Result<()> {
    if stack.bands() != y.bands() {
        return Err(Error::Dimension(format!(
            "stack has {} bands, data has {}",
            stack.bands(),
            y.bands()
        )));
    }
    if stack.expanded_size() != betas.components() {
        return Err(Error::Dimension(format!(
            "stack expands to {} endmembers, variational parameters have {}",
            stack.expanded_size(),
            betas.components()
        )));
    }
    if betas.pixels() != y.pixels() {
        return Err(Error::Dimension(format!(
            "variational parameters cover {} pixels, data has {}",
            betas.pixels(),
            y.pixels()
        )));
    }
    Ok(())
}

/// One pixel's view of the data term, for a fixed `B`.
struct PixelTerm<'a> {
    gram: &'a DMatrix<f64>,
    proj: &'a [f64],
    ynorm2: f64,
}

impl PixelTerm<'_> {
    /// `tr(G P)` for the Dirichlet second moment of `beta`, plus `Gβ`.
    fn trace_term(&self, beta: &[f64], sum: f64) -> (f64, Vec<f64>) {
        let k = beta.len();
        let mut g_beta = vec![0.0; k];
        let mut quad = 0.0;
        let mut diag = 0.0;
        for j in 0..k {
            let col = self.gram.column(j);
            let bj = beta[j];
            for i in 0..k {
                g_beta[i] += col[i] * bj;
            }
            diag += col[j] * bj;
        }
        for i in 0..k {
            quad += beta[i] * g_beta[i];
        }
        ((diag + quad) / (sum * (sum + 1.0)), g_beta)
    }

    fn residual(&self, beta: &[f64], sum: f64) -> f64 {
        let lin: f64 = self.proj.iter().zip(beta).map(|(h, b)| h * b).sum::<f64>() / sum;
        let (tr, _) = self.trace_term(beta, sum);
        (self.ynorm2 - 2.0 * lin + tr).max(0.0)
    }
}

/// Precomputed `BᵀB`, `BᵀY` and `‖y_n‖²` for a fixed expanded matrix.
struct DataTerm {
    gram: DMatrix<f64>,
    proj: DMatrix<f64>,
    ynorm2: Vec<f64>,
}

impl DataTerm {
    fn new(y: &DMatrix<f64>, b: &DMatrix<f64>) -> Self {
        Self {
            gram: b.tr_mul(b),
            proj: b.tr_mul(y),
            ynorm2: y.column_iter().map(|c| c.norm_squared()).collect(),
        }
    }

    fn pixel(&self, n: usize) -> PixelTerm<'_> {
        PixelTerm {
            gram: &self.gram,
            proj: {
                let k = self.proj.nrows();
                &self.proj.as_slice()[n * k..(n + 1) * k]
            },
            ynorm2: self.ynorm2[n],
        }
    }
}

/// Closed-form lower bound and its components.
pub fn elbo(y: &PixelMatrix, stack: &FactorStack, betas: &VariationalParams) -> Result<ElboTerms> {
    check_shapes(y, stack, betas)?;
    let b = compose_expanded(stack).into_inner();
    Ok(elbo_with(y, &DataTerm::new(y.data(), &b), stack.sigma2(), betas))
}

fn elbo_with(y: &PixelMatrix, data: &DataTerm, sigma2: f64, betas: &VariationalParams) -> ElboTerms {
    let (m, n) = (y.bands() as f64, y.pixels());
    let per_pixel: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let beta = betas.beta.column(j);
            let beta = beta.as_slice();
            let sum: f64 = beta.iter().sum();
            (data.pixel(j).residual(beta, sum), entropy_of(beta, sum))
        })
        .collect();
    let residuals: Vec<f64> = per_pixel.iter().map(|p| p.0).collect();
    let entropy_sum: f64 = per_pixel.iter().map(|p| p.1).sum();
    let residual_sum: f64 = residuals.iter().sum();
    let log_prior = ln_gamma_unchecked(betas.components() as f64);
    let nf = n as f64;
    let objective = -0.5 * m * (2.0 * std::f64::consts::PI * sigma2).ln()
        - residual_sum / (2.0 * sigma2 * nf)
        + log_prior
        + entropy_sum / nf;
    ElboTerms {
        residuals,
        objective,
        entropy_sum,
        log_prior,
    }
}

/// Data-fit part of `−F`: `g = Σ_n r_n / (2σ²N)`.
pub fn surrogate(y: &PixelMatrix, stack: &FactorStack, betas: &VariationalParams) -> Result<f64> {
    let terms = elbo(y, stack, betas)?;
    let total: f64 = terms.residuals.iter().sum();
    Ok(total / (2.0 * stack.sigma2() * y.pixels() as f64))
}

/// Gradients of [`surrogate`] with respect to `A1` and every mixing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGradients {
    pub a1: DMatrix<f64>,
    pub layers: Vec<DMatrix<f64>>,
}

pub fn grad_factors(
    y: &PixelMatrix,
    stack: &FactorStack,
    betas: &VariationalParams,
) -> Result<FactorGradients> {
    check_shapes(y, stack, betas)?;
    let (means, second) = betas.moments();
    let b = compose_expanded(stack).into_inner();
    let scale = stack.sigma2() * y.pixels() as f64;
    let grad_b = (&b * &second - y.data() * means.transpose()) / scale;
    let a1 = &grad_b * stack.right_product(0).transpose();
    let layers = (0..stack.layers().len())
        .map(|l| {
            let u = stack.left_product(l);
            let v = stack.right_product(l + 1);
            u.transpose() * &grad_b * v.transpose()
        })
        .collect();
    Ok(FactorGradients { a1, layers })
}

/// `σ² = max(Σ r_n / (MN), floor)`, the maximizer of `F` in `σ²`.
pub fn update_sigma2(
    y: &PixelMatrix,
    stack: &FactorStack,
    betas: &VariationalParams,
    floor: f64,
) -> Result<f64> {
    let terms = elbo(y, stack, betas)?;
    Ok(sigma2_from(&terms.residuals, y.bands(), floor))
}

fn sigma2_from(residuals: &[f64], bands: usize, floor: f64) -> f64 {
    let total: f64 = residuals.iter().sum();
    (total / (bands * residuals.len()) as f64).max(floor)
}

/// Per-pixel bound `−r_n / (2σ²) + H(β_n)` and its gradient in `β_n`.
pub struct BetaObjective<'a> {
    term: PixelTerm<'a>,
    sigma2: f64,
}

impl BetaObjective<'_> {
    pub fn value(&self, beta: &[f64]) -> f64 {
        let sum: f64 = beta.iter().sum();
        -self.term.residual(beta, sum) / (2.0 * self.sigma2) + entropy_of(beta, sum)
    }

    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let k = beta.len();
        let sum: f64 = beta.iter().sum();
        let c = sum * (sum + 1.0);
        let h = self.term.proj;
        let h_mean: f64 = h.iter().zip(beta).map(|(h, b)| h * b).sum::<f64>() / sum;
        let (tr, g_beta) = self.term.trace_term(beta, sum);
        let shared = (sum - k as f64) * trigamma_unchecked(sum);
        (0..k)
            .map(|j| {
                let dr = -2.0 * (h[j] - h_mean) / sum
                    + (self.term.gram[(j, j)] + 2.0 * g_beta[j] - (2.0 * sum + 1.0) * tr) / c;
                -dr / (2.0 * self.sigma2) + shared - (beta[j] - 1.0) * trigamma_unchecked(beta[j])
            })
            .collect()
    }

    /// Second derivatives of [`Self::value`].
    pub fn hessian(&self, beta: &[f64]) -> DMatrix<f64> {
        let k = beta.len();
        let sum: f64 = beta.iter().sum();
        let c = sum * (sum + 1.0);
        let c1 = 2.0 * sum + 1.0;
        let h = self.term.proj;
        let u: f64 = h.iter().zip(beta).map(|(h, b)| h * b).sum();
        let (tr, g_beta) = self.term.trace_term(beta, sum);
        let q = tr * c;
        let qd: Vec<f64> = (0..k).map(|j| self.term.gram[(j, j)] + 2.0 * g_beta[j]).collect();
        let lin = 4.0 * u / (sum * sum * sum);
        let curv = q * (2.0 / (c * c) - 2.0 * c1 * c1 / (c * c * c));
        let shared = trigamma_unchecked(sum) + (sum - k as f64) * tetragamma_unchecked(sum);
        let own: Vec<f64> = beta
            .iter()
            .map(|&b| trigamma_unchecked(b) + (b - 1.0) * tetragamma_unchecked(b))
            .collect();
        DMatrix::from_fn(k, k, |i, j| {
            let d_lin = 2.0 * (h[i] + h[j]) / (sum * sum) - lin;
            let d_quad = 2.0 * self.term.gram[(i, j)] / c - (qd[i] + qd[j]) * c1 / (c * c) - curv;
            let entropy = if i == j { shared - own[i] } else { shared };
            -(d_lin + d_quad) / (2.0 * self.sigma2) + entropy
        })
    }

    /// Newton direction restricted to coordinates not pinned at the floor.
    fn newton_direction(&self, beta: &[f64], grad: &[f64]) -> Option<Vec<f64>> {
        let k = beta.len();
        let free: Vec<usize> = (0..k).filter(|&j| beta[j] > BETA_FLOOR || grad[j] > 0.0).collect();
        if free.is_empty() {
            return None;
        }
        let hess = self.hessian(beta);
        let nf = free.len();
        let neg = DMatrix::from_fn(nf, nf, |a, b| -hess[(free[a], free[b])]);
        let rhs = DVector::from_fn(nf, |a, _| grad[free[a]]);
        let scale = neg.diagonal().amax().max(f64::MIN_POSITIVE);
        let mut shift = 0.0;
        for _ in 0..MAX_SHIFTS {
            let mut m = neg.clone();
            for a in 0..nf {
                m[(a, a)] += shift;
            }
            if let Some(chol) = m.cholesky() {
                let step = chol.solve(&rhs);
                if step.iter().all(|v| v.is_finite()) {
                    let mut dir = vec![0.0; k];
                    for (a, &j) in free.iter().enumerate() {
                        dir[j] = step[a];
                    }
                    return Some(dir);
                }
            }
            shift = if shift == 0.0 { 1e-10 * scale } else { shift * 10.0 };
        }
        None
    }

    /// Armijo backtracking along `dir` from step 1, clamped to the floor.
    fn line_search(&self, beta: &mut [f64], grad: &[f64], dir: &[f64], current: &mut f64) -> bool {
        let k = beta.len();
        let mut cand = vec![0.0; k];
        let mut t = 1.0;
        for _ in 0..MAX_HALVINGS {
            let mut predicted = 0.0;
            let mut any = false;
            for j in 0..k {
                cand[j] = (beta[j] + t * dir[j]).max(BETA_FLOOR);
                let d = cand[j] - beta[j];
                any |= d != 0.0;
                predicted += grad[j] * d;
            }
            if !any {
                return false;
            }
            let value = self.value(&cand);
            if value >= *current + ARMIJO_C1 * predicted.max(0.0) {
                beta.copy_from_slice(&cand);
                *current = value;
                return true;
            }
            t *= 0.5;
        }
        false
    }

    /// Projected ascent with Armijo backtracking; never decreases [`Self::value`].
    ///
    /// A Newton step that fails the line search is retried along the gradient.
    pub fn ascend(&self, beta: &mut [f64], steps: usize, method: BetaMethod) {
        let mut current = self.value(beta);
        for _ in 0..steps {
            let grad = self.gradient(beta);
            let moved = match method {
                BetaMethod::Newton => {
                    self.newton_direction(beta, &grad)
                        .is_some_and(|dir| self.line_search(beta, &grad, &dir, &mut current))
                        || self.line_search(beta, &grad, &grad, &mut current)
                }
                BetaMethod::Gradient => self.line_search(beta, &grad, &grad, &mut current),
            };
            if !moved {
                break;
            }
        }
    }
}

/// Builds the per-pixel objective for pixel `y` against expanded endmembers `b`.
pub fn beta_objective<'a>(
    gram: &'a DMatrix<f64>,
    proj: &'a [f64],
    ynorm2: f64,
    sigma2: f64,
) -> BetaObjective<'a> {
    BetaObjective {
        term: PixelTerm {
            gram,
            proj,
            ynorm2,
        },
        sigma2,
    }
}

/// Runs `steps` Armijo-backtracked projected ascent steps on one pixel's parameters.
pub fn update_beta(
    y: &[f64],
    b: &DMatrix<f64>,
    beta: &DirichletParam,
    sigma2: f64,
    steps: usize,
    method: BetaMethod,
) -> Result<DirichletParam> {
    if y.len() != b.nrows() || beta.len() != b.ncols() {
        return Err(Error::Dimension(format!(
            "pixel of length {} and {} parameters do not match a {}x{} endmember matrix",
            y.len(),
            beta.len(),
            b.nrows(),
            b.ncols()
        )));
    }
    let yv = DVector::from_column_slice(y);
    let gram = b.tr_mul(b);
    let proj = b.tr_mul(&yv);
    let objective = beta_objective(&gram, proj.as_slice(), yv.norm_squared(), sigma2);
    let mut out = beta.beta().to_vec();
    objective.ascend(&mut out, steps, method);
    DirichletParam::new(out)
}

/// Quadratic `(−⟨X, D⟩ + ½⟨G X Q, X⟩) / scale` in one factor block, other factors fixed.
pub(crate) struct BlockQuadratic {
    left: Option<DMatrix<f64>>,
    right: DMatrix<f64>,
    lin: DMatrix<f64>,
    scale: f64,
}

impl BlockQuadratic {
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.left {
            Some(g) => g * x * &self.right,
            None => x * &self.right,
        }
    }

    pub(crate) fn value(&self, x: &DMatrix<f64>) -> f64 {
        (-frob_dot(x, &self.lin) + 0.5 * frob_dot(&self.apply(x), x)) / self.scale
    }

    pub(crate) fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        (self.apply(x) - &self.lin) / self.scale
    }

    pub(crate) fn lipschitz(&self) -> f64 {
        let left = self
            .left
            .as_ref()
            .map_or(1.0, |g| top_eigenvalue_psd(g, 50, 1e-10));
        left * top_eigenvalue_psd(&self.right, 50, 1e-10) / self.scale
    }
}

/// Moments of the variational posteriors that every factor block shares.
pub(crate) struct SharedMoments {
    cross: DMatrix<f64>,
    second: DMatrix<f64>,
    scale: f64,
}

impl SharedMoments {
    pub(crate) fn new(y: &PixelMatrix, betas: &VariationalParams, sigma2: f64) -> Self {
        let (means, second) = betas.moments();
        Self {
            cross: y.data() * means.transpose(),
            second,
            scale: sigma2 * y.pixels() as f64,
        }
    }

    pub(crate) fn core_block(&self, stack: &FactorStack) -> BlockQuadratic {
        let w = stack.right_product(0);
        BlockQuadratic {
            left: None,
            right: &w * &self.second * w.transpose(),
            lin: &self.cross * w.transpose(),
            scale: self.scale,
        }
    }

    pub(crate) fn layer_block(&self, stack: &FactorStack, l: usize) -> BlockQuadratic {
        let u = stack.left_product(l);
        let v = stack.right_product(l + 1);
        BlockQuadratic {
            left: Some(u.tr_mul(&u)),
            right: &v * &self.second * v.transpose(),
            lin: u.transpose() * &self.cross * v.transpose(),
            scale: self.scale,
        }
    }
}

/// Momentum memory of one factor block across outer iterations.
#[derive(Debug, Clone)]
pub struct ApgState {
    previous: Option<DMatrix<f64>>,
    t: f64,
}

impl Default for ApgState {
    fn default() -> Self {
        Self {
            previous: None,
            t: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApgOutcome {
    Accelerated,
    Plain,
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Nonnegative,
    SimplexColumns,
}

impl Projection {
    fn apply(self, x: &mut DMatrix<f64>) {
        match self {
            Projection::Nonnegative => x.apply(|v| *v = v.max(0.0)),
            Projection::SimplexColumns => project_columns(x),
        }
    }
}

/// One monotone accelerated proximal gradient pass on `x`.
///
/// Tries the extrapolated step first; if it raises the block objective, falls
/// back to a plain projected step from `x` (halving the step if needed) and
/// resets the momentum.
pub(crate) fn apg_pass(
    x: &mut DMatrix<f64>,
    quad: &BlockQuadratic,
    state: &mut ApgState,
    projection: Projection,
) -> ApgOutcome {
    let lipschitz = quad.lipschitz();
    if !(lipschitz > 0.0) || !lipschitz.is_finite() {
        return ApgOutcome::Unchanged;
    }
    let step = 1.0 / lipschitz;
    let current = quad.value(x);
    let t_next = 0.5 * (1.0 + (1.0 + 4.0 * state.t * state.t).sqrt());
    let extrapolated = match &state.previous {
        Some(prev) if prev.shape() == x.shape() => {
            &*x + (&*x - prev) * ((state.t - 1.0) / t_next)
        }
        _ => x.clone(),
    };
    let mut cand = &extrapolated - quad.gradient(&extrapolated) * step;
    projection.apply(&mut cand);
    if quad.value(&cand) <= current {
        state.previous = Some(std::mem::replace(x, cand));
        state.t = t_next;
        return ApgOutcome::Accelerated;
    }
    state.t = 1.0;
    let grad = quad.gradient(x);
    let mut step = step;
    for _ in 0..30 {
        let mut cand = &*x - &grad * step;
        projection.apply(&mut cand);
        if quad.value(&cand) <= current {
            state.previous = Some(std::mem::replace(x, cand));
            return ApgOutcome::Plain;
        }
        step *= 0.5;
    }
    state.previous = None;
    ApgOutcome::Unchanged
}

/// Which factor an APG pass updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    CoreBasis,
    /// Zero-based mixing-layer index.
    Layer(usize),
}

/// Runs one APG pass on the chosen factor with `β` and `σ²` held fixed.
pub fn apg_update_factor(
    which: Factor,
    y: &PixelMatrix,
    stack: &mut FactorStack,
    betas: &VariationalParams,
    state: &mut ApgState,
) -> Result<ApgOutcome> {
    check_shapes(y, stack, betas)?;
    let moments = SharedMoments::new(y, betas, stack.sigma2());
    Ok(update_block(which, &moments, stack, state))
}

fn update_block(
    which: Factor,
    moments: &SharedMoments,
    stack: &mut FactorStack,
    state: &mut ApgState,
) -> ApgOutcome {
    match which {
        Factor::CoreBasis => {
            let quad = moments.core_block(stack);
            apg_pass(stack.a1_mut(), &quad, state, Projection::Nonnegative)
        }
        Factor::Layer(l) => {
            let quad = moments.layer_block(stack, l);
            apg_pass(stack.layer_mut(l), &quad, state, Projection::SimplexColumns)
        }
    }
}

fn update_all_betas(
    y: &PixelMatrix,
    stack: &FactorStack,
    betas: &mut VariationalParams,
    steps: usize,
    method: BetaMethod,
) {
    let b = compose_expanded(stack).into_inner();
    let data = DataTerm::new(y.data(), &b);
    let sigma2 = stack.sigma2();
    let updated: Vec<Vec<f64>> = (0..y.pixels())
        .into_par_iter()
        .map(|n| {
            let objective = BetaObjective {
                term: data.pixel(n),
                sigma2,
            };
            let mut beta: Vec<f64> = betas.beta.column(n).iter().copied().collect();
            objective.ascend(&mut beta, steps, method);
            beta
        })
        .collect();
    for (n, beta) in updated.into_iter().enumerate() {
        betas.beta.column_mut(n).copy_from_slice(&beta);
    }
}

/// Initializes from the data and runs the alternating maximization.
pub fn fit(y: &PixelMatrix, dims: &ModelDims, config: &FitConfig) -> Result<FitResult> {
    fit_observed(y, dims, config, |_| {})
}

pub fn fit_observed(
    y: &PixelMatrix,
    dims: &ModelDims,
    config: &FitConfig,
    observer: impl FnMut(&FitEvent<'_>),
) -> Result<FitResult> {
    config.validate()?;
    check_dims_against(y, dims)?;
    let init = init_all(y, dims, config.seed)?;
    let betas = VariationalParams::new(init.beta.clone())?;
    let mut stack = FactorStack::new(init.a1.clone(), init.layers.clone(), 1.0)?;
    let data = DataTerm::new(y.data(), &compose_expanded(&stack).into_inner());
    let residuals = elbo_with(y, &data, 1.0, &betas).residuals;
    stack.set_sigma2(sigma2_from(&residuals, y.bands(), config.sigma2_floor));
    let mut result = fit_from(y, stack, betas, config, observer)?;
    result.init = Some(init);
    Ok(result)
}

/// Alternating maximization from a given feasible starting point.
pub fn fit_from(
    y: &PixelMatrix,
    mut stack: FactorStack,
    mut betas: VariationalParams,
    config: &FitConfig,
    mut observer: impl FnMut(&FitEvent<'_>),
) -> Result<FitResult> {
    config.validate()?;
    check_shapes(y, &stack, &betas)?;
    if stack.sigma2() < config.sigma2_floor {
        stack.set_sigma2(config.sigma2_floor);
    }
    let initial = elbo(y, &stack, &betas)?.objective;
    let mut trace = FitTrace {
        initial_elbo: initial,
        initial_sigma2: stack.sigma2(),
        records: Vec::with_capacity(config.max_outer_iters),
        stop: StopReason::MaxIterations,
    };
    let mut core_state = ApgState::default();
    let mut layer_states = vec![ApgState::default(); stack.layers().len()];
    let mut previous = initial;

    for iteration in 0..config.max_outer_iters {
        let started = Instant::now();
        let mut notify = |step: SubStep, stack: &FactorStack, betas: &VariationalParams| {
            observer(&FitEvent {
                iteration,
                step,
                stack,
                betas,
            })
        };

        update_all_betas(y, &stack, &mut betas, config.beta_steps_per_outer, config.beta_method);
        notify(SubStep::Beta, &stack, &betas);

        let moments = SharedMoments::new(y, &betas, stack.sigma2());
        for _ in 0..config.apg_iters_per_factor {
            update_block(Factor::CoreBasis, &moments, &mut stack, &mut core_state);
        }
        notify(SubStep::CoreBasis, &stack, &betas);
        for (l, state) in layer_states.iter_mut().enumerate() {
            for _ in 0..config.apg_iters_per_factor {
                update_block(Factor::Layer(l), &moments, &mut stack, state);
            }
            notify(SubStep::Layer(l), &stack, &betas);
        }

        let data = DataTerm::new(y.data(), &compose_expanded(&stack).into_inner());
        let residuals = elbo_with(y, &data, stack.sigma2(), &betas).residuals;
        stack.set_sigma2(sigma2_from(&residuals, y.bands(), config.sigma2_floor));
        notify(SubStep::Sigma2, &stack, &betas);

        let objective = elbo_with(y, &data, stack.sigma2(), &betas).objective;
        trace.records.push(TraceRecord {
            elbo: objective,
            sigma2: stack.sigma2(),
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if config.rel_elbo_tol > 0.0
            && objective - previous < config.rel_elbo_tol * previous.abs().max(1.0)
        {
            trace.stop = StopReason::Converged;
            break;
        }
        previous = objective;
    }

    Ok(FitResult {
        stack,
        betas,
        trace,
        init: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn stochastic(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() + 0.05);
        for mut c in m.column_iter_mut() {
            let s = c.sum();
            c /= s;
        }
        m
    }

    fn instance(m: usize, sizes: &[usize], n: usize, seed: u64) -> (PixelMatrix, FactorStack, VariationalParams) {
        let mut rng = seeded(seed);
        let a1 = DMatrix::from_fn(m, sizes[0], |_, _| rng.random::<f64>());
        let layers = sizes.windows(2).map(|w| stochastic(w[0], w[1], &mut rng)).collect();
        let stack = FactorStack::new(a1, layers, 0.3).unwrap();
        let kp = *sizes.last().unwrap();
        let beta = DMatrix::from_fn(kp, n, |_, _| 0.3 + 3.0 * rng.random::<f64>());
        let y = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>());
        (PixelMatrix::new(y).unwrap(), stack, VariationalParams::new(beta).unwrap())
    }

    #[test]
    fn one_point_simplex_elbo() {
        let (y, _, _) = instance(4, &[1], 3, 2);
        let a1 = DMatrix::from_column_slice(4, 1, &[0.1, 0.4, 0.2, 0.9]);
        let stack = FactorStack::new(a1.clone(), vec![], 0.5).unwrap();
        let betas = VariationalParams::new(DMatrix::from_element(1, 3, 2.7)).unwrap();
        let terms = elbo(&y, &stack, &betas).unwrap();
        let mut expected = 0.0;
        for col in y.data().column_iter() {
            let r = (col - a1.column(0)).norm_squared();
            expected += -2.0 * (2.0 * std::f64::consts::PI * 0.5).ln() - r / 1.0;
        }
        assert!((terms.objective - expected / 3.0).abs() < 1e-12);
        assert_eq!(terms.entropy_sum, 0.0);
    }

    #[test]
    fn single_component_gradient_is_least_squares() {
        let (y, _, _) = instance(3, &[1], 4, 5);
        let a1 = DMatrix::from_column_slice(3, 1, &[0.2, 0.5, 0.7]);
        let stack = FactorStack::new(a1.clone(), vec![], 0.25).unwrap();
        let betas = VariationalParams::new(DMatrix::from_element(1, 4, 1.0)).unwrap();
        let g = grad_factors(&y, &stack, &betas).unwrap();
        let ones = DMatrix::from_element(4, 1, 1.0);
        let expected = (&a1 * 4.0 - y.data() * ones) / (0.25 * 4.0);
        assert!((g.a1 - expected).amax() < 1e-12);
    }

    #[test]
    fn gradients_vanish_at_constructed_stationary_point() {
        // choose Y so that Y Mᵀ = B P̄: take Y = B P̄ (M Mᵀ)^{-1} M
        let (_, stack, betas) = instance(5, &[2, 3], 4, 8);
        let (means, second) = betas.moments();
        let b = compose_expanded(&stack).into_inner();
        let mmt = &means * means.transpose();
        let y = &b * &second * mmt.try_inverse().unwrap() * &means;
        let y = PixelMatrix::new(y).unwrap();
        let g = grad_factors(&y, &stack, &betas).unwrap();
        assert!(g.a1.amax() < 1e-10);
        assert!(g.layers.iter().all(|l| l.amax() < 1e-10));
    }

    #[test]
    fn block_gradients_agree_with_factor_gradients() {
        let (y, stack, betas) = instance(5, &[2, 3, 4], 6, 3);
        let g = grad_factors(&y, &stack, &betas).unwrap();
        let moments = SharedMoments::new(&y, &betas, stack.sigma2());
        let core = moments.core_block(&stack).gradient(stack.a1());
        assert!((core - &g.a1).amax() < 1e-12);
        for l in 0..2 {
            let block = moments.layer_block(&stack, l).gradient(&stack.layers()[l]);
            assert!((block - &g.layers[l]).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_leaves_factor_unchanged() {
        let quad = BlockQuadratic {
            left: None,
            right: DMatrix::identity(2, 2),
            lin: DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.2, 0.6]),
            scale: 1.0,
        };
        let mut x = quad.lin.clone();
        let before = x.clone();
        let mut state = ApgState::default();
        apg_pass(&mut x, &quad, &mut state, Projection::Nonnegative);
        assert_eq!(x, before);
    }

    #[test]
    fn apg_keeps_layers_feasible_and_monotone() {
        let (y, mut stack, betas) = instance(6, &[2, 3, 5], 7, 13);
        let mut states = vec![ApgState::default(); 3];
        for _ in 0..5 {
            for (i, which) in [Factor::CoreBasis, Factor::Layer(0), Factor::Layer(1)].into_iter().enumerate() {
                let before = surrogate(&y, &stack, &betas).unwrap();
                apg_update_factor(which, &y, &mut stack, &betas, &mut states[i]).unwrap();
                let after = surrogate(&y, &stack, &betas).unwrap();
                assert!(after <= before + 1e-12, "{which:?}: {before} -> {after}");
                let rebuilt = FactorStack::new(stack.a1().clone(), stack.layers().to_vec(), stack.sigma2());
                assert!(rebuilt.is_ok());
                for s in stack.layers() {
                    for c in s.column_iter() {
                        assert!((c.sum() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn sigma2_formula_and_floor() {
        let y = PixelMatrix::new(DMatrix::from_element(1, 1, 2f64.sqrt())).unwrap();
        let stack = FactorStack::new(DMatrix::from_element(1, 1, 0.0), vec![], 1.0).unwrap();
        let betas = VariationalParams::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let s = update_sigma2(&y, &stack, &betas, 1e-12).unwrap();
        assert!((s - 2.0).abs() < 1e-12);

        let y = PixelMatrix::new(DMatrix::from_element(2, 3, 0.5)).unwrap();
        let stack = FactorStack::new(DMatrix::from_element(2, 1, 0.5), vec![], 1.0).unwrap();
        let betas = VariationalParams::new(DMatrix::from_element(1, 3, 1.0)).unwrap();
        assert_eq!(update_sigma2(&y, &stack, &betas, 1e-12).unwrap(), 1e-12);
    }

    #[test]
    fn entropy_only_gradient_points_to_flat() {
        let gram = DMatrix::zeros(3, 3);
        let proj = [0.0; 3];
        let obj = beta_objective(&gram, &proj, 0.0, 1.0);
        assert!(obj.gradient(&[2.0; 3]).iter().all(|&g| g < 0.0));
        assert!(obj.gradient(&[0.5; 3]).iter().all(|&g| g > 0.0));
        for method in [BetaMethod::Newton, BetaMethod::Gradient] {
            let mut beta = vec![2.0; 3];
            obj.ascend(&mut beta, 10, method);
            assert!(beta.iter().all(|&b| b < 2.0 && b > 1.0 - 1e-9), "{method:?}: {beta:?}");
        }
        let mut beta = vec![2.0; 3];
        obj.ascend(&mut beta, 10, BetaMethod::Newton);
        assert!(beta.iter().all(|&b| (b - 1.0).abs() < 1e-8));
    }

    #[test]
    fn beta_ascent_never_decreases() {
        let (y, stack, betas) = instance(6, &[2, 4], 5, 21);
        let b = compose_expanded(&stack).into_inner();
        for n in 0..5 {
            let yn: Vec<f64> = y.data().column(n).iter().copied().collect();
            let before = betas.param(n);
            let gram = b.tr_mul(&b);
            let proj = b.tr_mul(&DVector::from_column_slice(&yn));
            let obj = beta_objective(&gram, proj.as_slice(), y.data().column(n).norm_squared(), stack.sigma2());
            for method in [BetaMethod::Newton, BetaMethod::Gradient] {
                let after = update_beta(&yn, &b, &before, stack.sigma2(), 10, method).unwrap();
                assert!(obj.value(after.beta()) >= obj.value(before.beta()) - 1e-12);
            }
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let (y, stack, betas) = instance(7, &[2, 4], 3, 33);
        let b = compose_expanded(&stack).into_inner();
        let gram = b.tr_mul(&b);
        for n in 0..3 {
            let proj = b.tr_mul(&y.data().column(n));
            let obj = beta_objective(&gram, proj.as_slice(), y.data().column(n).norm_squared(), stack.sigma2());
            let beta = betas.param(n).beta().to_vec();
            let hess = obj.hessian(&beta);
            for j in 0..beta.len() {
                let h = 1e-6 * beta[j];
                let mut up = beta.clone();
                up[j] += h;
                let mut down = beta.clone();
                down[j] -= h;
                let (gu, gd) = (obj.gradient(&up), obj.gradient(&down));
                for i in 0..beta.len() {
                    let fd = (gu[i] - gd[i]) / (2.0 * h);
                    assert!((fd - hess[(i, j)]).abs() <= 1e-5 * hess[(i, j)].abs().max(1.0), "({i},{j}): {fd} vs {}", hess[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn newton_reaches_higher_bound_than_gradient() {
        let (y, stack, betas) = instance(8, &[2, 5], 4, 8);
        let stack = FactorStack::new(stack.a1().clone(), stack.layers().to_vec(), 1e-4).unwrap();
        let b = compose_expanded(&stack).into_inner();
        let gram = b.tr_mul(&b);
        for n in 0..4 {
            let proj = b.tr_mul(&y.data().column(n));
            let obj = beta_objective(&gram, proj.as_slice(), y.data().column(n).norm_squared(), stack.sigma2());
            let mut newton = betas.param(n).beta().to_vec();
            let mut grad = newton.clone();
            obj.ascend(&mut newton, 10, BetaMethod::Newton);
            obj.ascend(&mut grad, 10, BetaMethod::Gradient);
            assert!(obj.value(&newton) >= obj.value(&grad) - 1e-9);
        }
    }

    #[test]
    fn fit_from_runs_fixed_iterations_without_tolerance() {
        let (y, stack, betas) = instance(6, &[2, 3], 8, 4);
        let config = FitConfig {
            max_outer_iters: 7,
            rel_elbo_tol: 0.0,
            ..FitConfig::default()
        };
        let res = fit_from(&y, stack, betas, &config, |_| {}).unwrap();
        assert_eq!(res.trace.records.len(), 7);
        assert_eq!(res.trace.stop, StopReason::MaxIterations);
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        let bad = FitConfig {
            beta_steps_per_outer: 0,
            ..FitConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FitConfig {
            rel_elbo_tol: -1.0,
            ..FitConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
