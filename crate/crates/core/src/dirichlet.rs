//! Dirichlet moments, entropy and sampling.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::special::{digamma_unchecked, ln_gamma_unchecked};

/// Smallest admissible concentration parameter.
pub const BETA_FLOOR: f64 = 1e-6;

/// Concentration parameters of a Dirichlet distribution, floored at [`BETA_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParam {
    beta: Vec<f64>,
    sum: f64,
}

impl DirichletParam {
    pub fn new(mut beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidInput("Dirichlet parameter must be non-empty".into()));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidInput("Dirichlet parameter must be finite".into()));
        }
        for b in beta.iter_mut() {
            *b = b.max(BETA_FLOOR);
        }
        let sum = beta.iter().sum();
        Ok(Self { beta, sum })
    }

    /// The flat distribution `Dir(1, …, 1)`.
    pub fn uniform(k: usize) -> Self {
        Self {
            beta: vec![1.0; k],
            sum: k as f64,
        }
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn sum(&self) -> f64 {
        self.sum
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `E[s] = β / Σβ`.
    pub fn mean(&self) -> Vec<f64> {
        self.beta.iter().map(|b| b / self.sum).collect()
    }

    /// `E[s sᵀ] = (diag(β) + ββᵀ) / (β̄ (β̄ + 1))`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let k = self.beta.len();
        let c = self.sum * (self.sum + 1.0);
        DMatrix::from_fn(k, k, |i, j| {
            let outer = self.beta[i] * self.beta[j];
            if i == j {
                (self.beta[i] + outer) / c
            } else {
                outer / c
            }
        })
    }

    /// Differential entropy `−E[log q(s)]` in nats.
    pub fn entropy(&self) -> f64 {
        entropy_of(&self.beta, self.sum)
    }

    /// One draw by Gamma normalization.
    ///
    /// Shapes below one are sampled as `Gamma(β + 1) · U^{1/β}` in log space
    /// so that the draw never underflows to the zero vector.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let logs: Vec<f64> = self
            .beta
            .iter()
            .map(|&b| {
                if b >= 1.0 {
                    let g: f64 = Gamma::new(b, 1.0).expect("positive shape").sample(rng);
                    g.ln()
                } else {
                    let g: f64 = Gamma::new(b + 1.0, 1.0).expect("positive shape").sample(rng);
                    let u: f64 = rng.random::<f64>();
                    g.ln() + (1.0 - u).ln() / b
                }
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = out.iter().sum();
        for x in out.iter_mut() {
            *x /= total;
        }
        out
    }
}

/// Entropy from a raw parameter slice with precomputed sum.
pub(crate) fn entropy_of(beta: &[f64], sum: f64) -> f64 {
    let k = beta.len() as f64;
    let mut h = -ln_gamma_unchecked(sum) + (sum - k) * digamma_unchecked(sum);
    for &b in beta {
        h += ln_gamma_unchecked(b) - (b - 1.0) * digamma_unchecked(b);
    }
    h
}
