//! Data model of the multilayer factorization.
//!
//! Latent layer sizes are `K1 ≤ K2 ≤ … ≤ KP`. The core basis `A1` is
//! `M × K1`; the deterministic mixing layers are `S_l` of size
//! `K_l × K_{l+1}` for `l = 1..P-1`; the per-pixel abundances form a separate
//! `KP × N` matrix. The expanded endmember matrix is `B = A1 · S1 ⋯ S_{P-1}`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Column-sum tolerance used when validating simplex-constrained columns.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Observed hyperspectral data: `M` bands × `N` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMatrix {
    data: DMatrix<f64>,
    shape: Option<(usize, usize)>,
}

impl PixelMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "pixel matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "pixel matrix entry ({}, {}) is not finite",
                pos % data.nrows(),
                pos / data.nrows()
            )));
        }
        Ok(Self { data, shape: None })
    }

    /// Attaches an image shape; `width * height` must equal the pixel count.
    pub fn with_shape(mut self, width: usize, height: usize) -> Result<Self> {
        if width * height != self.pixels() {
            return Err(Error::Dimension(format!(
                "image shape {width}x{height} does not cover {} pixels",
                self.pixels()
            )));
        }
        self.shape = Some((width, height));
        Ok(self)
    }

    pub fn bands(&self) -> usize {
        self.data.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.shape
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }
}

/// Band count, latent layer sizes `(K1, …, KP)` and pixel count.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub bands: usize,
    pub layers: Vec<usize>,
    pub pixels: usize,
}

impl ModelDims {
    pub fn new(bands: usize, layers: Vec<usize>, pixels: usize) -> Result<Self> {
        let dims = Self {
            bands,
            layers,
            pixels,
        };
        validate_dims(&dims)?;
        Ok(dims)
    }

    /// Number of latent layers `P`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Core basis size `K1`.
    pub fn core(&self) -> usize {
        self.layers[0]
    }

    /// Expanded endmember count `KP`.
    pub fn expanded(&self) -> usize {
        *self.layers.last().expect("validated dims have at least one layer")
    }
}

/// Accepts `dims` iff `P ≥ 1`, `1 ≤ K1 ≤ … ≤ KP`, `K1 ≤ M` and `KP ≤ N`.
pub fn validate_dims(dims: &ModelDims) -> Result<()> {
    if dims.bands == 0 || dims.pixels == 0 {
        return Err(Error::InvalidDims(format!(
            "band count ({}) and pixel count ({}) must be positive",
            dims.bands, dims.pixels
        )));
    }
    let Some(&first) = dims.layers.first() else {
        return Err(Error::InvalidDims("at least one latent layer is required".into()));
    };
    if first == 0 {
        return Err(Error::InvalidDims("layer sizes must be at least 1".into()));
    }
    for (l, pair) in dims.layers.windows(2).enumerate() {
        if pair[0] > pair[1] {
            return Err(Error::InvalidDims(format!(
                "layer sizes must be non-decreasing: K{} = {} > K{} = {}",
                l + 1,
                pair[0],
                l + 2,
                pair[1]
            )));
        }
    }
    if first > dims.bands {
        return Err(Error::InvalidDims(format!(
            "core size K1 = {first} exceeds band count M = {}",
            dims.bands
        )));
    }
    let last = dims.expanded();
    if last > dims.pixels {
        return Err(Error::InvalidDims(format!(
            "expanded size KP = {last} exceeds pixel count N = {}",
            dims.pixels
        )));
    }
    Ok(())
}

/// Returns the first column of `m` that is not on the unit simplex.
pub(crate) fn first_non_simplex_column(m: &DMatrix<f64>, tol: f64) -> Option<usize> {
    m.column_iter().position(|c| {
        c.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (c.sum() - 1.0).abs() > tol
    })
}

/// Deterministic unknowns: core basis, mixing layers and noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorStack {
    a1: DMatrix<f64>,
    layers: Vec<DMatrix<f64>>,
    sigma2: f64,
}

impl FactorStack {
    /// Validates nonnegativity of `a1`, simplex columns of every layer,
    /// the dimension chain and `sigma2 > 0`.
    pub fn new(a1: DMatrix<f64>, layers: Vec<DMatrix<f64>>, sigma2: f64) -> Result<Self> {
        if a1.nrows() == 0 || a1.ncols() == 0 {
            return Err(Error::Dimension("core basis A1 must be non-empty".into()));
        }
        if a1.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Infeasible {
                what: "core basis A1",
                detail: "entries must be finite and nonnegative".into(),
            });
        }
        let mut rows = a1.ncols();
        for (l, s) in layers.iter().enumerate() {
            if s.nrows() != rows {
                return Err(Error::Dimension(format!(
                    "layer S{} has {} rows, expected {}",
                    l + 1,
                    s.nrows(),
                    rows
                )));
            }
            if let Some(col) = first_non_simplex_column(s, SIMPLEX_TOL) {
                return Err(Error::Infeasible {
                    what: "mixing layer",
                    detail: format!("column {col} of S{} is not on the unit simplex", l + 1),
                });
            }
            rows = s.ncols();
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Infeasible {
                what: "noise variance",
                detail: format!("sigma2 = {sigma2} must be positive and finite"),
            });
        }
        Ok(Self { a1, layers, sigma2 })
    }

    pub fn a1(&self) -> &DMatrix<f64> {
        &self.a1
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn bands(&self) -> usize {
        self.a1.nrows()
    }

    /// Latent sizes `(K1, …, KP)`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.a1.ncols())
            .chain(self.layers.iter().map(|s| s.ncols()))
            .collect()
    }

    pub fn expanded_size(&self) -> usize {
        self.layers.last().map_or(self.a1.ncols(), |s| s.ncols())
    }

    /// `A1 · S1 ⋯ S_{l}` for `l` mixing layers (`l = 0` gives `A1`).
    pub fn left_product(&self, l: usize) -> DMatrix<f64> {
        self.layers[..l]
            .iter()
            .fold(self.a1.clone(), |acc, s| acc * s)
    }

    /// `S_{from} ⋯ S_{P-1}` using zero-based layer indices; identity when empty.
    pub fn right_product(&self, from: usize) -> DMatrix<f64> {
        let size = if from < self.layers.len() {
            self.layers[from].nrows()
        } else {
            self.expanded_size()
        };
        self.layers[from.min(self.layers.len())..]
            .iter()
            .fold(DMatrix::identity(size, size), |acc, s| acc * s)
    }

    pub(crate) fn a1_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.a1
    }

    pub(crate) fn layer_mut(&mut self, l: usize) -> &mut DMatrix<f64> {
        &mut self.layers[l]
    }

    pub(crate) fn set_sigma2(&mut self, sigma2: f64) {
        self.sigma2 = sigma2;
    }
}

/// Per-pixel abundances, `KP × N`, columns on the unit simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceMatrix {
    data: DMatrix<f64>,
}

impl AbundanceMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if let Some(col) = first_non_simplex_column(&data, SIMPLEX_TOL) {
            return Err(Error::Infeasible {
                what: "abundance matrix",
                detail: format!("column {col} is not on the unit simplex"),
            });
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }
}

/// Expanded endmembers `B = A1 · S1 ⋯ S_{P-1}` (`M × KP`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedEndmembers {
    data: DMatrix<f64>,
}

impl ExpandedEndmembers {
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }
}

pub fn compose_expanded(stack: &FactorStack) -> ExpandedEndmembers {
    ExpandedEndmembers {
        data: stack.left_product(stack.layers.len()),
    }
}

/// `Ŷ = B · abundances`.
pub fn reconstruct(stack: &FactorStack, abundances: &AbundanceMatrix) -> Result<PixelMatrix> {
    let b = compose_expanded(stack).data;
    if b.ncols() != abundances.data.nrows() {
        return Err(Error::Dimension(format!(
            "abundances have {} rows but the stack expands to {} endmembers",
            abundances.data.nrows(),
            b.ncols()
        )));
    }
    PixelMatrix::new(b * &abundances.data)
}
