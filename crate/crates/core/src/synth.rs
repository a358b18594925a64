//! Synthetic endmember variability and SNR-calibrated datasets.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dirichlet::DirichletParam;
use crate::error::{Error, Result};
use crate::model::PixelMatrix;
use crate::rng::{derive_seed, seeded};

pub const DEFAULT_GAMMA: f64 = 0.25;
pub const DEFAULT_KNOTS: usize = 10;
pub const DEFAULT_BANDS: usize = 198;

// (center, width, amplitude) on a [0, 1] wavelength axis
const BUMPS: [&[(f64, f64, f64)]; 3] = [
    // water-like: bright in the blue, dark beyond the red
    &[(0.05, 0.12, 1.0), (0.25, 0.10, 0.45), (0.55, 0.20, 0.08)],
    // soil-like: broad slow rise with a mineral shoulder
    &[(0.70, 0.35, 1.0), (0.35, 0.10, 0.30), (0.95, 0.08, 0.25), (0.15, 0.15, 0.12)],
    // vegetation-like: green peak, red edge plateau
    &[(0.22, 0.04, 0.30), (0.62, 0.12, 1.0), (0.85, 0.15, 0.80)],
];

/// Three deterministic smooth base spectra with values in `[0.05, 0.95]`.
pub fn builtin_bases(bands: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(bands, BUMPS.len());
    for (j, bumps) in BUMPS.iter().enumerate() {
        let raw: Vec<f64> = (0..bands)
            .map(|i| {
                let x = if bands > 1 { i as f64 / (bands - 1) as f64 } else { 0.5 };
                bumps
                    .iter()
                    .map(|&(c, w, a)| a * (-0.5 * ((x - c) / w).powi(2)).exp())
                    .sum()
            })
            .collect();
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (i, v) in raw.iter().enumerate() {
            out[(i, j)] = 0.05 + 0.9 * (v - lo) / span;
        }
    }
    out
}

/// Knot positions `round(i (M-1) / (knots-1))` on the band axis.
fn knot_positions(bands: usize, knots: usize) -> Vec<f64> {
    (0..knots)
        .map(|i| (i as f64 * (bands - 1) as f64 / (knots - 1) as f64).round())
        .collect()
}

fn interpolate(positions: &[f64], values: &[f64], band: usize) -> f64 {
    let x = band as f64;
    let seg = positions
        .windows(2)
        .position(|w| x <= w[1])
        .unwrap_or(positions.len() - 2);
    let (x0, x1) = (positions[seg], positions[seg + 1]);
    if x1 == x0 {
        return values[seg];
    }
    let t = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
    values[seg] * (1.0 - t) + values[seg + 1] * t
}

/// `count` variants `ψ ∘ a` of the spectrum `a`.
///
/// `ψ` is piecewise linear over `knots` equally spaced bands with knot values
/// uniform on `[1 − gamma, 1 + gamma]`, so `|v_i − a_i| ≤ gamma · a_i`.
pub fn gen_variants(a: &[f64], count: usize, gamma: f64, knots: usize, seed: u64) -> Result<DMatrix<f64>> {
    if a.is_empty() || a.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("base spectrum must be non-empty, finite and nonnegative".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidInput(format!("variability amplitude {gamma} must lie in [0, 1)")));
    }
    if knots < 2 {
        return Err(Error::InvalidInput("at least two knots are required".into()));
    }
    let bands = a.len();
    let positions = if bands > 1 {
        knot_positions(bands, knots)
    } else {
        vec![0.0, 0.0]
    };
    let mut rng = seeded(seed);
    let mut out = DMatrix::zeros(bands, count);
    for c in 0..count {
        let values: Vec<f64> = (0..positions.len())
            .map(|_| 1.0 - gamma + 2.0 * gamma * rng.random::<f64>())
            .collect();
        for (i, &ai) in a.iter().enumerate() {
            out[(i, c)] = interpolate(&positions, &values, i) * ai;
        }
    }
    Ok(out)
}

/// Ground-truth expanded endmembers with the base index of every column.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub endmembers: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// Per base, the variant indices that were picked.
    pub picks: Vec<Vec<usize>>,
}

/// Generates `variants_per_base` variants of every base column and keeps
/// `pick` of them per base, sampled without replacement.
pub fn assemble_ground_truth(
    bases: &DMatrix<f64>,
    variants_per_base: usize,
    pick: usize,
    gamma: f64,
    knots: usize,
    seed: u64,
) -> Result<GroundTruth> {
    if pick > variants_per_base {
        return Err(Error::InvalidInput(format!(
            "cannot pick {pick} of {variants_per_base} variants"
        )));
    }
    let bands = bases.nrows();
    let mut endmembers = DMatrix::zeros(bands, bases.ncols() * pick);
    let mut labels = Vec::with_capacity(bases.ncols() * pick);
    let mut picks = Vec::with_capacity(bases.ncols());
    let mut pick_rng = seeded(derive_seed(seed, 0xB5));
    for (b, base) in bases.column_iter().enumerate() {
        let base: Vec<f64> = base.iter().copied().collect();
        let variants = gen_variants(&base, variants_per_base, gamma, knots, derive_seed(seed, b as u64))?;
        let mut chosen = sample(&mut pick_rng, variants_per_base, pick).into_vec();
        chosen.sort_unstable();
        for (offset, &v) in chosen.iter().enumerate() {
            endmembers
                .column_mut(b * pick + offset)
                .copy_from(&variants.column(v));
            labels.push(b);
        }
        picks.push(chosen);
    }
    Ok(GroundTruth {
        endmembers,
        labels,
        picks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBundle {
    pub y: PixelMatrix,
    pub a_star: DMatrix<f64>,
    pub z_star: DMatrix<f64>,
    pub sigma2: f64,
    pub snr_db: f64,
    pub seed: u64,
}

/// `Y = A★ Z★ + V` with flat-Dirichlet abundances and white Gaussian noise
/// scaled so that `‖A★Z★‖²_F / (σ² M N) = 10^{snr_db / 10}`.
pub fn gen_dataset(a_star: &DMatrix<f64>, pixels: usize, snr_db: f64, seed: u64) -> Result<SynthBundle> {
    if pixels == 0 {
        return Err(Error::InvalidInput("pixel count must be positive".into()));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidInput(format!("SNR {snr_db} dB is not usable")));
    }
    let (m, k) = a_star.shape();
    let flat = DirichletParam::uniform(k);
    let mut rng = seeded(derive_seed(seed, 0x2A));
    let mut z_star = DMatrix::zeros(k, pixels);
    for n in 0..pixels {
        z_star.column_mut(n).copy_from_slice(&flat.sample(&mut rng));
    }
    let clean = a_star * &z_star;
    let sigma2 = if snr_db == f64::INFINITY {
        0.0
    } else {
        clean.norm_squared() / (10f64.powf(snr_db / 10.0) * (m * pixels) as f64)
    };
    let mut y = clean;
    if sigma2 > 0.0 {
        let sd = sigma2.sqrt();
        let mut noise_rng = seeded(derive_seed(seed, 0x4E));
        for v in y.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut noise_rng);
            *v += sd * e;
        }
    }
    Ok(SynthBundle {
        y: PixelMatrix::new(y)?,
        a_star: a_star.clone(),
        z_star,
        sigma2,
        snr_db,
        seed,
    })
}
