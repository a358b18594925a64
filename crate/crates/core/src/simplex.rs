//! Euclidean projection onto the unit simplex `{x : x ≥ 0, Σx = 1}`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Returns the closest point of the unit simplex to `v`.
///
/// Sort-based thresholding; the surviving entries are renormalized by their
/// sum afterwards so the output sums to one up to a single rounding.
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("cannot project an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("simplex projection needs finite input".into()));
    }
    let mut out = v.to_vec();
    project_in_place(&mut out);
    Ok(out)
}

/// In-place projection; `v` must be non-empty and finite.
pub(crate) fn project_in_place(v: &mut [f64]) {
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = sorted[0];
    let mut theta = sorted[0] - 1.0;
    for (i, &u) in sorted.iter().enumerate().skip(1) {
        cumsum += u;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    let argmax = v
        .iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best });
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
        total += *x;
    }
    if total > 0.0 {
        for x in v.iter_mut() {
            *x /= total;
        }
    } else {
        // magnitudes so large that the threshold absorbed every entry
        v[argmax] = 1.0;
    }
}

/// Projects every column of `m` onto the simplex.
pub(crate) fn project_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        project_in_place(col.as_mut_slice());
    }
}
