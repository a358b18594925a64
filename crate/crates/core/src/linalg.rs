use nalgebra::{DMatrix, DVector};

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power iteration.
///
/// Starts from the all-ones vector, which overlaps the Perron vector of the
/// nonnegative Gram matrices this crate feeds in.
pub(crate) fn top_eigenvalue_psd(m: &DMatrix<f64>, rounds: usize, tol: f64) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 1e-3 * i as f64);
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..rounds {
        let w = m * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - lambda).abs() <= tol * next.abs().max(f64::MIN_POSITIVE) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0)
}

/// Frobenius inner product `⟨a, b⟩ = Σ a_ij b_ij`.
pub(crate) fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
