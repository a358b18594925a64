//! Independent reference implementations shared by the integration suites.

#![allow(dead_code)]

use mssmf::{FactorStack, PixelMatrix, VariationalParams};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::{digamma, ln_gamma};

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Dirichlet draw by normalizing independent Gamma variates.
pub fn dirichlet_draw(rng: &mut impl Rng, beta: &[f64]) -> Vec<f64> {
    let x: Vec<f64> = beta
        .iter()
        .map(|&b| Gamma::new(b, 1.0).unwrap().sample(rng))
        .collect();
    let total: f64 = x.iter().sum();
    x.into_iter().map(|v| v / total).collect()
}

pub struct Instance {
    pub y: PixelMatrix,
    pub stack: FactorStack,
    pub betas: VariationalParams,
}

/// Random feasible model with `sizes = (K1, …, KP)`.
pub fn random_instance(rng: &mut impl Rng, m: usize, sizes: &[usize], n: usize) -> Instance {
    let a1 = DMatrix::from_fn(m, sizes[0], |_, _| 0.05 + rng.random::<f64>());
    let layers = sizes
        .windows(2)
        .map(|w| {
            let mut s = DMatrix::zeros(w[0], w[1]);
            for j in 0..w[1] {
                let col = dirichlet_draw(rng, &vec![1.0; w[0]]);
                s.column_mut(j).copy_from_slice(&col);
            }
            s
        })
        .collect();
    let sigma2 = 0.05 + 0.45 * rng.random::<f64>();
    let kp = *sizes.last().unwrap();
    let beta = DMatrix::from_fn(kp, n, |_, _| 0.5 + 3.5 * rng.random::<f64>());
    let y = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>());
    Instance {
        y: PixelMatrix::new(y).unwrap(),
        stack: FactorStack::new(a1, layers, sigma2).unwrap(),
        betas: VariationalParams::new(beta).unwrap(),
    }
}

/// `A1 · S1 ⋯` by explicit loops.
pub fn product(a1: &DMatrix<f64>, layers: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = a1.clone();
    for s in layers {
        let mut next = DMatrix::zeros(acc.nrows(), s.ncols());
        for i in 0..acc.nrows() {
            for j in 0..s.ncols() {
                let mut v = 0.0;
                for k in 0..acc.ncols() {
                    v += acc[(i, k)] * s[(k, j)];
                }
                next[(i, j)] = v;
            }
        }
        acc = next;
    }
    acc
}

/// Expected squared residual `E_q ‖y − B s‖²` from the Dirichlet moments.
pub fn residual(y: &[f64], b: &DMatrix<f64>, beta: &[f64]) -> f64 {
    let k = beta.len();
    let s: f64 = beta.iter().sum();
    let mean: Vec<f64> = beta.iter().map(|v| v / s).collect();
    let second = DMatrix::from_fn(k, k, |i, j| {
        let d = if i == j { beta[i] } else { 0.0 };
        (d + beta[i] * beta[j]) / (s * (s + 1.0))
    });
    let yv = DVector::from_column_slice(y);
    let bm = b * DVector::from_vec(mean);
    let gram = b.transpose() * b;
    yv.norm_squared() - 2.0 * yv.dot(&bm) + (gram * second).trace()
}

pub fn entropy(beta: &[f64]) -> f64 {
    let k = beta.len() as f64;
    let s: f64 = beta.iter().sum();
    beta.iter().map(|&b| ln_gamma(b) - (b - 1.0) * digamma(b)).sum::<f64>() - ln_gamma(s)
        + (s - k) * digamma(s)
}

/// Lower bound evaluated from raw factors, with no feasibility checks.
pub fn elbo(y: &DMatrix<f64>, b: &DMatrix<f64>, beta: &DMatrix<f64>, sigma2: f64) -> f64 {
    let (m, n) = y.shape();
    let kp = beta.nrows();
    let mut total = 0.0;
    for p in 0..n {
        let yn: Vec<f64> = y.column(p).iter().copied().collect();
        let bn: Vec<f64> = beta.column(p).iter().copied().collect();
        total += -0.5 * m as f64 * (2.0 * std::f64::consts::PI * sigma2).ln()
            - residual(&yn, b, &bn) / (2.0 * sigma2)
            + ln_gamma(kp as f64)
            + entropy(&bn);
    }
    total / n as f64
}

/// Monte-Carlo estimate of `E_q[log p(y, s) − log q(s)]` with its standard error.
pub fn monte_carlo_elbo(
    y: &DMatrix<f64>,
    b: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    sigma2: f64,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = rng(seed);
    let (m, n) = y.shape();
    let kp = beta.nrows();
    let norm = -0.5 * m as f64 * (2.0 * std::f64::consts::PI * sigma2).ln() + ln_gamma(kp as f64);
    let log_norm_q: Vec<f64> = (0..n)
        .map(|p| {
            let col = beta.column(p);
            ln_gamma(col.sum()) - col.iter().map(|&v| ln_gamma(v)).sum::<f64>()
        })
        .collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut fit = DVector::zeros(m);
    for _ in 0..draws {
        let mut value = 0.0;
        for p in 0..n {
            let bn: Vec<f64> = beta.column(p).iter().copied().collect();
            let s = dirichlet_draw(&mut rng, &bn);
            fit.copy_from(&y.column(p));
            for (k, sk) in s.iter().enumerate() {
                fit.axpy(-sk, &b.column(k), 1.0);
            }
            let log_q = log_norm_q[p]
                + bn.iter().zip(&s).map(|(bk, sk)| (bk - 1.0) * sk.ln()).sum::<f64>();
            value += norm - fit.norm_squared() / (2.0 * sigma2) - log_q;
        }
        value /= n as f64;
        sum += value;
        sum_sq += value * value;
    }
    let mean = sum / draws as f64;
    let var = (sum_sq / draws as f64 - mean * mean) * draws as f64 / (draws - 1) as f64;
    (mean, (var / draws as f64).sqrt())
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn fd_matrix(x: &DMatrix<f64>, h: f64, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut grad = DMatrix::zeros(x.nrows(), x.ncols());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut up = x.clone();
            up[(i, j)] += h;
            let mut down = x.clone();
            down[(i, j)] -= h;
            grad[(i, j)] = (f(&up) - f(&down)) / (2.0 * h);
        }
    }
    grad
}

/// `‖a − b‖ / ‖b‖`, or the absolute difference when `b` vanishes.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale > 1e-12 {
        diff / scale
    } else {
        diff
    }
}

/// Euclidean projection onto the simplex by enumerating every support set.
pub fn brute_simplex(v: &[f64]) -> Vec<f64> {
    let k = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let support: Vec<usize> = (0..k).filter(|&i| mask & (1 << i) != 0).collect();
        let shift = (support.iter().map(|&i| v[i]).sum::<f64>() - 1.0) / support.len() as f64;
        let mut x = vec![0.0; k];
        let mut feasible = true;
        for &i in &support {
            x[i] = v[i] - shift;
            if x[i] < -1e-15 {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        let dist: f64 = x.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, x));
        }
    }
    best.unwrap().1
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Minimum total cost and the first optimal permutation in lexicographic order.
pub fn brute_assignment(cost: &DMatrix<f64>) -> (f64, Vec<usize>) {
    let mut best = (f64::INFINITY, Vec::new());
    for p in permutations(cost.nrows()) {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        if best.1.is_empty() || total < best.0 - 1e-12 * (1.0 + best.0.abs()) {
            best = (total, p);
        }
    }
    best
}

/// Noiseless pure-pixel data: the first `k` chosen columns are the vertices themselves.
pub struct PurePixelData {
    pub endmembers: DMatrix<f64>,
    pub abundances: DMatrix<f64>,
    pub y: PixelMatrix,
}

pub fn pure_pixel_data(rng: &mut impl Rng, m: usize, k: usize, n: usize) -> PurePixelData {
    let endmembers = DMatrix::from_fn(m, k, |_, _| 0.05 + 0.9 * rng.random::<f64>());
    let mut abundances = DMatrix::zeros(k, n);
    let slots = rand::seq::index::sample(rng, n, k).into_vec();
    for p in 0..n {
        let col = match slots.iter().position(|&s| s == p) {
            Some(v) => {
                let mut e = vec![0.0; k];
                e[v] = 1.0;
                e
            }
            None => dirichlet_draw(rng, &vec![1.0; k]),
        };
        abundances.column_mut(p).copy_from_slice(&col);
    }
    let y = PixelMatrix::new(&endmembers * &abundances).unwrap();
    PurePixelData {
        endmembers,
        abundances,
        y,
    }
}
