//! Measurement ensembles, noisy measurements, analysis-operator
//! initialization, and dataset construction (synthetic generators plus
//! file-based ingestion in the submodules).

pub mod cache;
pub mod idx;
pub mod images;

use crate::error::{CdecError, Result};
use crate::seed::rng_for;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

/// One instance of the conic recovery problem: measurements, noise bound,
/// initial guess and penalty weight for a fixed sensing matrix.
#[derive(Debug, Clone)]
pub struct SensingProblem {
    pub a_tilde: Array2<f64>,
    pub y: Array1<f64>,
    pub eps: f64,
    pub x0: Array1<f64>,
    pub mu: f64,
}

impl SensingProblem {
    /// Assemble a problem from a signal: measure it, then use the standard
    /// setups eps = ||y - Ax||, x0 = A^T y.
    pub fn from_signal(
        a_tilde: &Array2<f64>,
        x: ArrayView1<f64>,
        noise_std: f64,
        mu: f64,
        root_seed: u64,
        label: &str,
    ) -> Result<Self> {
        let (y, eps) = measure(x, a_tilde.view(), noise_std, root_seed, label)?;
        let x0 = default_x0(a_tilde.view(), y.view())?;
        Ok(SensingProblem {
            a_tilde: a_tilde.clone(),
            y,
            eps,
            x0,
            mu,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.a_tilde.dim()
    }
}

/// A paired (signal, measurement) collection with the per-sample quantities
/// the decoder consumes frozen at build time.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Signals, one row per sample (count x n).
    pub x: Array2<f64>,
    /// Measurements, one row per sample (count x m).
    pub y: Array2<f64>,
    /// Initial guesses x0 = A^T y (count x n).
    pub x0: Array2<f64>,
    /// Per-sample noise bounds eps = ||y - Ax||.
    pub eps: Array1<f64>,
    /// Split tag, e.g. "train" or "test".
    pub tag: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    /// Rows `range` as a new dataset (used for train/validation carving).
    pub fn slice(&self, range: std::ops::Range<usize>, tag: &str) -> Dataset {
        Dataset {
            x: self.x.slice(ndarray::s![range.clone(), ..]).to_owned(),
            y: self.y.slice(ndarray::s![range.clone(), ..]).to_owned(),
            x0: self.x0.slice(ndarray::s![range.clone(), ..]).to_owned(),
            eps: self.eps.slice(ndarray::s![range.clone()]).to_owned(),
            tag: tag.to_string(),
        }
    }

    /// Build the derived per-sample quantities for a signal matrix.
    pub fn from_signals(
        signals: Array2<f64>,
        a_tilde: ArrayView2<f64>,
        noise_std: f64,
        root_seed: u64,
        noise_label: &str,
        tag: &str,
    ) -> Result<Dataset> {
        let (count, n) = signals.dim();
        let m = a_tilde.nrows();
        if a_tilde.ncols() != n {
            return Err(CdecError::invalid(format!(
                "sensing matrix is {}x{} but signals have dimension {n}",
                m,
                a_tilde.ncols()
            )));
        }
        let mut rng = rng_for(root_seed, noise_label);
        // y = A x + e, row convention: Y = X A^T + E
        let mut y = signals.dot(&a_tilde.t());
        let mut eps = Array1::zeros(count);
        for (i, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            let mut sq = 0.0;
            for v in row.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                let e = e * noise_std;
                *v += e;
                sq += e * e;
            }
            eps[i] = sq.sqrt();
        }
        let x0 = y.dot(&a_tilde);
        Ok(Dataset {
            x: signals,
            y,
            x0,
            eps,
            tag: tag.to_string(),
        })
    }
}

/// Gaussian sensing matrix with entries N(0, 1)/sqrt(m), so that squared
/// column norms concentrate around 1.
pub fn gaussian_measurement_matrix(
    m: usize,
    n: usize,
    root_seed: u64,
    label: &str,
) -> Result<Array2<f64>> {
    if m == 0 || m >= n {
        return Err(CdecError::invalid(format!(
            "need 0 < m < n for an undersampling matrix, got m={m}, n={n}"
        )));
    }
    let mut rng = rng_for(root_seed, label);
    let scale = 1.0 / (m as f64).sqrt();
    Ok(Array2::from_shape_fn((m, n), |_| {
        let g: f64 = StandardNormal.sample(&mut rng);
        g * scale
    }))
}

/// Measure one signal: y = A_tilde x + e with e ~ N(0, noise_std^2 I), and
/// the realized noise bound eps = ||y - A_tilde x|| = ||e||.
pub fn measure(
    x: ArrayView1<f64>,
    a_tilde: ArrayView2<f64>,
    noise_std: f64,
    root_seed: u64,
    label: &str,
) -> Result<(Array1<f64>, f64)> {
    if a_tilde.ncols() != x.len() {
        return Err(CdecError::invalid(format!(
            "signal dimension {} does not match sensing matrix columns {}",
            x.len(),
            a_tilde.ncols()
        )));
    }
    if noise_std < 0.0 {
        return Err(CdecError::invalid("noise_std must be nonnegative"));
    }
    let mut rng = rng_for(root_seed, label);
    let mut y = a_tilde.dot(&x);
    let mut sq = 0.0;
    for v in y.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        let e = e * noise_std;
        *v += e;
        sq += e * e;
    }
    Ok((y, sq.sqrt()))
}

/// The standard initial guess x0 = A_tilde^T y.
pub fn default_x0(a_tilde: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<Array1<f64>> {
    if a_tilde.nrows() != y.len() {
        return Err(CdecError::invalid(format!(
            "measurement dimension {} does not match sensing matrix rows {}",
            y.len(),
            a_tilde.nrows()
        )));
    }
    Ok(a_tilde.t().dot(&y))
}

/// Redundant analysis-operator initialization: entries i.i.d. Beta(2, 2),
/// shifted by the Beta mean 1/2 to zero mean, scaled by 1/sqrt(N). Variance
/// O(1/N) keeps ||Wx|| comparable to ||x|| at both N = 10n and N = 50n.
pub fn init_analysis_operator(
    nn: usize,
    n: usize,
    root_seed: u64,
    label: &str,
) -> Result<Array2<f64>> {
    if nn <= n {
        return Err(CdecError::invalid(format!(
            "analysis operator must be redundant (N > n), got N={nn}, n={n}"
        )));
    }
    let beta = Beta::new(2.0, 2.0).expect("valid Beta parameters");
    let mut rng = rng_for(root_seed, label);
    let scale = 1.0 / (nn as f64).sqrt();
    Ok(Array2::from_shape_fn((nn, n), |_| {
        (beta.sample(&mut rng) - 0.5) * scale
    }))
}

/// Exactly-s-sparse signals with standard normal values on a uniformly
/// random support, one row per sample.
pub fn sparse_signals(
    n: usize,
    s: usize,
    count: usize,
    root_seed: u64,
    label: &str,
) -> Result<Array2<f64>> {
    if s == 0 || s > n {
        return Err(CdecError::invalid(format!(
            "sparsity must satisfy 0 < s <= n, got s={s}, n={n}"
        )));
    }
    let mut rng = rng_for(root_seed, label);
    let mut out = Array2::zeros((count, n));
    let mut positions: Vec<usize> = (0..n).collect();
    for i in 0..count {
        // partial Fisher-Yates: first s entries become the support
        for j in 0..s {
            let k = rng.gen_range(j..n);
            positions.swap(j, k);
        }
        for &p in &positions[..s] {
            let g: f64 = StandardNormal.sample(&mut rng);
            out[[i, p]] = g;
        }
    }
    Ok(out)
}

/// Synthetic sparse dataset: sparse signals paired with measurements.
pub fn synthetic_sparse_dataset(
    n: usize,
    s: usize,
    count: usize,
    a_tilde: ArrayView2<f64>,
    noise_std: f64,
    root_seed: u64,
    tag: &str,
) -> Result<Dataset> {
    let signals = sparse_signals(n, s, count, root_seed, &format!("sparse/{tag}"))?;
    Dataset::from_signals(
        signals,
        a_tilde,
        noise_std,
        root_seed,
        &format!("noise/{tag}"),
        tag,
    )
}

/// Largest singular value via power iteration on M^T M. The start vector is
/// drawn from a fixed internal stream so repeated calls are identical.
pub fn spectral_norm_estimate(m: ArrayView2<f64>, iterations: usize, tol: f64) -> f64 {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut rng = rng_for(0x5eed, "power-iteration/start");
    let mut v = Array1::from_shape_fn(cols, |_| {
        let g: f64 = StandardNormal.sample(&mut rng);
        g
    });
    let nv = v.dot(&v).sqrt();
    if nv == 0.0 {
        return 0.0;
    }
    v.mapv_inplace(|t| t / nv);
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let mv = m.dot(&v);
        let new_sigma = mv.dot(&mv).sqrt();
        if new_sigma == 0.0 {
            return 0.0;
        }
        let mut w = m.t().dot(&mv);
        let nw = w.dot(&w).sqrt();
        w.mapv_inplace(|t| t / nw);
        v = w;
        if (new_sigma - sigma).abs() <= tol * new_sigma.max(1.0) {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn measurement_matrix_is_deterministic_and_scaled() {
        let a = gaussian_measurement_matrix(196, 784, 7, "sensing/A").unwrap();
        let b = gaussian_measurement_matrix(196, 784, 7, "sensing/A").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (196, 784));
        // mean squared column norm concentrates near 1
        let mean_sq: f64 = a.axis_iter(Axis(1)).map(|c| c.dot(&c)).sum::<f64>() / 784.0;
        assert!((0.9..1.1).contains(&mean_sq), "mean sq col norm {mean_sq}");
    }

    #[test]
    fn measurement_matrix_rejects_oversampling() {
        assert!(gaussian_measurement_matrix(10, 10, 0, "x").is_err());
        assert!(gaussian_measurement_matrix(11, 10, 0, "x").is_err());
        assert!(gaussian_measurement_matrix(0, 10, 0, "x").is_err());
    }

    #[test]
    fn measure_noiseless_gives_exact_eps_zero() {
        let a = gaussian_measurement_matrix(3, 8, 1, "a").unwrap();
        let x = Array1::linspace(0.0, 1.0, 8);
        let (y, eps) = measure(x.view(), a.view(), 0.0, 2, "noise").unwrap();
        assert_eq!(eps, 0.0);
        let diff = &y - &a.dot(&x);
        assert!(diff.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn measure_zero_signal_returns_pure_noise() {
        let a = gaussian_measurement_matrix(4, 9, 1, "a").unwrap();
        let x = Array1::zeros(9);
        let (y, eps) = measure(x.view(), a.view(), 0.1, 3, "noise").unwrap();
        let norm = y.dot(&y).sqrt();
        assert!((norm - eps).abs() < 1e-12);
    }

    #[test]
    fn measure_eps_concentrates_for_small_noise() {
        let a = gaussian_measurement_matrix(196, 784, 11, "a").unwrap();
        let x = Array1::from_elem(784, 0.5);
        let (_, eps) = measure(x.view(), a.view(), 1e-4, 5, "noise").unwrap();
        let expected = 1e-4 * (196f64).sqrt();
        assert!(eps > expected / 2.0 && eps < expected * 2.0, "eps {eps}");
    }

    #[test]
    fn default_x0_matches_triple_loop_oracle() {
        let a = gaussian_measurement_matrix(5, 12, 3, "a").unwrap();
        let y = Array1::linspace(-1.0, 1.0, 5);
        let x0 = default_x0(a.view(), y.view()).unwrap();
        for j in 0..12 {
            let mut acc = 0.0;
            for i in 0..5 {
                acc += a[[i, j]] * y[i];
            }
            assert!((x0[j] - acc).abs() < 1e-12);
        }
        assert_eq!(
            default_x0(a.view(), Array1::<f64>::zeros(5).view()).unwrap(),
            Array1::<f64>::zeros(12)
        );
    }

    #[test]
    fn default_x0_identity_block_case() {
        // leading identity block: y = e1 maps to e1 in n dimensions
        let mut a = Array2::zeros((2, 5));
        a[[0, 0]] = 1.0;
        a[[1, 1]] = 1.0;
        let y = array![1.0, 0.0];
        let x0 = default_x0(a.view(), y.view()).unwrap();
        assert_eq!(x0, array![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn analysis_init_shape_mean_and_determinism() {
        let w = init_analysis_operator(1960, 196, 9, "init/W").unwrap();
        assert_eq!(w.dim(), (1960, 196));
        assert_eq!(w, init_analysis_operator(1960, 196, 9, "init/W").unwrap());
        // zero-mean check: entry standard error is 1/(sqrt(20 N) * sqrt(draws))
        let draws = (1960 * 196) as f64;
        let mean: f64 = w.iter().sum::<f64>() / draws;
        let entry_std = (0.05f64 / 1960.0).sqrt();
        assert!(mean.abs() < 3.0 * entry_std / draws.sqrt(), "mean {mean}");
        assert!(init_analysis_operator(100, 100, 0, "w").is_err());
    }

    #[test]
    fn sparse_signals_have_exact_support() {
        let xs = sparse_signals(64, 4, 50, 13, "sparse").unwrap();
        for row in xs.rows() {
            let nnz = row.iter().filter(|v| **v != 0.0).count();
            assert_eq!(nnz, 4);
        }
        assert!(sparse_signals(64, 0, 1, 0, "s").is_err());
        assert!(sparse_signals(64, 65, 1, 0, "s").is_err());
        assert_eq!(xs, sparse_signals(64, 4, 50, 13, "sparse").unwrap());
    }

    #[test]
    fn dataset_from_signals_freezes_consistent_quantities() {
        let a = gaussian_measurement_matrix(16, 64, 21, "a").unwrap();
        let xs = sparse_signals(64, 4, 10, 22, "sig").unwrap();
        let ds = Dataset::from_signals(xs.clone(), a.view(), 1e-4, 23, "noise", "train").unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!((ds.n(), ds.m()), (64, 16));
        for i in 0..10 {
            let resid = &ds.y.row(i).to_owned() - &a.dot(&xs.row(i));
            let nrm = resid.dot(&resid).sqrt();
            assert!((nrm - ds.eps[i]).abs() < 1e-12);
            let x0 = a.t().dot(&ds.y.row(i));
            let diff = &x0 - &ds.x0.row(i);
            assert!(diff.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn spectral_norm_on_known_matrices() {
        let eye = Array2::<f64>::eye(6);
        assert!((spectral_norm_estimate(eye.view(), 100, 1e-12) - 1.0).abs() < 1e-9);
        let d = Array2::from_diag(&array![3.0, 1.0]);
        assert!((spectral_norm_estimate(d.view(), 200, 1e-14) - 3.0).abs() < 1e-9);
        let z = Array2::<f64>::zeros((4, 3));
        assert_eq!(spectral_norm_estimate(z.view(), 50, 1e-12), 0.0);
    }
}
