//! Scalar and vector primitives: soft-thresholding, truncation, the theta
//! step-size recursion, and the training losses.
//!
//! All functions here are pure; they carry no state and may be called from
//! any number of threads.

use crate::error::{CdecError, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// sgn(x) with sgn(0) = 0, so thresholding stays continuous at the origin.
#[inline]
pub fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Componentwise soft-threshold S_tau(x) = sgn(x) * max(0, |x| - tau).
#[inline]
pub fn soft_threshold_scalar(x: f64, tau: f64) -> f64 {
    sgn(x) * (x.abs() - tau).max(0.0)
}

/// Componentwise truncation T_tau(x): clamp to [-tau, tau].
#[inline]
pub fn truncate_scalar(x: f64, tau: f64) -> f64 {
    x.clamp(-tau, tau)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau < 0.0 {
        return Err(CdecError::invalid(format!(
            "threshold must be nonnegative, got {tau}"
        )));
    }
    Ok(())
}

/// Soft-threshold applied to every component of a vector.
pub fn soft_threshold(x: ArrayView1<f64>, tau: f64) -> Result<Array1<f64>> {
    check_tau(tau)?;
    Ok(x.mapv(|v| soft_threshold_scalar(v, tau)))
}

/// Truncation applied to every component of a vector.
pub fn truncate(x: ArrayView1<f64>, tau: f64) -> Result<Array1<f64>> {
    check_tau(tau)?;
    Ok(x.mapv(|v| truncate_scalar(v, tau)))
}

/// Projection of a vector onto the Euclidean ball of radius `c`, written as
/// the shrink map z * max(0, 1 - c/||z||). This is the proximal map of
/// c*||.||_2 and the block counterpart of the componentwise soft-threshold.
pub fn block_shrink(z: ArrayView1<f64>, c: f64) -> Result<Array1<f64>> {
    check_tau(c)?;
    let norm = z.dot(&z).sqrt();
    if norm <= c {
        Ok(Array1::zeros(z.len()))
    } else {
        let s = 1.0 - c / norm;
        Ok(z.mapv(|v| v * s))
    }
}

/// One step of the Nesterov-style step-size recursion
/// theta_next = 2 / (1 + sqrt(1 + 4/theta^2)).
pub fn theta_next(theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(CdecError::invalid(format!(
            "theta must lie in (0, 1], got {theta}"
        )));
    }
    Ok(2.0 / (1.0 + (1.0 + 4.0 / (theta * theta)).sqrt()))
}

/// The schedule theta_0 = 1, theta_{k+1} = theta_next(theta_k), as a vector
/// of the first `len` values.
pub fn theta_schedule(len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut th = 1.0;
    for _ in 0..len {
        out.push(th);
        th = theta_next(th).expect("schedule stays in (0, 1]");
    }
    out
}

/// log cosh t via the overflow-safe identity |t| + log1p(e^{-2|t|}) - log 2;
/// naive cosh overflows near |t| = 710 in double precision.
#[inline]
pub fn log_cosh_scalar(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn check_shapes(predictions: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<()> {
    if predictions.dim() != targets.dim() {
        return Err(CdecError::invalid(format!(
            "prediction batch {:?} does not match target batch {:?}",
            predictions.dim(),
            targets.dim()
        )));
    }
    if predictions.nrows() == 0 {
        return Err(CdecError::invalid("empty batch"));
    }
    Ok(())
}

/// Log-cosh residual sum over a batch (rows are samples), before the
/// mean-over-samples reduction. Exposed so chunked evaluation can add
/// partial sums in a fixed order and divide once.
pub fn log_cosh_sum(predictions: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    check_shapes(predictions, targets)?;
    let mut total = 0.0;
    for (p, t) in predictions.rows().into_iter().zip(targets.rows()) {
        let mut s = 0.0;
        for (a, b) in p.iter().zip(t.iter()) {
            s += log_cosh_scalar(a - b);
        }
        total += s;
    }
    Ok(total)
}

/// Log-cosh loss over a batch (rows are samples): sum of log cosh over the
/// components of each residual, averaged over samples.
pub fn log_cosh_loss(predictions: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    Ok(log_cosh_sum(predictions, targets)? / predictions.nrows() as f64)
}

/// Gradient of the log-cosh residual sum divided by `denom`:
/// tanh(residual) / denom. With denom = nrows this is the gradient of
/// `log_cosh_loss`; chunked training passes the full batch size instead.
pub fn log_cosh_grad_scaled(
    predictions: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    denom: f64,
) -> Result<Array2<f64>> {
    check_shapes(predictions, targets)?;
    let mut g = &predictions.to_owned() - &targets;
    g.mapv_inplace(|t| t.tanh() / denom);
    Ok(g)
}

/// Gradient of `log_cosh_loss` with respect to the predictions:
/// tanh(residual) / s, matching the sum-over-components, mean-over-samples
/// reduction.
pub fn log_cosh_grad(
    predictions: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    log_cosh_grad_scaled(predictions, targets, predictions.nrows() as f64)
}

/// Squared-residual sum over a batch, before the mean-over-samples
/// reduction.
pub fn mse_sum(predictions: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    check_shapes(predictions, targets)?;
    let mut total = 0.0;
    for (p, t) in predictions.rows().into_iter().zip(targets.rows()) {
        for (a, b) in p.iter().zip(t.iter()) {
            let r = a - b;
            total += r * r;
        }
    }
    Ok(total)
}

/// Mean-squared-error baseline with the same reduction convention:
/// squared Euclidean residual norm per sample, averaged over samples.
pub fn mse_loss(predictions: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    Ok(mse_sum(predictions, targets)? / predictions.nrows() as f64)
}

/// Gradient of the squared-residual sum divided by `denom`: 2*residual/denom.
pub fn mse_grad_scaled(
    predictions: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    denom: f64,
) -> Result<Array2<f64>> {
    check_shapes(predictions, targets)?;
    let mut g = &predictions.to_owned() - &targets;
    g.mapv_inplace(|t| 2.0 * t / denom);
    Ok(g)
}

/// Gradient of `mse_loss` with respect to the predictions: 2*residual / s.
pub fn mse_grad(predictions: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Array2<f64>> {
    mse_grad_scaled(predictions, targets, predictions.nrows() as f64)
}

/// Loss selector used by the trainer and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    LogCosh,
    Mse,
}

impl LossKind {
    pub fn eval(self, predictions: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
        match self {
            LossKind::LogCosh => log_cosh_loss(predictions, targets),
            LossKind::Mse => mse_loss(predictions, targets),
        }
    }

    pub fn grad(
        self,
        predictions: ArrayView2<f64>,
        targets: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        match self {
            LossKind::LogCosh => log_cosh_grad(predictions, targets),
            LossKind::Mse => mse_grad(predictions, targets),
        }
    }

    /// Residual sum before the mean-over-samples division.
    pub fn eval_sum(self, predictions: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
        match self {
            LossKind::LogCosh => log_cosh_sum(predictions, targets),
            LossKind::Mse => mse_sum(predictions, targets),
        }
    }

    /// Gradient of the residual sum divided by an explicit denominator.
    pub fn grad_scaled(
        self,
        predictions: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        denom: f64,
    ) -> Result<Array2<f64>> {
        match self {
            LossKind::LogCosh => log_cosh_grad_scaled(predictions, targets, denom),
            LossKind::Mse => mse_grad_scaled(predictions, targets, denom),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::LogCosh => "log-cosh",
            LossKind::Mse => "mse",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = CdecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log-cosh" | "logcosh" => Ok(LossKind::LogCosh),
            "mse" => Ok(LossKind::Mse),
            other => Err(CdecError::invalid(format!(
                "unknown loss '{other}' (expected log-cosh or mse)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn soft_threshold_matches_formula_cases() {
        let x = array![2.5, -0.5, 0.0, -4.0];
        let s = soft_threshold(x.view(), 1.0).unwrap();
        assert_eq!(s, array![1.5, 0.0, 0.0, -3.0]);
    }

    #[test]
    fn soft_threshold_with_zero_tau_is_identity() {
        let x = array![1.25, -7.5, 0.0, 3e-12];
        assert_eq!(soft_threshold(x.view(), 0.0).unwrap(), x);
    }

    #[test]
    fn truncate_clamps_to_interval() {
        let x = array![2.5, -0.3, -4.0];
        let t = truncate(x.view(), 1.0).unwrap();
        assert_eq!(t, array![1.0, -0.3, -1.0]);
        assert_eq!(truncate(array![-4.0].view(), 2.0).unwrap()[0], -2.0);
    }

    #[test]
    fn negative_tau_is_rejected() {
        assert!(soft_threshold(array![1.0].view(), -0.1).is_err());
        assert!(truncate(array![1.0].view(), -0.1).is_err());
        assert!(block_shrink(array![1.0].view(), -0.1).is_err());
    }

    #[test]
    fn theta_first_two_values() {
        let t1 = theta_next(1.0).unwrap();
        assert!((t1 - 0.6180339887).abs() < 1e-9);
        let t2 = theta_next(t1).unwrap();
        assert!((t2 - 0.4558867801).abs() < 1e-9);
    }

    #[test]
    fn theta_rejects_out_of_range() {
        assert!(theta_next(0.0).is_err());
        assert!(theta_next(1.5).is_err());
        assert!(theta_next(-0.2).is_err());
    }

    #[test]
    fn theta_schedule_starts_at_one_and_decreases() {
        let sch = theta_schedule(50);
        assert_eq!(sch[0], 1.0);
        for w in sch.windows(2) {
            assert!(w[1] < w[0] && w[1] > 0.0);
        }
    }

    #[test]
    fn log_cosh_known_values() {
        assert_eq!(log_cosh_scalar(0.0), 0.0);
        assert!((log_cosh_scalar(1.0) - 0.4337808305).abs() < 1e-10);
        let expected = 50.0 - std::f64::consts::LN_2;
        assert!((log_cosh_scalar(50.0) - expected).abs() < 1e-12);
        assert!(log_cosh_scalar(1e4).is_finite());
    }

    #[test]
    fn log_cosh_loss_reduction_sums_components_means_samples() {
        // two samples, residuals (1, 0) and (0, 1): per-sample sum is
        // logcosh(1), mean over the two samples keeps that value
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        let t = array![[0.0, 0.0], [0.0, 0.0]];
        let l = log_cosh_loss(p.view(), t.view()).unwrap();
        assert!((l - log_cosh_scalar(1.0)).abs() < 1e-15);
        assert_eq!(log_cosh_loss(t.view(), t.view()).unwrap(), 0.0);
    }

    #[test]
    fn mse_loss_known_values() {
        let p = array![[3.0, 4.0]];
        let t = array![[0.0, 0.0]];
        assert_eq!(mse_loss(p.view(), t.view()).unwrap(), 25.0);
        let p2 = array![[1.0, 0.0], [0.0, 1.0]];
        let t2 = array![[0.0, 0.0], [0.0, 0.0]];
        assert_eq!(mse_loss(p2.view(), t2.view()).unwrap(), 1.0);
        assert_eq!(mse_loss(t2.view(), t2.view()).unwrap(), 0.0);
    }

    #[test]
    fn loss_shape_mismatch_is_rejected() {
        let p = array![[1.0, 2.0]];
        let t = array![[1.0]];
        assert!(log_cosh_loss(p.view(), t.view()).is_err());
        assert!(mse_loss(p.view(), t.view()).is_err());
    }

    #[test]
    fn block_shrink_matches_projection_cases() {
        // inside the ball: shrinks to zero
        let z = array![0.3, 0.4];
        assert_eq!(block_shrink(z.view(), 0.5).unwrap(), array![0.0, 0.0]);
        // outside: scales by 1 - c/||z||
        let z = array![3.0, 4.0];
        let out = block_shrink(z.view(), 2.5).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-15);
        assert!((out[1] - 2.0).abs() < 1e-15);
        // zero radius: identity
        let z = array![1.0, -2.0];
        assert_eq!(block_shrink(z.view(), 0.0).unwrap(), z);
    }

    #[test]
    fn grads_match_finite_differences() {
        let p = array![[0.8, -0.3], [1.4, 0.1]];
        let t = array![[0.5, 0.2], [-0.6, 0.0]];
        let h = 1e-6;
        for kind in [LossKind::LogCosh, LossKind::Mse] {
            let g = kind.grad(p.view(), t.view()).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let mut pp = p.clone();
                    pp[[i, j]] += h;
                    let lp = kind.eval(pp.view(), t.view()).unwrap();
                    pp[[i, j]] -= 2.0 * h;
                    let lm = kind.eval(pp.view(), t.view()).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    assert!(
                        (g[[i, j]] - fd).abs() < 1e-8,
                        "{} grad mismatch at ({i},{j}): {} vs {}",
                        kind.name(),
                        g[[i, j]],
                        fd
                    );
                }
            }
        }
    }
}
