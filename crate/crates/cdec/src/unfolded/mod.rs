//! The unrolled decoder: L layers, each executing one iteration of the conic
//! solver's loop body with a learnable analysis operator W shared across all
//! layers, plus the analytic reverse pass that training uses. Batches are
//! row-major (one sample per row) so every layer is a handful of GEMMs.

pub mod checkpoint;

use crate::error::{CdecError, Result};
use crate::ops::{block_shrink, theta_schedule, truncate_scalar};
use crate::sensing::spectral_norm_estimate;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Loss partial derivatives with respect to the entries of W.
pub type GradW = Array2<f64>;

/// L unrolled iterations with one shared learnable W. The step sizes and the
/// theta schedule are frozen at construction; training moves W only.
#[derive(Debug, Clone)]
pub struct UnrolledDecoder {
    l_layers: usize,
    w: Array2<f64>,
    t1: f64,
    t2: f64,
    mu: f64,
    thetas: Vec<f64>,
    m: usize,
}

/// Per-layer cache from a forward pass: the dual state entering each layer,
/// the recovered x, and the pre-threshold arguments of both nonlinearities.
#[derive(Debug, Clone)]
pub struct StageTape {
    pub z1: Vec<Array2<f64>>,
    pub u1: Vec<Array2<f64>>,
    pub z2: Vec<Array2<f64>>,
    pub u2: Vec<Array2<f64>>,
    pub x: Vec<Array2<f64>>,
    pub a1: Vec<Array2<f64>>,
    pub a2: Vec<Array2<f64>>,
}

impl StageTape {
    fn with_capacity(l: usize) -> Self {
        StageTape {
            z1: Vec::with_capacity(l),
            u1: Vec::with_capacity(l),
            z2: Vec::with_capacity(l),
            u2: Vec::with_capacity(l),
            x: Vec::with_capacity(l),
            a1: Vec::with_capacity(l),
            a2: Vec::with_capacity(l),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Batch size the tape was recorded with.
    pub fn batch(&self) -> usize {
        self.x.first().map_or(0, |x| x.nrows())
    }
}

/// Structure report: dimensions, parameter count, fixed hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSummary {
    pub l_layers: usize,
    pub rows: usize,
    pub n: usize,
    pub m: usize,
    pub parameter_count: usize,
    pub t1: f64,
    pub t2: f64,
    pub mu: f64,
    pub thetas: Vec<f64>,
}

impl std::fmt::Display for DecoderSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "decoder: {} layers, W is {}x{} ({} parameters), m = {}",
            self.l_layers, self.rows, self.n, self.parameter_count, self.m
        )?;
        writeln!(
            f,
            "steps: t1 = {}, t2 = {}, mu = {}",
            self.t1, self.t2, self.mu
        )?;
        write!(f, "theta schedule: ")?;
        for (k, th) in self.thetas.iter().enumerate() {
            if k > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{th:.6}")?;
        }
        Ok(())
    }
}

impl UnrolledDecoder {
    /// Build a decoder for a fixed sensing matrix: t1 = mu / sigma_max(W)^2
    /// and t2 = mu / sigma_max(A)^2, both frozen here even though W trains
    /// afterwards. A zero operator has no curvature, so mu itself is used.
    pub fn new(l_layers: usize, w: Array2<f64>, a_tilde: ArrayView2<f64>, mu: f64) -> Result<Self> {
        let sw = spectral_norm_estimate(w.view(), 500, 1e-12);
        let sa = spectral_norm_estimate(a_tilde, 500, 1e-12);
        let t1 = if sw > 0.0 { mu / (sw * sw) } else { mu };
        let t2 = if sa > 0.0 { mu / (sa * sa) } else { mu };
        Self::with_steps(l_layers, w, t1, t2, mu, a_tilde.nrows()).and_then(|d| {
            if a_tilde.ncols() != d.n() {
                return Err(CdecError::invalid(format!(
                    "sensing matrix has {} columns but W has {}",
                    a_tilde.ncols(),
                    d.n()
                )));
            }
            Ok(d)
        })
    }

    /// Build from explicit step sizes (checkpoint loading path).
    pub fn with_steps(
        l_layers: usize,
        w: Array2<f64>,
        t1: f64,
        t2: f64,
        mu: f64,
        m: usize,
    ) -> Result<Self> {
        if l_layers == 0 {
            return Err(CdecError::invalid("decoder needs at least one layer"));
        }
        let (rows, n) = w.dim();
        if rows == 0 || n == 0 || m == 0 {
            return Err(CdecError::invalid("decoder dimensions must all be nonzero"));
        }
        for (name, v) in [("t1", t1), ("t2", t2), ("mu", mu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CdecError::invalid(format!(
                    "{name} must be a positive finite scalar, got {v}"
                )));
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(CdecError::invalid("W must be finite"));
        }
        Ok(UnrolledDecoder {
            l_layers,
            w,
            t1,
            t2,
            mu,
            thetas: theta_schedule(l_layers),
            m,
        })
    }

    pub fn l_layers(&self) -> usize {
        self.l_layers
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn n(&self) -> usize {
        self.w.ncols()
    }

    pub fn rows(&self) -> usize {
        self.w.nrows()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn t2(&self) -> f64 {
        self.t2
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    /// Replace W in place; shape must match. Step sizes stay frozen.
    pub fn set_w(&mut self, w: Array2<f64>) -> Result<()> {
        if w.dim() != self.w.dim() {
            return Err(CdecError::invalid(format!(
                "replacement W is {:?} but decoder holds {:?}",
                w.dim(),
                self.w.dim()
            )));
        }
        self.w = w;
        Ok(())
    }

    /// Same decoder with a different W (landscape scans perturb copies).
    pub fn with_w(&self, w: Array2<f64>) -> Result<Self> {
        let mut d = self.clone();
        d.set_w(w)?;
        Ok(d)
    }

    pub fn describe(&self) -> DecoderSummary {
        DecoderSummary {
            l_layers: self.l_layers,
            rows: self.rows(),
            n: self.n(),
            m: self.m,
            parameter_count: self.rows() * self.n(),
            t1: self.t1,
            t2: self.t2,
            mu: self.mu,
            thetas: self.thetas.clone(),
        }
    }

    fn check_batch_inputs(
        &self,
        a_tilde: ArrayView2<f64>,
        y: ArrayView2<f64>,
        x0: ArrayView2<f64>,
        eps: ArrayView1<f64>,
    ) -> Result<usize> {
        if a_tilde.dim() != (self.m, self.n()) {
            return Err(CdecError::invalid(format!(
                "sensing matrix is {:?} but decoder expects {}x{}",
                a_tilde.dim(),
                self.m,
                self.n()
            )));
        }
        let b = y.nrows();
        if b == 0 {
            return Err(CdecError::invalid("empty batch"));
        }
        if y.ncols() != self.m || x0.dim() != (b, self.n()) || eps.len() != b {
            return Err(CdecError::invalid(format!(
                "batch shapes disagree: y {:?}, x0 {:?}, eps {}",
                y.dim(),
                x0.dim(),
                eps.len()
            )));
        }
        if eps.iter().any(|e| e.is_nan() || *e < 0.0) {
            return Err(CdecError::invalid("eps entries must be nonnegative"));
        }
        Ok(b)
    }

    fn run_batch(
        &self,
        a_tilde: ArrayView2<f64>,
        y: ArrayView2<f64>,
        x0: ArrayView2<f64>,
        eps: ArrayView1<f64>,
        want_tape: bool,
    ) -> Result<(Array2<f64>, Option<StageTape>)> {
        let b = self.check_batch_inputs(a_tilde, y, x0, eps)?;
        let nn = self.rows();
        let m = self.m;
        let mut z1 = Array2::zeros((b, nn));
        let mut u1 = Array2::zeros((b, nn));
        let mut z2 = Array2::zeros((b, m));
        let mut u2 = Array2::zeros((b, m));
        let mut tape = want_tape.then(|| StageTape::with_capacity(self.l_layers));
        let mut x_out = Array2::zeros((b, self.n()));
        for k in 0..self.l_layers {
            let th = self.thetas[k];
            let v1 = (1.0 - th) * &u1 + th * &z1;
            let v2 = (1.0 - th) * &u2 + th * &z2;
            let x = &x0 + &((v1.dot(&self.w) - v2.dot(&a_tilde)) / self.mu);
            let a1 = &z1 - &(x.dot(&self.w.t()) * (self.t1 / th));
            let z1n = a1.mapv(|v| truncate_scalar(v, 1.0));
            let resid = &y - &x.dot(&a_tilde.t());
            let rho2 = self.t2 / th;
            let a2 = &z2 - &(resid * rho2);
            let mut z2n = Array2::zeros((b, m));
            for (i, row) in a2.rows().into_iter().enumerate() {
                let shrunk = block_shrink(row, rho2 * eps[i])?;
                z2n.row_mut(i).assign(&shrunk);
            }
            for (name, arr) in [("x", &x), ("z1", &z1n), ("z2", &z2n)] {
                if arr.iter().any(|t| !t.is_finite()) {
                    return Err(CdecError::Diverged {
                        iter: k,
                        context: format!("non-finite entries in {name} at layer {k}"),
                    });
                }
            }
            let u1n = (1.0 - th) * &u1 + th * &z1n;
            let u2n = (1.0 - th) * &u2 + th * &z2n;
            x_out = if let Some(t) = tape.as_mut() {
                t.z1.push(z1);
                t.u1.push(u1);
                t.z2.push(z2);
                t.u2.push(u2);
                t.x.push(x.clone());
                t.a1.push(a1);
                t.a2.push(a2);
                x
            } else {
                x
            };
            z1 = z1n;
            u1 = u1n;
            z2 = z2n;
            u2 = u2n;
        }
        Ok((x_out, tape))
    }

    /// Forward pass over a batch, recording the tape for a later backward.
    pub fn forward_batch(
        &self,
        a_tilde: ArrayView2<f64>,
        y: ArrayView2<f64>,
        x0: ArrayView2<f64>,
        eps: ArrayView1<f64>,
    ) -> Result<(Array2<f64>, StageTape)> {
        let (x, tape) = self.run_batch(a_tilde, y, x0, eps, true)?;
        Ok((x, tape.expect("tape requested")))
    }

    /// Forward pass without the tape (inference and landscape scans).
    pub fn infer_batch(
        &self,
        a_tilde: ArrayView2<f64>,
        y: ArrayView2<f64>,
        x0: ArrayView2<f64>,
        eps: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.run_batch(a_tilde, y, x0, eps, false)?.0)
    }

    /// Single-sample forward.
    pub fn forward(
        &self,
        a_tilde: ArrayView2<f64>,
        y: ArrayView1<f64>,
        x0: ArrayView1<f64>,
        eps: f64,
    ) -> Result<(Array1<f64>, StageTape)> {
        let yb = y.insert_axis(Axis(0));
        let xb = x0.insert_axis(Axis(0));
        let eb = Array1::from_elem(1, eps);
        let (x, tape) = self.forward_batch(a_tilde, yb, xb, eb.view())?;
        Ok((x.row(0).to_owned(), tape))
    }

    fn check_tape(&self, tape: &StageTape, b: usize) -> Result<()> {
        if tape.len() != self.l_layers {
            return Err(CdecError::invalid(format!(
                "tape has {} layers but decoder has {}",
                tape.len(),
                self.l_layers
            )));
        }
        let nn = self.rows();
        for k in 0..self.l_layers {
            let ok = tape.z1[k].dim() == (b, nn)
                && tape.u1[k].dim() == (b, nn)
                && tape.z2[k].dim() == (b, self.m)
                && tape.u2[k].dim() == (b, self.m)
                && tape.x[k].dim() == (b, self.n())
                && tape.a1[k].dim() == (b, nn)
                && tape.a2[k].dim() == (b, self.m);
            if !ok {
                return Err(CdecError::invalid(format!(
                    "tape layer {k} shapes do not match decoder and batch size {b}"
                )));
            }
        }
        Ok(())
    }

    /// Reverse pass over a batch. `upstream` holds d(loss)/d(x_hat) row per
    /// sample; returns the W gradient (accumulated across layers and samples)
    /// and the gradient with respect to the anchor x0 that the continuation
    /// chain consumes. Threshold kinks use the derivative-zero convention.
    pub fn backward_batch(
        &self,
        a_tilde: ArrayView2<f64>,
        eps: ArrayView1<f64>,
        tape: &StageTape,
        upstream: ArrayView2<f64>,
    ) -> Result<(GradW, Array2<f64>)> {
        let b = upstream.nrows();
        if upstream.ncols() != self.n() || eps.len() != b {
            return Err(CdecError::invalid(format!(
                "upstream is {:?}, eps has {}; decoder expects n = {} and matching batch",
                upstream.dim(),
                eps.len(),
                self.n()
            )));
        }
        if a_tilde.dim() != (self.m, self.n()) {
            return Err(CdecError::invalid(format!(
                "sensing matrix is {:?} but decoder expects {}x{}",
                a_tilde.dim(),
                self.m,
                self.n()
            )));
        }
        self.check_tape(tape, b)?;
        let nn = self.rows();
        let m = self.m;
        let mut zb1 = Array2::zeros((b, nn));
        let mut ub1 = Array2::zeros((b, nn));
        let mut zb2 = Array2::zeros((b, m));
        let mut ub2 = Array2::zeros((b, m));
        let mut grad_w: GradW = Array2::zeros(self.w.dim());
        let mut x0_bar = Array2::zeros((b, self.n()));
        for k in (0..self.l_layers).rev() {
            let th = self.thetas[k];
            let rho1 = self.t1 / th;
            let rho2 = self.t2 / th;
            // adjoints of the thresholded outputs: each feeds the next
            // layer's z directly and its own u-average with weight theta
            let z1p_bar = &zb1 + &(th * &ub1);
            let z2p_bar = &zb2 + &(th * &ub2);
            let a1 = &tape.a1[k];
            let mut abar1 = z1p_bar;
            ndarray::Zip::from(&mut abar1).and(a1).for_each(|g, &a| {
                if a.abs() >= 1.0 {
                    *g = 0.0;
                }
            });
            let a2 = &tape.a2[k];
            let mut abar2 = Array2::zeros((b, m));
            for i in 0..b {
                let ar = a2.row(i);
                let gr = z2p_bar.row(i);
                let c = rho2 * eps[i];
                let mut out = abar2.row_mut(i);
                if c == 0.0 {
                    out.assign(&gr);
                    continue;
                }
                let r = ar.dot(&ar).sqrt();
                if r > c {
                    let s = 1.0 - c / r;
                    let inner = ar.dot(&gr);
                    let coef = c / (r * r * r);
                    for j in 0..m {
                        out[j] = s * gr[j] + coef * inner * ar[j];
                    }
                }
                // r <= c: the shrink output is identically zero there
            }
            let mut x_bar = abar2.dot(&a_tilde) * rho2 - abar1.dot(&self.w) * rho1;
            if k == self.l_layers - 1 {
                x_bar += &upstream;
            }
            let v1 = (1.0 - th) * &tape.u1[k] + th * &tape.z1[k];
            grad_w += &(v1.t().dot(&x_bar) / self.mu);
            grad_w -= &(abar1.t().dot(&tape.x[k]) * rho1);
            x0_bar += &x_bar;
            let v1_bar = x_bar.dot(&self.w.t()) / self.mu;
            let v2_bar = x_bar.dot(&a_tilde.t()) * (-1.0 / self.mu);
            ub1 = (1.0 - th) * &(&ub1 + &v1_bar);
            zb1 = &abar1 + &(th * &v1_bar);
            ub2 = (1.0 - th) * &(&ub2 + &v2_bar);
            zb2 = &abar2 + &(th * &v2_bar);
        }
        if grad_w.iter().any(|v| !v.is_finite()) {
            return Err(CdecError::Diverged {
                iter: 0,
                context: "non-finite W gradient".into(),
            });
        }
        Ok((grad_w, x0_bar))
    }

    /// Single-sample reverse pass returning only the W gradient.
    pub fn backward(
        &self,
        a_tilde: ArrayView2<f64>,
        eps: f64,
        tape: &StageTape,
        upstream: ArrayView1<f64>,
    ) -> Result<GradW> {
        let ub = upstream.insert_axis(Axis(0));
        let eb = Array1::from_elem(1, eps);
        Ok(self.backward_batch(a_tilde, eb.view(), tape, ub)?.0)
    }
}

/// Smallest distance from any pre-threshold argument in the tape to its
/// threshold: min over layers of min(| |a1| - 1 |) and | ||a2|| - c |.
/// Finite-difference gradient checks require this to be well above the
/// probe step, otherwise the probe crosses a kink.
pub fn kink_distance(decoder: &UnrolledDecoder, tape: &StageTape, eps: ArrayView1<f64>) -> f64 {
    let mut d = f64::INFINITY;
    for k in 0..tape.len() {
        let rho2 = decoder.t2() / decoder.thetas()[k];
        for v in tape.a1[k].iter() {
            d = d.min((v.abs() - 1.0).abs());
        }
        for (i, row) in tape.a2[k].rows().into_iter().enumerate() {
            let r = row.dot(&row).sqrt();
            d = d.min((r - rho2 * eps[i]).abs());
        }
    }
    d
}
