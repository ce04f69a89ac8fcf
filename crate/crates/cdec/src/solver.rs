//! First-order primal-dual solver for the smoothed analysis-sparsity
//! program
//!
//!   min ||Wx||_1 + (mu/2) ||x - x0||_2^2   s.t.  ||y - Ax||_2 <= eps
//!
//! in accelerated form. Dual variables z1 (one per analysis row) and z2 (one
//! per measurement) track the l-infinity ball and the norm constraint; each
//! iteration recovers x from the averaged duals, applies the two proximal
//! updates, averages, and advances the momentum parameter.

use crate::error::{CdecError, Result};
use crate::ops::{block_shrink, theta_next, truncate};
use crate::sensing::{spectral_norm_estimate, SensingProblem};
use ndarray::{Array1, ArrayView1, ArrayView2};

/// All per-iterate variables of the solver.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub x: Array1<f64>,
    pub z1: Array1<f64>,
    pub z2: Array1<f64>,
    pub u1: Array1<f64>,
    pub u2: Array1<f64>,
    pub theta: f64,
    pub k: usize,
}

/// Step sizes and stopping controls. `mu` is copied from the problem by
/// [`SolverConfig::for_problem`] and is the value the iteration actually
/// uses, so overriding it solves a re-weighted variant of the same instance.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub t1: f64,
    pub t2: f64,
    pub mu: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl SolverConfig {
    pub fn new(t1: f64, t2: f64, mu: f64, max_iters: usize, rel_tol: f64) -> Result<Self> {
        for (name, v) in [("t1", t1), ("t2", t2), ("mu", mu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CdecError::invalid(format!(
                    "{name} must be a positive finite scalar, got {v}"
                )));
            }
        }
        if max_iters == 0 {
            return Err(CdecError::invalid("max_iters must be at least 1"));
        }
        if rel_tol.is_nan() || rel_tol < 0.0 {
            return Err(CdecError::invalid(format!(
                "rel_tol must be nonnegative, got {rel_tol}"
            )));
        }
        Ok(SolverConfig {
            t1,
            t2,
            mu,
            max_iters,
            rel_tol,
        })
    }

    /// Default step sizes t1 = mu / sigma_max(W)^2, t2 = mu / sigma_max(A)^2.
    /// The mu factor keeps the effective preconditioned steps at the scale the
    /// proximal operators expect; without it the iteration overshoots for
    /// mu < 1. A zero operator has no curvature along its rows, any positive
    /// step works, so mu itself is used.
    pub fn for_problem(
        problem: &SensingProblem,
        w: ArrayView2<f64>,
        max_iters: usize,
        rel_tol: f64,
    ) -> Result<Self> {
        let sw = spectral_norm_estimate(w, 500, 1e-12);
        let sa = spectral_norm_estimate(problem.a_tilde.view(), 500, 1e-12);
        let mu = problem.mu;
        let t1 = if sw > 0.0 { mu / (sw * sw) } else { mu };
        let t2 = if sa > 0.0 { mu / (sa * sa) } else { mu };
        SolverConfig::new(t1, t2, mu, max_iters, rel_tol)
    }
}

fn check_dims(problem: &SensingProblem, w: ArrayView2<f64>) -> Result<(usize, usize, usize)> {
    let (m, n) = problem.dims();
    let (nn, wn) = w.dim();
    if n == 0 || m == 0 || nn == 0 {
        return Err(CdecError::invalid(
            "problem and analysis operator must have nonzero dimensions",
        ));
    }
    if wn != n {
        return Err(CdecError::invalid(format!(
            "analysis operator has {wn} columns but the problem dimension is {n}"
        )));
    }
    if problem.y.len() != m || problem.x0.len() != n {
        return Err(CdecError::invalid(
            "problem vectors do not match the sensing matrix shape",
        ));
    }
    Ok((n, nn, m))
}

/// Cold start: zero duals, u mirrors z, unit momentum, x at the anchor.
pub fn solver_init(problem: &SensingProblem, w: ArrayView2<f64>) -> Result<SolverState> {
    let (_, nn, m) = check_dims(problem, w)?;
    Ok(SolverState {
        x: problem.x0.clone(),
        z1: Array1::zeros(nn),
        z2: Array1::zeros(m),
        u1: Array1::zeros(nn),
        u2: Array1::zeros(m),
        theta: 1.0,
        k: 0,
    })
}

/// One full iteration. Consumes the state and returns its successor; errors
/// carry the iteration index at which a non-finite value first appeared.
pub fn solver_step(
    state: SolverState,
    problem: &SensingProblem,
    w: ArrayView2<f64>,
    config: &SolverConfig,
) -> Result<SolverState> {
    let SolverState {
        z1,
        z2,
        u1,
        u2,
        theta,
        k,
        ..
    } = state;
    let v1 = (1.0 - theta) * &u1 + theta * &z1;
    let v2 = (1.0 - theta) * &u2 + theta * &z2;
    let x = &problem.x0 + &((w.t().dot(&v1) - problem.a_tilde.t().dot(&v2)) / config.mu);
    let a1 = &z1 - &(w.dot(&x) * (config.t1 / theta));
    let z1n = truncate(a1.view(), 1.0)?;
    let resid = &problem.y - &problem.a_tilde.dot(&x);
    let a2 = &z2 - &(resid * (config.t2 / theta));
    let c = (config.t2 / theta) * problem.eps;
    let z2n = block_shrink(a2.view(), c)?;
    let u1n = (1.0 - theta) * &u1 + theta * &z1n;
    let u2n = (1.0 - theta) * &u2 + theta * &z2n;
    for (name, v) in [("x", &x), ("z1", &z1n), ("z2", &z2n)] {
        if v.iter().any(|t| !t.is_finite()) {
            return Err(CdecError::Diverged {
                iter: k,
                context: format!("non-finite entries in {name}"),
            });
        }
    }
    Ok(SolverState {
        x,
        z1: z1n,
        z2: z2n,
        u1: u1n,
        u2: u2n,
        theta: theta_next(theta)?,
        k: k + 1,
    })
}

/// One per-iteration record of solver progress.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub feasibility_gap: f64,
    pub rel_change: f64,
}

/// Run the iteration to `max_iters` or until the relative x change drops
/// below `rel_tol`. The very first iteration leaves x at the anchor (the
/// duals are still zero), so its structurally zero change is not allowed to
/// trigger the tolerance.
pub fn solve(
    problem: &SensingProblem,
    w: ArrayView2<f64>,
    config: &SolverConfig,
) -> Result<(Array1<f64>, Vec<TraceRow>)> {
    let mut state = solver_init(problem, w)?;
    let mut trace = Vec::new();
    let mut x_prev = state.x.clone();
    for it in 0..config.max_iters {
        state = solver_step(state, problem, w, config)?;
        let diff = &state.x - &x_prev;
        let denom = x_prev.dot(&x_prev).sqrt().max(1.0);
        let rel_change = diff.dot(&diff).sqrt() / denom;
        trace.push(TraceRow {
            iter: it,
            objective: objective(state.x.view(), w, config.mu, problem.x0.view())?,
            feasibility_gap: feasibility_gap(
                state.x.view(),
                problem.a_tilde.view(),
                problem.y.view(),
                problem.eps,
            )?,
            rel_change,
        });
        if it > 0 && rel_change < config.rel_tol {
            break;
        }
        x_prev = state.x.clone();
    }
    Ok((state.x, trace))
}

/// ||Wx||_1 + (mu/2) ||x - x0||_2^2.
pub fn objective(
    x: ArrayView1<f64>,
    w: ArrayView2<f64>,
    mu: f64,
    x0: ArrayView1<f64>,
) -> Result<f64> {
    if w.ncols() != x.len() || x.len() != x0.len() {
        return Err(CdecError::invalid(format!(
            "objective dimensions disagree: W is {:?}, x has {}, x0 has {}",
            w.dim(),
            x.len(),
            x0.len()
        )));
    }
    let l1 = w.dot(&x).iter().map(|v| v.abs()).sum::<f64>();
    let d = &x - &x0;
    Ok(l1 + 0.5 * mu * d.dot(&d))
}

/// max(0, ||y - Ax||_2 - eps): zero on the feasible set.
pub fn feasibility_gap(
    x: ArrayView1<f64>,
    a_tilde: ArrayView2<f64>,
    y: ArrayView1<f64>,
    eps: f64,
) -> Result<f64> {
    if a_tilde.ncols() != x.len() || a_tilde.nrows() != y.len() {
        return Err(CdecError::invalid(format!(
            "feasibility dimensions disagree: A is {:?}, x has {}, y has {}",
            a_tilde.dim(),
            x.len(),
            y.len()
        )));
    }
    let r = &y - &a_tilde.dot(&x);
    Ok((r.dot(&r).sqrt() - eps).max(0.0))
}
