//! Loss-landscape scans: perturb a learned analysis operator along two
//! random row-norm-matched directions, evaluate the loss on an
//! (alpha, beta) grid, and summarize smoothness as the mean absolute
//! discrete Laplacian of the log-losses.

use crate::continuation::continued_loss;
use crate::error::{CdecError, Result};
use crate::ops::LossKind;
use crate::parallel::{map_chunks, ExecMode};
use crate::seed::rng_for;
use crate::sensing::Dataset;
use crate::unfolded::UnrolledDecoder;
use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

/// Identifies what a grid was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeta {
    pub model_id: String,
    pub dataset_id: String,
    pub seed: u64,
    /// How the direction rows were normalized.
    pub normalization: String,
}

pub const ROW_NORM_TAG: &str = "row-norm-matched";

/// Losses over the perturbation grid. A cell is `None` where the evaluation
/// did not produce a finite loss.
#[derive(Debug, Clone)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub losses: Array2<Option<f64>>,
    pub meta: GridMeta,
}

impl LandscapeGrid {
    pub fn valid_count(&self) -> usize {
        self.losses.iter().filter(|v| v.is_some()).count()
    }

    pub fn missing_count(&self) -> usize {
        self.losses.len() - self.valid_count()
    }

    /// Value at (alpha, beta) = (0, 0).
    pub fn origin_value(&self) -> Option<f64> {
        let i = self.alphas.iter().position(|&a| a == 0.0)?;
        let j = self.betas.iter().position(|&b| b == 0.0)?;
        self.losses[[i, j]]
    }
}

fn fill_gaussian(dim: (usize, usize), rng: &mut impl rand::Rng) -> Array2<f64> {
    let data: Vec<f64> = (0..dim.0 * dim.1)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Array2::from_shape_vec(dim, data).expect("length matches shape")
}

fn match_row_norms(direction: &mut Array2<f64>, reference: ArrayView2<f64>) {
    for (mut drow, wrow) in direction.rows_mut().into_iter().zip(reference.rows()) {
        let target = wrow.dot(&wrow).sqrt();
        let current = drow.dot(&drow).sqrt();
        if target == 0.0 || current == 0.0 {
            drow.fill(0.0);
        } else {
            drow *= target / current;
        }
    }
}

/// Two independent Gaussian directions shaped like `w`, each row rescaled
/// to the Euclidean norm of the corresponding row of `w`. A zero row of `w`
/// yields a zero direction row.
pub fn random_directions(w: ArrayView2<f64>, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    if w.is_empty() {
        return Err(CdecError::invalid("directions need a non-empty matrix"));
    }
    let mut d1 = fill_gaussian(w.dim(), &mut rng_for(seed, "landscape/d1"));
    let mut d2 = fill_gaussian(w.dim(), &mut rng_for(seed, "landscape/d2"));
    match_row_norms(&mut d1, w);
    match_row_norms(&mut d2, w);
    Ok((d1, d2))
}

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(CdecError::invalid(format!("{name} axis must be non-empty")));
    }
    if axis.iter().any(|v| !v.is_finite()) {
        return Err(CdecError::invalid(format!("{name} axis must be finite")));
    }
    if axis.windows(2).any(|p| p[0] >= p[1]) {
        return Err(CdecError::invalid(format!(
            "{name} axis must be strictly increasing"
        )));
    }
    if !axis.contains(&0.0) {
        return Err(CdecError::invalid(format!("{name} axis must contain 0")));
    }
    Ok(())
}

/// Evaluates the split loss at W + alpha*D1 + beta*D2 over the whole grid.
/// The origin reuses W itself, so its cell equals the unperturbed loss
/// bit-exactly. A grid point whose perturbed weights or loss are non-finite
/// becomes a missing cell; the scan continues. The decoder is never
/// modified: every point evaluates a clone with frozen step sizes.
#[allow(clippy::too_many_arguments)]
pub fn scan(
    decoder: &UnrolledDecoder,
    a_tilde: ArrayView2<f64>,
    ds: &Dataset,
    d1: &Array2<f64>,
    d2: &Array2<f64>,
    alphas: &[f64],
    betas: &[f64],
    loss: LossKind,
    j_steps: usize,
    mode: ExecMode,
    meta: GridMeta,
) -> Result<LandscapeGrid> {
    check_axis("alpha", alphas)?;
    check_axis("beta", betas)?;
    let wdim = decoder.w().dim();
    if d1.dim() != wdim || d2.dim() != wdim {
        return Err(CdecError::invalid(
            "direction shapes must match the operator",
        ));
    }
    if ds.is_empty() {
        return Err(CdecError::invalid("landscape scan needs a non-empty split"));
    }
    if ds.n() != decoder.n() || a_tilde.dim() != (decoder.m(), decoder.n()) {
        return Err(CdecError::invalid(
            "dataset does not match decoder dimensions",
        ));
    }
    let na = alphas.len();
    let nb = betas.len();
    let eval_point = |idx: usize| -> Result<Option<f64>> {
        let (i, j) = (idx / nb, idx % nb);
        let (alpha, beta) = (alphas[i], betas[j]);
        let wp = if alpha == 0.0 && beta == 0.0 {
            decoder.w().clone()
        } else {
            decoder.w() + &(alpha * d1) + &(beta * d2)
        };
        if wp.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        let perturbed = decoder.with_w(wp)?;
        match continued_loss(
            &perturbed,
            a_tilde,
            ds.y.view(),
            ds.x0.view(),
            ds.eps.view(),
            ds.x.view(),
            loss,
            j_steps,
            ExecMode::Sequential,
        ) {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            Ok(_) => Ok(None),
            Err(CdecError::Diverged { .. }) => Ok(None),
            Err(other) => Err(other),
        }
    };
    let chunks = map_chunks(na * nb, mode, |r| -> Result<Vec<Option<f64>>> {
        r.map(eval_point).collect()
    });
    let mut losses = Array2::from_elem((na, nb), None);
    let mut idx = 0usize;
    for chunk in chunks {
        for v in chunk? {
            losses[[idx / nb, idx % nb]] = v;
            idx += 1;
        }
    }
    let grid = LandscapeGrid {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        losses,
        meta,
    };
    if grid.origin_value().is_none() {
        return Err(CdecError::Diverged {
            iter: 0,
            context: "unperturbed model does not produce a finite loss".into(),
        });
    }
    Ok(grid)
}

/// Smoothness summary: mean |discrete Laplacian| of log-losses over the
/// interior points whose full 5-point stencil is valid.
#[derive(Debug, Clone, PartialEq)]
pub struct Roughness {
    pub value: f64,
    /// Interior points that contributed to the mean.
    pub interior_valid: usize,
    /// All interior points of the grid.
    pub interior_total: usize,
}

fn uniform_spacing(name: &str, axis: &[f64]) -> Result<f64> {
    if axis.len() < 3 {
        return Err(CdecError::invalid(format!(
            "{name} axis needs at least 3 points for interior curvature"
        )));
    }
    let h = (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64;
    for p in axis.windows(2) {
        if ((p[1] - p[0]) - h).abs() > 1e-9 * h.abs().max(1.0) {
            return Err(CdecError::invalid(format!("{name} axis must be uniform")));
        }
    }
    Ok(h)
}

/// Log-loss curvature of a scanned grid. Missing cells remove the stencils
/// that touch them; the report carries how many interior points survived.
pub fn roughness(grid: &LandscapeGrid) -> Result<Roughness> {
    let hx = uniform_spacing("alpha", &grid.alphas)?;
    let hy = uniform_spacing("beta", &grid.betas)?;
    let (na, nb) = grid.losses.dim();
    let ln = |v: f64| v.max(f64::MIN_POSITIVE).ln();
    let mut sum = 0.0;
    let mut valid = 0usize;
    for i in 1..na - 1 {
        for j in 1..nb - 1 {
            let stencil = [
                grid.losses[[i, j]],
                grid.losses[[i - 1, j]],
                grid.losses[[i + 1, j]],
                grid.losses[[i, j - 1]],
                grid.losses[[i, j + 1]],
            ];
            let [c, xm, xp, ym, yp] = match stencil {
                [Some(c), Some(xm), Some(xp), Some(ym), Some(yp)] => [c, xm, xp, ym, yp],
                _ => continue,
            };
            let lap = (ln(xp) + ln(xm) - 2.0 * ln(c)) / (hx * hx)
                + (ln(yp) + ln(ym) - 2.0 * ln(c)) / (hy * hy);
            sum += lap.abs();
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(CdecError::invalid(
            "no interior point has a complete valid stencil",
        ));
    }
    Ok(Roughness {
        value: sum / valid as f64,
        interior_valid: valid,
        interior_total: (na - 2) * (nb - 2),
    })
}
