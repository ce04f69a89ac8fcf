//! Warm-start outer loop: run the inner reconstruction J times, moving the
//! anchor x0 toward the latest reconstruction between runs,
//!
//!   x0^{j+1} = xhat^j + (j/(j+3)) (xhat^{j+1} - xhat^j),   xhat^0 := x0^0.
//!
//! The j=0 weight is zero, so the second run repeats the first exactly; the
//! anchor first moves at j=1 and the first genuinely new reconstruction is
//! the third. This is a property of the pinned weight schedule, not a bug,
//! and the tests below assert it.
//!
//! Wraps either the iterative solver or the unfolded decoder; for the
//! decoder the whole chain is part of the training graph, so the reverse
//! pass here routes adjoints through every stage and anchor update.

use crate::error::{CdecError, Result};
use crate::ops::LossKind;
use crate::parallel::{map_chunks, ExecMode};
use crate::sensing::SensingProblem;
use crate::solver::{solve, SolverConfig};
use crate::unfolded::{GradW, StageTape, UnrolledDecoder};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

/// The anchor mixing weight j/(j+3): 0 at j=0, strictly increasing toward 1.
pub fn continuation_weight(j: usize) -> f64 {
    j as f64 / (j as f64 + 3.0)
}

/// Outer-loop setup around the iterative solver.
#[derive(Debug, Clone)]
pub struct ContinuationConfig {
    pub j_steps: usize,
    pub inner: SolverConfig,
}

impl ContinuationConfig {
    pub fn new(j_steps: usize, inner: SolverConfig) -> Result<Self> {
        if j_steps == 0 {
            return Err(CdecError::invalid("continuation needs at least one step"));
        }
        Ok(ContinuationConfig { j_steps, inner })
    }
}

fn stage_context(err: CdecError, step: usize) -> CdecError {
    match err {
        CdecError::Diverged { iter, context } => CdecError::Diverged {
            iter,
            context: format!("continuation step {step}: {context}"),
        },
        other => other,
    }
}

/// Warm-started solve: J inner solves, each from the updated anchor. Returns
/// the final reconstruction and all J intermediate ones.
pub fn continued_solve(
    problem: &SensingProblem,
    w: ArrayView2<f64>,
    config: &ContinuationConfig,
) -> Result<(Array1<f64>, Vec<Array1<f64>>)> {
    let mut steps = Vec::with_capacity(config.j_steps);
    let mut xhat_prev = problem.x0.clone();
    let mut stage_problem = problem.clone();
    for j in 0..config.j_steps {
        let (xnew, _) = solve(&stage_problem, w, &config.inner).map_err(|e| stage_context(e, j))?;
        let wgt = continuation_weight(j);
        stage_problem.x0 = &xhat_prev + &(wgt * &(&xnew - &xhat_prev));
        xhat_prev = xnew.clone();
        steps.push(xnew);
    }
    Ok((xhat_prev, steps))
}

/// Per-stage tapes plus the reconstruction/anchor chain of one forward pass.
#[derive(Debug, Clone)]
pub struct ContinuationTape {
    pub stages: Vec<StageTape>,
    /// xhat[0] is the initial anchor (the xhat^0 convention); xhat[s+1] is
    /// the output of stage s. Length J+1.
    pub xhat: Vec<Array2<f64>>,
    /// Anchor fed into stage s. Length J.
    pub anchors: Vec<Array2<f64>>,
}

fn continued_run_batch(
    decoder: &UnrolledDecoder,
    a_tilde: ArrayView2<f64>,
    y: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    eps: ArrayView1<f64>,
    j_steps: usize,
    want_tapes: bool,
) -> Result<(Array2<f64>, Option<ContinuationTape>)> {
    if j_steps == 0 {
        return Err(CdecError::invalid("continuation needs at least one step"));
    }
    let mut xhat = Vec::with_capacity(j_steps + 1);
    xhat.push(x0.to_owned());
    let mut anchors = Vec::with_capacity(j_steps);
    let mut stages = Vec::with_capacity(j_steps);
    let mut anchor = x0.to_owned();
    for j in 0..j_steps {
        let xnew = if want_tapes {
            let (xnew, tape) = decoder
                .forward_batch(a_tilde, y, anchor.view(), eps)
                .map_err(|e| stage_context(e, j))?;
            stages.push(tape);
            anchors.push(anchor);
            xnew
        } else {
            decoder
                .infer_batch(a_tilde, y, anchor.view(), eps)
                .map_err(|e| stage_context(e, j))?
        };
        let wgt = continuation_weight(j);
        let prev = &xhat[j];
        anchor = prev + &(wgt * &(&xnew - prev));
        xhat.push(xnew);
    }
    let out = xhat.last().expect("at least one stage ran").clone();
    let tape = want_tapes.then(|| ContinuationTape {
        stages,
        xhat,
        anchors,
    });
    Ok((out, tape))
}

/// Forward through J stages recording everything the reverse pass needs.
pub fn continued_forward_batch(
    decoder: &UnrolledDecoder,
    a_tilde: ArrayView2<f64>,
    y: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    eps: ArrayView1<f64>,
    j_steps: usize,
) -> Result<(Array2<f64>, ContinuationTape)> {
    let (x, tape) = continued_run_batch(decoder, a_tilde, y, x0, eps, j_steps, true)?;
    Ok((x, tape.expect("tapes requested")))
}

/// Forward through J stages without tapes (inference path).
pub fn continued_infer_batch(
    decoder: &UnrolledDecoder,
    a_tilde: ArrayView2<f64>,
    y: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    eps: ArrayView1<f64>,
    j_steps: usize,
) -> Result<Array2<f64>> {
    Ok(continued_run_batch(decoder, a_tilde, y, x0, eps, j_steps, false)?.0)
}

/// Single-sample continued reconstruction.
pub fn continued_decode(
    decoder: &UnrolledDecoder,
    a_tilde: ArrayView2<f64>,
    y: ArrayView1<f64>,
    x0: ArrayView1<f64>,
    eps: f64,
    j_steps: usize,
) -> Result<Array1<f64>> {
    let yb = y.insert_axis(Axis(0));
    let xb = x0.insert_axis(Axis(0));
    let eb = Array1::from_elem(1, eps);
    let out = continued_infer_batch(decoder, a_tilde, yb, xb, eb.view(), j_steps)?;
    Ok(out.row(0).to_owned())
}

/// Reverse pass through the whole continuation chain. Returns the W gradient
/// and the gradient with respect to the initial anchor x0^0 (which enters
/// both as stage 0's anchor and as the xhat^0 convention value).
pub fn continued_backward_batch(
    decoder: &UnrolledDecoder,
    a_tilde: ArrayView2<f64>,
    eps: ArrayView1<f64>,
    tape: &ContinuationTape,
    upstream: ArrayView2<f64>,
) -> Result<(GradW, Array2<f64>)> {
    let j_steps = tape.stages.len();
    if j_steps == 0 || tape.xhat.len() != j_steps + 1 || tape.anchors.len() != j_steps {
        return Err(CdecError::invalid(
            "continuation tape is inconsistent with its stage count",
        ));
    }
    let b = upstream.nrows();
    let n = decoder.n();
    if upstream.dim() != (b, n) || b == 0 {
        return Err(CdecError::invalid("upstream shape does not match decoder"));
    }
    let mut grad_w: GradW = Array2::zeros(decoder.w().dim());
    let mut xhat_bar: Vec<Array2<f64>> = (0..=j_steps).map(|_| Array2::zeros((b, n))).collect();
    xhat_bar[j_steps] = upstream.to_owned();
    let mut x0_first_bar = Array2::zeros((b, n));
    for s in (0..j_steps).rev() {
        let (gw, anchor_bar) = decoder
            .backward_batch(a_tilde, eps, &tape.stages[s], xhat_bar[s + 1].view())
            .map_err(|e| stage_context(e, s))?;
        grad_w += &gw;
        if s >= 1 {
            let wgt = continuation_weight(s - 1);
            let scaled_prev = (1.0 - wgt) * &anchor_bar;
            let scaled_cur = wgt * &anchor_bar;
            xhat_bar[s - 1] += &scaled_prev;
            xhat_bar[s] += &scaled_cur;
        } else {
            x0_first_bar += &anchor_bar;
        }
    }
    x0_first_bar += &xhat_bar[0];
    Ok((grad_w, x0_first_bar))
}

fn slice_rows<'a>(m: ArrayView2<'a, f64>, r: &std::ops::Range<usize>) -> ArrayView2<'a, f64> {
    m.slice_move(s![r.clone(), ..])
}

/// Mean loss of the continued decoder over a split, computed in fixed-size
/// row chunks whose partial sums reduce in index order, so sequential and
/// parallel execution agree bitwise.
#[allow(clippy::too_many_arguments)]
pub fn continued_loss(
    decoder: &UnrolledDecoder,
    a_tilde: ArrayView2<f64>,
    y: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    eps: ArrayView1<f64>,
    targets: ArrayView2<f64>,
    loss: LossKind,
    j_steps: usize,
    mode: ExecMode,
) -> Result<f64> {
    let b = y.nrows();
    if b == 0 {
        return Err(CdecError::invalid("loss over an empty batch is undefined"));
    }
    if targets.nrows() != b {
        return Err(CdecError::invalid("target batch does not match inputs"));
    }
    let partials = map_chunks(b, mode, |r| -> Result<f64> {
        let pred = continued_infer_batch(
            decoder,
            a_tilde,
            slice_rows(y, &r),
            slice_rows(x0, &r),
            eps.slice(s![r.clone()]),
            j_steps,
        )?;
        loss.eval_sum(pred.view(), slice_rows(targets, &r))
    });
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    Ok(total / b as f64)
}

/// Predictions of the continued decoder over a split, chunked as above.
pub fn continued_predict(
    decoder: &UnrolledDecoder,
    a_tilde: ArrayView2<f64>,
    y: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    eps: ArrayView1<f64>,
    j_steps: usize,
    mode: ExecMode,
) -> Result<Array2<f64>> {
    let b = y.nrows();
    let chunks = map_chunks(b, mode, |r| -> Result<Array2<f64>> {
        continued_infer_batch(
            decoder,
            a_tilde,
            slice_rows(y, &r),
            slice_rows(x0, &r),
            eps.slice(s![r.clone()]),
            j_steps,
        )
    });
    let mut out = Array2::zeros((b, decoder.n()));
    let mut row = 0;
    for c in chunks {
        let c = c?;
        out.slice_mut(s![row..row + c.nrows(), ..]).assign(&c);
        row += c.nrows();
    }
    Ok(out)
}

/// Mean loss and its W gradient over one minibatch, chunked with ordered
/// reduction. The per-sample upstream uses the full batch size as the
/// denominator so chunking does not change the objective.
#[allow(clippy::too_many_arguments)]
pub fn continued_loss_and_grad(
    decoder: &UnrolledDecoder,
    a_tilde: ArrayView2<f64>,
    y: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    eps: ArrayView1<f64>,
    targets: ArrayView2<f64>,
    loss: LossKind,
    j_steps: usize,
    mode: ExecMode,
) -> Result<(f64, GradW)> {
    let b = y.nrows();
    if b == 0 {
        return Err(CdecError::invalid("loss over an empty batch is undefined"));
    }
    if targets.nrows() != b {
        return Err(CdecError::invalid("target batch does not match inputs"));
    }
    let partials = map_chunks(b, mode, |r| -> Result<(f64, GradW)> {
        let tgt = slice_rows(targets, &r);
        let eps_c = eps.slice(s![r.clone()]);
        let (pred, tape) = continued_forward_batch(
            decoder,
            a_tilde,
            slice_rows(y, &r),
            slice_rows(x0, &r),
            eps_c,
            j_steps,
        )?;
        let lsum = loss.eval_sum(pred.view(), tgt)?;
        let upstream = loss.grad_scaled(pred.view(), tgt, b as f64)?;
        let (gw, _) = continued_backward_batch(decoder, a_tilde, eps_c, &tape, upstream.view())?;
        Ok((lsum, gw))
    });
    let mut total = 0.0;
    let mut grad: GradW = Array2::zeros(decoder.w().dim());
    for p in partials {
        let (lsum, gw) = p?;
        total += lsum;
        grad += &gw;
    }
    Ok((total / b as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::{
        gaussian_measurement_matrix, init_analysis_operator, synthetic_sparse_dataset, Dataset,
        SensingProblem,
    };

    #[test]
    fn weight_values_match_closed_form() {
        assert_eq!(continuation_weight(0), 0.0);
        assert_eq!(continuation_weight(1), 0.25);
        assert_eq!(continuation_weight(3), 0.5);
    }

    #[test]
    fn weight_sequence_increases_within_unit_interval() {
        let mut prev = -1.0;
        for j in 0..1000 {
            let w = continuation_weight(j);
            assert!((0.0..1.0).contains(&w));
            assert!(w > prev);
            prev = w;
        }
        assert!(continuation_weight(10_000) > 0.999);
    }

    fn solver_fixture() -> (SensingProblem, ndarray::Array2<f64>) {
        let a = gaussian_measurement_matrix(8, 16, 71, "a").unwrap();
        let ds = synthetic_sparse_dataset(16, 2, 1, a.view(), 0.0, 72, "t").unwrap();
        let problem = SensingProblem {
            a_tilde: a,
            y: ds.y.row(0).to_owned(),
            eps: 0.0,
            x0: ds.x0.row(0).to_owned(),
            mu: 0.5,
        };
        let w = Array2::eye(16);
        (problem, w)
    }

    #[test]
    fn single_step_equals_plain_solve_bitwise() {
        let (p, w) = solver_fixture();
        let inner = SolverConfig::for_problem(&p, w.view(), 40, 0.0).unwrap();
        let (plain, _) = solve(&p, w.view(), &inner).unwrap();
        let cfg = ContinuationConfig::new(1, inner).unwrap();
        let (cont, steps) = continued_solve(&p, w.view(), &cfg).unwrap();
        assert_eq!(cont, plain);
        assert_eq!(steps.len(), 1);
    }

    #[test]
    fn per_step_outputs_have_length_j() {
        let (p, w) = solver_fixture();
        let inner = SolverConfig::for_problem(&p, w.view(), 10, 0.0).unwrap();
        let cfg = ContinuationConfig::new(4, inner).unwrap();
        let (_, steps) = continued_solve(&p, w.view(), &cfg).unwrap();
        assert_eq!(steps.len(), 4);
        // the zero-weight first update repeats the first solve exactly
        assert_eq!(steps[0], steps[1]);
    }

    fn decoder_fixture(l: usize) -> (UnrolledDecoder, Array2<f64>, Dataset) {
        let a = gaussian_measurement_matrix(4, 12, 73, "a").unwrap();
        let w = init_analysis_operator(18, 12, 74, "w").unwrap();
        let dec = UnrolledDecoder::new(l, w, a.view(), 1.0).unwrap();
        let ds = synthetic_sparse_dataset(12, 3, 6, a.view(), 1e-3, 75, "t").unwrap();
        (dec, a, ds)
    }

    #[test]
    fn j1_continued_decoder_is_bitwise_plain_forward() {
        let (dec, a, ds) = decoder_fixture(4);
        let plain = dec
            .infer_batch(a.view(), ds.y.view(), ds.x0.view(), ds.eps.view())
            .unwrap();
        let cont =
            continued_infer_batch(&dec, a.view(), ds.y.view(), ds.x0.view(), ds.eps.view(), 1)
                .unwrap();
        assert_eq!(cont, plain);
    }

    #[test]
    fn zero_first_weight_makes_j2_collapse_onto_j1() {
        let (dec, a, ds) = decoder_fixture(4);
        let j1 = continued_infer_batch(&dec, a.view(), ds.y.view(), ds.x0.view(), ds.eps.view(), 1)
            .unwrap();
        let j2 = continued_infer_batch(&dec, a.view(), ds.y.view(), ds.x0.view(), ds.eps.view(), 2)
            .unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn third_step_moves_the_anchor() {
        let (dec, a, ds) = decoder_fixture(4);
        let j1 = continued_infer_batch(&dec, a.view(), ds.y.view(), ds.x0.view(), ds.eps.view(), 1)
            .unwrap();
        let j3 = continued_infer_batch(&dec, a.view(), ds.y.view(), ds.x0.view(), ds.eps.view(), 3)
            .unwrap();
        let diff = (&j1 - &j3).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff > 1e-12, "J=3 output did not move ({diff})");
    }

    #[test]
    fn output_dimension_is_stable_in_j() {
        let (dec, a, ds) = decoder_fixture(3);
        for j in [1, 2, 4, 8] {
            let out =
                continued_infer_batch(&dec, a.view(), ds.y.view(), ds.x0.view(), ds.eps.view(), j)
                    .unwrap();
            assert_eq!(out.dim(), (6, 12));
        }
    }

    #[test]
    fn forward_tape_chain_has_expected_lengths() {
        let (dec, a, ds) = decoder_fixture(3);
        let (_, tape) =
            continued_forward_batch(&dec, a.view(), ds.y.view(), ds.x0.view(), ds.eps.view(), 5)
                .unwrap();
        assert_eq!(tape.stages.len(), 5);
        assert_eq!(tape.xhat.len(), 6);
        assert_eq!(tape.anchors.len(), 5);
        assert_eq!(tape.xhat[0], ds.x0);
        assert_eq!(tape.anchors[0], ds.x0);
        assert_eq!(tape.anchors[1], ds.x0);
    }

    #[test]
    fn continued_gradient_matches_finite_differences() {
        let (dec, a, ds) = decoder_fixture(2);
        let j = 3;
        let (_, tape) =
            continued_forward_batch(&dec, a.view(), ds.y.view(), ds.x0.view(), ds.eps.view(), j)
                .unwrap();
        for st in &tape.stages {
            assert!(crate::unfolded::kink_distance(&dec, st, ds.eps.view()) > 1e-3);
        }
        let (loss0, gw) = continued_loss_and_grad(
            &dec,
            a.view(),
            ds.y.view(),
            ds.x0.view(),
            ds.eps.view(),
            ds.x.view(),
            LossKind::LogCosh,
            j,
            ExecMode::Sequential,
        )
        .unwrap();
        assert!(loss0.is_finite());
        let h = 1e-6;
        let gmax = gw.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let mut checked = 0;
        for (i, jj) in [(0, 0), (5, 3), (11, 7), (17, 11), (9, 2), (3, 9)] {
            let mut wp = dec.w().clone();
            wp[[i, jj]] += h;
            let lp = continued_loss(
                &dec.with_w(wp).unwrap(),
                a.view(),
                ds.y.view(),
                ds.x0.view(),
                ds.eps.view(),
                ds.x.view(),
                LossKind::LogCosh,
                j,
                ExecMode::Sequential,
            )
            .unwrap();
            let mut wm = dec.w().clone();
            wm[[i, jj]] -= h;
            let lm = continued_loss(
                &dec.with_w(wm).unwrap(),
                a.view(),
                ds.y.view(),
                ds.x0.view(),
                ds.eps.view(),
                ds.x.view(),
                LossKind::LogCosh,
                j,
                ExecMode::Sequential,
            )
            .unwrap();
            let fd = (lp - lm) / (2.0 * h);
            if fd.abs() < 1e-4 * gmax {
                continue;
            }
            let rel = (gw[[i, jj]] - fd).abs() / fd.abs();
            assert!(
                rel < 1e-5,
                "entry ({i},{jj}): analytic {} vs fd {fd}",
                gw[[i, jj]]
            );
            checked += 1;
        }
        assert!(checked >= 3, "too few informative entries ({checked})");
    }

    #[test]
    fn sequential_and_parallel_modes_agree_bitwise() {
        let a = gaussian_measurement_matrix(4, 12, 76, "a").unwrap();
        let w = init_analysis_operator(18, 12, 77, "w").unwrap();
        let dec = UnrolledDecoder::new(3, w, a.view(), 1.0).unwrap();
        let ds = synthetic_sparse_dataset(12, 3, 50, a.view(), 1e-3, 78, "t").unwrap();
        let run = |mode| {
            continued_loss_and_grad(
                &dec,
                a.view(),
                ds.y.view(),
                ds.x0.view(),
                ds.eps.view(),
                ds.x.view(),
                LossKind::LogCosh,
                3,
                mode,
            )
            .unwrap()
        };
        let (ls, gs) = run(ExecMode::Sequential);
        let (lp, gp) = run(ExecMode::Parallel);
        assert_eq!(ls.to_bits(), lp.to_bits());
        assert_eq!(gs, gp);
        let ps = continued_predict(
            &dec,
            a.view(),
            ds.y.view(),
            ds.x0.view(),
            ds.eps.view(),
            3,
            ExecMode::Sequential,
        )
        .unwrap();
        let pp = continued_predict(
            &dec,
            a.view(),
            ds.y.view(),
            ds.x0.view(),
            ds.eps.view(),
            3,
            ExecMode::Parallel,
        )
        .unwrap();
        assert_eq!(ps, pp);
    }

    #[test]
    fn stage_divergence_carries_the_step_index() {
        let (dec, a, mut ds) = decoder_fixture(3);
        ds.y[[0, 0]] = f64::NAN;
        let err =
            continued_infer_batch(&dec, a.view(), ds.y.view(), ds.x0.view(), ds.eps.view(), 2)
                .unwrap_err();
        match err {
            CdecError::Diverged { context, .. } => {
                assert!(
                    context.contains("continuation step 0"),
                    "context: {context}"
                );
            }
            other => panic!("expected divergence, got {other}"),
        }
    }
}
