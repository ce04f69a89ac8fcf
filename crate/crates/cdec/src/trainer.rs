//! Minibatch Adam training of the unrolled decoder, early stopping on the
//! gap between validation and training loss, and grid-of-experiments runs
//! averaged over seeds.

use crate::continuation::{continued_loss, continued_loss_and_grad};
use crate::error::{CdecError, Result};
use crate::ops::LossKind;
use crate::parallel::ExecMode;
use crate::seed::rng_for;
use crate::sensing::Dataset;
use crate::unfolded::{GradW, UnrolledDecoder};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Moment accumulators for Adam, shaped like the parameter matrix.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(dim: (usize, usize)) -> Self {
        AdamState {
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update in place. A zero gradient on a fresh
/// state leaves the parameters untouched exactly.
pub fn adam_step(w: &mut Array2<f64>, grad: &GradW, state: &mut AdamState, lr: f64) -> Result<()> {
    if w.dim() != grad.dim() || w.dim() != state.m.dim() {
        return Err(CdecError::invalid(
            "parameter, gradient, and moment shapes must agree",
        ));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(CdecError::invalid("learning rate must be positive"));
    }
    state.step += 1;
    let t = state.step as i32;
    state.m.zip_mut_with(grad, |m, &g| {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    });
    state.v.zip_mut_with(grad, |v, &g| {
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    });
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    ndarray::Zip::from(w.view_mut())
        .and(&state.m)
        .and(&state.v)
        .for_each(|w, &m, &v| {
            *w -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPSILON);
        });
    if w.iter().any(|v| !v.is_finite()) {
        return Err(CdecError::Diverged {
            iter: state.step as usize,
            context: "parameters became non-finite after an optimizer step".into(),
        });
    }
    Ok(())
}

/// Training hyperparameters. `seeds` drives `run_matrix`; a single `train`
/// call takes its seed explicitly. `early_stop_patience = 0` disables the
/// patience rule and the run goes to `max_epochs`.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub loss: LossKind,
    pub j_steps: usize,
    pub l_layers: usize,
    pub seeds: Vec<u64>,
    pub exec: ExecMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CdecError::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CdecError::invalid("learning rate must be positive"));
        }
        if self.j_steps == 0 {
            return Err(CdecError::invalid("continuation needs at least one step"));
        }
        if self.l_layers == 0 {
            return Err(CdecError::invalid("decoder needs at least one layer"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 1e-3,
            max_epochs: 100,
            early_stop_patience: 10,
            loss: LossKind::LogCosh,
            j_steps: 1,
            l_layers: 5,
            seeds: vec![0],
            exec: ExecMode::default(),
        }
    }
}

/// One epoch of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    /// Stopping signal: |val_loss - train_loss| for this epoch.
    pub ege: f64,
}

/// Final losses of a (possibly trained) decoder plus the per-epoch history
/// of the run that produced it. `ege = |test_loss - train_loss|`.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub train_loss: f64,
    pub test_loss: f64,
    pub ege: f64,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Measurement operator plus the train/test splits that share it.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub a_tilde: Array2<f64>,
    pub train: Dataset,
    pub test: Dataset,
}

impl TrainData {
    pub fn check_decoder(&self, decoder: &UnrolledDecoder) -> Result<()> {
        if self.a_tilde.dim() != (decoder.m(), decoder.n()) {
            return Err(CdecError::invalid(
                "measurement operator does not match decoder dimensions",
            ));
        }
        if self.train.n() != decoder.n() || self.test.n() != decoder.n() {
            return Err(CdecError::invalid("dataset width does not match decoder"));
        }
        Ok(())
    }
}

fn gather(ds: &Dataset, idx: &[usize]) -> (Array2<f64>, Array2<f64>, Array1<f64>, Array2<f64>) {
    (
        ds.y.select(Axis(0), idx),
        ds.x0.select(Axis(0), idx),
        ds.eps.select(Axis(0), idx),
        ds.x.select(Axis(0), idx),
    )
}

fn split_loss(
    decoder: &UnrolledDecoder,
    a_tilde: &Array2<f64>,
    ds: &Dataset,
    loss: LossKind,
    j_steps: usize,
    mode: ExecMode,
) -> Result<f64> {
    continued_loss(
        decoder,
        a_tilde.view(),
        ds.y.view(),
        ds.x0.view(),
        ds.eps.view(),
        ds.x.view(),
        loss,
        j_steps,
        mode,
    )
}

fn epoch_context(err: CdecError, epoch: usize) -> CdecError {
    match err {
        CdecError::Diverged { context, .. } => CdecError::Diverged {
            iter: epoch,
            context: format!("training epoch {epoch}: {context}"),
        },
        other => other,
    }
}

/// Loss of a decoder on both splits with no parameter update.
pub fn evaluate(
    data: &TrainData,
    decoder: &UnrolledDecoder,
    loss: LossKind,
    j_steps: usize,
    mode: ExecMode,
) -> Result<Metrics> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(CdecError::invalid("evaluation needs non-empty splits"));
    }
    data.check_decoder(decoder)?;
    let train_loss = split_loss(decoder, &data.a_tilde, &data.train, loss, j_steps, mode)?;
    let test_loss = split_loss(decoder, &data.a_tilde, &data.test, loss, j_steps, mode)?;
    Ok(Metrics {
        train_loss,
        test_loss,
        ege: (test_loss - train_loss).abs(),
        best_epoch: None,
        history: Vec::new(),
    })
}

/// Minibatch Adam over the analysis operator. The last tenth of the train
/// split is held out as validation; each epoch records the running train
/// loss, the validation loss, the test loss, and the stopping signal
/// |val - train|. The returned decoder carries the snapshot with the best
/// stopping signal, and the final metrics re-evaluate that snapshot on the
/// full train and test splits.
pub fn train(
    data: &TrainData,
    decoder: UnrolledDecoder,
    config: &TrainConfig,
    seed: u64,
) -> Result<(UnrolledDecoder, Metrics)> {
    config.validate()?;
    data.check_decoder(&decoder)?;
    if data.train.len() < 2 {
        return Err(CdecError::invalid(
            "training needs at least two samples to carve a validation split",
        ));
    }
    if data.test.is_empty() {
        return Err(CdecError::invalid("training needs a non-empty test split"));
    }
    let mut dec = decoder;
    let total = data.train.len();
    let val_len = (total / 10).max(1);
    let core_len = total - val_len;
    let core = data.train.slice(0..core_len, "train-core");
    let val = data.train.slice(core_len..total, "val");

    let mut adam = AdamState::new(dec.w().dim());
    let mut rng = rng_for(seed, "train/shuffle");
    let mut order: Vec<usize> = (0..core_len).collect();
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut best_w = dec.w().clone();
    let mut best_ege = f64::INFINITY;
    let mut best_epoch = None;
    let mut since_improved = 0usize;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (yb, x0b, epsb, xb) = gather(&core, chunk);
            let (batch_loss, grad) = continued_loss_and_grad(
                &dec,
                data.a_tilde.view(),
                yb.view(),
                x0b.view(),
                epsb.view(),
                xb.view(),
                config.loss,
                config.j_steps,
                config.exec,
            )
            .map_err(|e| epoch_context(e, epoch))?;
            if !batch_loss.is_finite() {
                return Err(CdecError::Diverged {
                    iter: epoch,
                    context: format!("training epoch {epoch}: minibatch loss is not finite"),
                });
            }
            let mut w = dec.w().clone();
            adam_step(&mut w, &grad, &mut adam, config.learning_rate)
                .map_err(|e| epoch_context(e, epoch))?;
            dec.set_w(w)?;
            loss_sum += batch_loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_loss = split_loss(
            &dec,
            &data.a_tilde,
            &val,
            config.loss,
            config.j_steps,
            config.exec,
        )
        .map_err(|e| epoch_context(e, epoch))?;
        let test_loss = split_loss(
            &dec,
            &data.a_tilde,
            &data.test,
            config.loss,
            config.j_steps,
            config.exec,
        )
        .map_err(|e| epoch_context(e, epoch))?;
        let ege = (val_loss - train_loss).abs();
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            test_loss,
            ege,
        });
        if ege < best_ege {
            best_ege = ege;
            best_w = dec.w().clone();
            best_epoch = Some(epoch);
            since_improved = 0;
        } else {
            since_improved += 1;
            if config.early_stop_patience > 0 && since_improved >= config.early_stop_patience {
                break;
            }
        }
    }

    dec.set_w(best_w)?;
    let mut metrics = evaluate(data, &dec, config.loss, config.j_steps, config.exec)?;
    metrics.best_epoch = best_epoch;
    metrics.history = history;
    Ok((dec, metrics))
}

/// One cell of an experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub l_layers: usize,
    pub j_steps: usize,
    /// Rows of the analysis operator.
    pub rows: usize,
    pub loss: LossKind,
}

impl CellSpec {
    pub fn label(&self) -> String {
        format!(
            "L={} J={} N={} loss={}",
            self.l_layers, self.j_steps, self.rows, self.loss
        )
    }
}

/// Per-seed results of one cell plus any recorded failures.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub spec: CellSpec,
    pub per_seed: Vec<(u64, Metrics)>,
    pub failures: Vec<(u64, String)>,
}

impl CellOutcome {
    fn mean_of(&self, f: impl Fn(&Metrics) -> f64) -> Option<f64> {
        if self.per_seed.is_empty() {
            return None;
        }
        let sum: f64 = self.per_seed.iter().map(|(_, m)| f(m)).sum();
        Some(sum / self.per_seed.len() as f64)
    }

    pub fn mean_train_loss(&self) -> Option<f64> {
        self.mean_of(|m| m.train_loss)
    }

    pub fn mean_test_loss(&self) -> Option<f64> {
        self.mean_of(|m| m.test_loss)
    }

    pub fn mean_ege(&self) -> Option<f64> {
        self.mean_of(|m| m.ege)
    }
}

/// Runs every (cell, seed) pair, training on data built by the provider.
/// A failing pair is recorded in its cell and the sweep continues.
pub fn run_matrix<F>(
    cells: &[CellSpec],
    base: &TrainConfig,
    mut provider: F,
) -> Result<Vec<CellOutcome>>
where
    F: FnMut(&CellSpec, u64) -> Result<(UnrolledDecoder, TrainData)>,
{
    if cells.is_empty() || base.seeds.is_empty() {
        return Err(CdecError::invalid("experiment grid must be non-empty"));
    }
    let mut outcomes = Vec::with_capacity(cells.len());
    for spec in cells {
        let mut config = base.clone();
        config.loss = spec.loss;
        config.j_steps = spec.j_steps;
        config.l_layers = spec.l_layers;
        let mut per_seed = Vec::new();
        let mut failures = Vec::new();
        for &seed in &base.seeds {
            let run = provider(spec, seed).and_then(|(decoder, data)| {
                if decoder.rows() != spec.rows || decoder.l_layers() != spec.l_layers {
                    return Err(CdecError::invalid("provider decoder does not match cell"));
                }
                train(&data, decoder, &config, seed).map(|(_, m)| m)
            });
            match run {
                Ok(metrics) => per_seed.push((seed, metrics)),
                Err(e) => failures.push((seed, e.to_string())),
            }
        }
        outcomes.push(CellOutcome {
            spec: spec.clone(),
            per_seed,
            failures,
        });
    }
    Ok(outcomes)
}
