//! Dataset assembly from a resolved config.
//!
//! All randomness funnels through the root seed in [sensing]: the sensing
//! matrix, synthetic signals, and measurement noise each draw from their own
//! labeled stream. Two configs sharing a root seed therefore share data even
//! when their model sections differ, which is what paired comparisons need.

use crate::config::{DataSource, ExperimentConfig};
use cdec::sensing::cache::read_cache;
use cdec::sensing::idx::load_idx_signals;
use cdec::sensing::images::{blob_images, load_png_grayscale};
use cdec::sensing::{gaussian_measurement_matrix, sparse_signals, Dataset};
use cdec::trainer::TrainData;
use cdec::{CdecError, Result};
use ndarray::{s, Array2};

pub const CACHE_TRAIN: &str = "train.ds";
pub const CACHE_TEST: &str = "test.ds";

fn signals_for(cfg: &ExperimentConfig) -> Result<Array2<f64>> {
    let d = &cfg.dataset;
    let root = cfg.sensing.seed;
    let want = d.train + d.test;
    let signals = match d.source {
        DataSource::Blobs => blob_images(d.side, want, root, "cli/images")?,
        DataSource::Sparse => sparse_signals(d.n, d.sparsity, want, root, "cli/sparse")?,
        DataSource::Idx => load_idx_signals(d.path.as_ref().unwrap(), d.downsample)?,
        DataSource::Png => load_png_grayscale(d.path.as_ref().unwrap())?,
        DataSource::Cache => {
            return Err(CdecError::invalid(
                "cache datasets are loaded directly, not regenerated",
            ))
        }
    };
    if signals.nrows() < want {
        return Err(CdecError::invalid(format!(
            "dataset provides {} samples but the splits need {want}",
            signals.nrows()
        )));
    }
    Ok(signals.slice(s![..want, ..]).to_owned())
}

/// Build the measurement operator and both splits for this config.
pub fn build_train_data(cfg: &ExperimentConfig) -> Result<TrainData> {
    let root = cfg.sensing.seed;
    if cfg.dataset.source == DataSource::Cache {
        let dir = cfg.dataset.path.as_ref().unwrap();
        let n = cfg.dataset.n;
        let m = cfg.measurements(n);
        let a = gaussian_measurement_matrix(m, n, root, "cli/sensing")?;
        let train = read_cache(&dir.join(CACHE_TRAIN), a.view(), "train")?;
        let test = read_cache(&dir.join(CACHE_TEST), a.view(), "test")?;
        if train.len() < cfg.dataset.train || test.len() < cfg.dataset.test {
            return Err(CdecError::invalid(format!(
                "cached splits hold {}/{} samples but the config asks for {}/{}",
                train.len(),
                test.len(),
                cfg.dataset.train,
                cfg.dataset.test
            )));
        }
        return Ok(TrainData {
            a_tilde: a,
            train: train.slice(0..cfg.dataset.train, "train"),
            test: test.slice(0..cfg.dataset.test, "test"),
        });
    }
    let signals = signals_for(cfg)?;
    let n = signals.ncols();
    let m = cfg.measurements(n);
    let a = gaussian_measurement_matrix(m, n, root, "cli/sensing")?;
    let full = Dataset::from_signals(
        signals,
        a.view(),
        cfg.sensing.noise_std,
        root,
        "cli/noise",
        "full",
    )?;
    Ok(TrainData {
        a_tilde: a,
        train: full.slice(0..cfg.dataset.train, "train"),
        test: full.slice(
            cfg.dataset.train..cfg.dataset.train + cfg.dataset.test,
            "test",
        ),
    })
}
