//! Image-based signals: PNG directory ingestion and a synthetic generator
//! of smooth blob images used as the desk-scale stand-in when no image
//! corpus is available.

use crate::error::{CdecError, Result};
use crate::seed::rng_for;
use ndarray::Array2;
use rand::Rng;
use std::path::Path;

/// Load every PNG in a directory (sorted by file name) as grayscale signals
/// in [0, 1] via the luminance weights 0.299 R + 0.587 G + 0.114 B. All
/// images must share one size.
pub fn load_png_grayscale(dir: &Path) -> Result<Array2<f64>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CdecError::invalid(format!(
            "no .png files found in {}",
            dir.display()
        )));
    }
    let mut signals: Vec<Vec<f64>> = Vec::with_capacity(paths.len());
    let mut dims: Option<(u32, u32)> = None;
    for p in &paths {
        let img = image::open(p).map_err(|e| CdecError::Format {
            path: p.display().to_string(),
            offset: 0,
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let d = rgb.dimensions();
        match dims {
            None => dims = Some(d),
            Some(expect) if expect != d => {
                return Err(CdecError::Format {
                    path: p.display().to_string(),
                    offset: 0,
                    reason: format!("image size {d:?} differs from first image {expect:?}"),
                })
            }
            _ => {}
        }
        let v = rgb
            .pixels()
            .map(|px| {
                (0.299 * px.0[0] as f64 + 0.587 * px.0[1] as f64 + 0.114 * px.0[2] as f64) / 255.0
            })
            .collect();
        signals.push(v);
    }
    let n = signals[0].len();
    let flat: Vec<f64> = signals.into_iter().flatten().collect();
    Array2::from_shape_vec((paths.len(), n), flat).map_err(|e| CdecError::invalid(e.to_string()))
}

/// Deterministic synthetic images: each sample is a superposition of 2-4
/// Gaussian bumps with random centers, widths and amplitudes, rescaled into
/// [0, 1]. Smooth but not sparse in the pixel basis, so a learned analysis
/// operator has structure to find.
pub fn blob_images(side: usize, count: usize, root_seed: u64, label: &str) -> Result<Array2<f64>> {
    if side == 0 {
        return Err(CdecError::invalid("image side must be positive"));
    }
    let n = side * side;
    let mut rng = rng_for(root_seed, label);
    let mut out = Array2::zeros((count, n));
    for i in 0..count {
        let bumps = rng.gen_range(2..5usize);
        let mut img = vec![0.0f64; n];
        for _ in 0..bumps {
            let cx: f64 = rng.gen_range(0.0..side as f64);
            let cy: f64 = rng.gen_range(0.0..side as f64);
            let sg: f64 = rng.gen_range(1.2..2.8);
            let amp: f64 = rng.gen_range(0.4..1.0);
            let denom = 2.0 * sg * sg;
            for r in 0..side {
                for c in 0..side {
                    let dx = c as f64 - cx;
                    let dy = r as f64 - cy;
                    img[r * side + c] += amp * (-(dx * dx + dy * dy) / denom).exp();
                }
            }
        }
        let max = img.iter().cloned().fold(0.0f64, f64::max);
        let scale = if max > 1.0 { 1.0 / max } else { 1.0 };
        for (j, v) in img.iter().enumerate() {
            out[[i, j]] = v * scale;
        }
    }
    Ok(out)
}
