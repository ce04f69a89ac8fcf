//! Flat binary dataset cache: 16-byte header (magic, n, m, count as
//! little-endian u32) followed by raw little-endian doubles, per sample the
//! signal x then the measurement y. The derived per-sample quantities
//! (x0, eps) are recomputed on load from the sensing matrix, which is itself
//! reproducible from the experiment seed.

use super::Dataset;
use crate::error::{CdecError, Result};
use ndarray::{Array1, Array2, ArrayView2};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: u32 = 0x43445344; // "CDSD"

/// Serialize the (x, y) pairs of a dataset.
pub fn write_cache(path: &Path, ds: &Dataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&MAGIC.to_le_bytes())?;
    f.write_all(&(ds.n() as u32).to_le_bytes())?;
    f.write_all(&(ds.m() as u32).to_le_bytes())?;
    f.write_all(&(ds.len() as u32).to_le_bytes())?;
    for i in 0..ds.len() {
        for v in ds.x.row(i) {
            f.write_all(&v.to_le_bytes())?;
        }
        for v in ds.y.row(i) {
            f.write_all(&v.to_le_bytes())?;
        }
        // eps came from the discarded noise realization; recomputing
        // ||y - Ax|| on load can differ in the last ulp, so store it
        f.write_all(&ds.eps[i].to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Load a cache written by [`write_cache`], recomputing x0 = A^T y against
/// the supplied sensing matrix. x, y, and eps reload bit-exactly; x0 is an
/// exact function of y and A, so the whole dataset round-trips.
pub fn read_cache(path: &Path, a_tilde: ArrayView2<f64>, tag: &str) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 16];
    f.read_exact(&mut head).map_err(|_| CdecError::Format {
        path: path.display().to_string(),
        offset: 0,
        reason: "file shorter than the 16-byte header".into(),
    })?;
    let magic = u32::from_le_bytes(head[0..4].try_into().unwrap());
    if magic != MAGIC {
        return Err(CdecError::Format {
            path: path.display().to_string(),
            offset: 0,
            reason: format!("bad magic {magic:#010x}, expected {MAGIC:#010x}"),
        });
    }
    let n = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    if a_tilde.dim() != (m, n) {
        return Err(CdecError::invalid(format!(
            "cache holds {m}x{n} problems but sensing matrix is {:?}",
            a_tilde.dim()
        )));
    }
    let per_sample = (n + m + 1) * 8;
    let mut body = Vec::with_capacity(count * per_sample);
    f.read_to_end(&mut body)?;
    if body.len() != count * per_sample {
        return Err(CdecError::Format {
            path: path.display().to_string(),
            offset: 16 + body.len() as u64,
            reason: format!(
                "expected {} body bytes for {count} samples, found {}",
                count * per_sample,
                body.len()
            ),
        });
    }
    let mut x = Array2::zeros((count, n));
    let mut y = Array2::zeros((count, m));
    let mut eps = Array1::zeros(count);
    let mut off = 0;
    let take = |bytes: &[u8]| f64::from_le_bytes(bytes[..8].try_into().unwrap());
    for i in 0..count {
        for j in 0..n {
            x[[i, j]] = take(&body[off..]);
            off += 8;
        }
        for j in 0..m {
            y[[i, j]] = take(&body[off..]);
            off += 8;
        }
        eps[i] = take(&body[off..]);
        off += 8;
    }
    let x0 = y.dot(&a_tilde);
    Ok(Dataset {
        x,
        y,
        x0,
        eps,
        tag: tag.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::{gaussian_measurement_matrix, sparse_signals, Dataset};

    #[test]
    fn cache_round_trip_is_exact() {
        let a = gaussian_measurement_matrix(8, 32, 5, "a").unwrap();
        let xs = sparse_signals(32, 3, 12, 6, "sig").unwrap();
        let ds = Dataset::from_signals(xs, a.view(), 1e-4, 7, "noise", "train").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        write_cache(&path, &ds).unwrap();
        let back = read_cache(&path, a.view(), "train").unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.eps, ds.eps);
        assert_eq!(back.x0, ds.x0);
    }

    #[test]
    fn wrong_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, [0u8; 16]).unwrap();
        let a = gaussian_measurement_matrix(2, 4, 0, "a").unwrap();
        assert!(matches!(
            read_cache(&path, a.view(), "t"),
            Err(CdecError::Format { .. })
        ));
        let path2 = dir.path().join("short.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path2, bytes).unwrap();
        assert!(matches!(
            read_cache(&path2, a.view(), "t"),
            Err(CdecError::Format { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_with_sensing_matrix_is_rejected() {
        let a = gaussian_measurement_matrix(8, 32, 5, "a").unwrap();
        let xs = sparse_signals(32, 3, 2, 6, "sig").unwrap();
        let ds = Dataset::from_signals(xs, a.view(), 0.0, 7, "noise", "t").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        write_cache(&path, &ds).unwrap();
        let wrong = gaussian_measurement_matrix(7, 32, 5, "a").unwrap();
        assert!(read_cache(&path, wrong.view(), "t").is_err());
    }
}
