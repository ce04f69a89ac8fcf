//! IDX file parsing (the MNIST container format): big-endian magic and
//! dimension header followed by unsigned bytes.

use crate::error::{CdecError, Result};
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

/// Magic for a 3-dimensional u8 tensor (image stacks).
pub const MAGIC_IMAGES: u32 = 0x0000_0803;
/// Magic for a 1-dimensional u8 tensor (label lists).
pub const MAGIC_LABELS: u32 = 0x0000_0801;

fn read_be_u32(r: &mut impl Read, path: &Path, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| CdecError::Format {
        path: path.display().to_string(),
        offset: *offset,
        reason: "truncated while reading a big-endian u32".into(),
    })?;
    *offset += 4;
    Ok(u32::from_be_bytes(buf))
}

/// Raw image stack from an IDX file: (count, rows, cols) and the pixel bytes.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Parse an IDX image file, validating magic and length.
pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let mut f = std::fs::File::open(path)?;
    let mut offset = 0u64;
    let magic = read_be_u32(&mut f, path, &mut offset)?;
    if magic != MAGIC_IMAGES {
        return Err(CdecError::Format {
            path: path.display().to_string(),
            offset: 0,
            reason: format!("bad magic {magic:#010x}, expected {MAGIC_IMAGES:#010x}"),
        });
    }
    let count = read_be_u32(&mut f, path, &mut offset)? as usize;
    let rows = read_be_u32(&mut f, path, &mut offset)? as usize;
    let cols = read_be_u32(&mut f, path, &mut offset)? as usize;
    let expected = count * rows * cols;
    let mut pixels = Vec::with_capacity(expected);
    f.read_to_end(&mut pixels)?;
    if pixels.len() != expected {
        return Err(CdecError::Format {
            path: path.display().to_string(),
            offset: offset + pixels.len() as u64,
            reason: format!(
                "expected {expected} pixel bytes for {count}x{rows}x{cols}, found {}",
                pixels.len()
            ),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

/// Write an IDX image file (used by tests and the data generator).
pub fn write_idx_images(
    path: &Path,
    count: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> Result<()> {
    if pixels.len() != count * rows * cols {
        return Err(CdecError::invalid(format!(
            "pixel buffer length {} does not match {count}x{rows}x{cols}",
            pixels.len()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&MAGIC_IMAGES.to_be_bytes())?;
    f.write_all(&(count as u32).to_be_bytes())?;
    f.write_all(&(rows as u32).to_be_bytes())?;
    f.write_all(&(cols as u32).to_be_bytes())?;
    f.write_all(pixels)?;
    Ok(())
}

/// Load an IDX image file as row-vectorized signals in [0, 1], with optional
/// average-pool downsampling by an integer factor.
pub fn load_idx_signals(path: &Path, downsample: usize) -> Result<Array2<f64>> {
    if downsample == 0 {
        return Err(CdecError::invalid("downsample factor must be >= 1"));
    }
    let idx = read_idx_images(path)?;
    if idx.rows % downsample != 0 || idx.cols % downsample != 0 {
        return Err(CdecError::invalid(format!(
            "downsample {downsample} does not divide image size {}x{}",
            idx.rows, idx.cols
        )));
    }
    let (r2, c2) = (idx.rows / downsample, idx.cols / downsample);
    let mut out = Array2::zeros((idx.count, r2 * c2));
    let cell = (downsample * downsample) as f64;
    for img in 0..idx.count {
        let base = img * idx.rows * idx.cols;
        for i in 0..r2 {
            for j in 0..c2 {
                let mut acc = 0.0;
                for di in 0..downsample {
                    for dj in 0..downsample {
                        let r = i * downsample + di;
                        let c = j * downsample + dj;
                        acc += idx.pixels[base + r * idx.cols + c] as f64;
                    }
                }
                out[[img, i * c2 + j]] = acc / cell / 255.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx");
        let pixels: Vec<u8> = (0..2 * 4 * 4).map(|i| (i * 7 % 256) as u8).collect();
        write_idx_images(&path, 2, 4, 4, &pixels).unwrap();
        let back = read_idx_images(&path).unwrap();
        assert_eq!((back.count, back.rows, back.cols), (2, 4, 4));
        assert_eq!(back.pixels, pixels);
    }

    #[test]
    fn bad_magic_reports_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        std::fs::write(&path, 0x1234_5678u32.to_be_bytes()).unwrap();
        match read_idx_images(&path) {
            Err(CdecError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&[1u8; 10]); // should be 32
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_idx_images(&path),
            Err(CdecError::Format { .. })
        ));
    }

    #[test]
    fn load_scales_and_downsamples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.idx");
        // one 4x4 image: upper-left 2x2 block all 255, rest 0
        let mut pixels = vec![0u8; 16];
        pixels[0] = 255;
        pixels[1] = 255;
        pixels[4] = 255;
        pixels[5] = 255;
        write_idx_images(&path, 1, 4, 4, &pixels).unwrap();
        let full = load_idx_signals(&path, 1).unwrap();
        assert_eq!(full.dim(), (1, 16));
        assert_eq!(full[[0, 0]], 1.0);
        assert_eq!(full[[0, 15]], 0.0);
        let half = load_idx_signals(&path, 2).unwrap();
        assert_eq!(half.dim(), (1, 4));
        assert_eq!(half[[0, 0]], 1.0);
        assert_eq!(half[[0, 1]], 0.0);
        // all-zero image stays a zero vector
        let zpath = dir.path().join("zero.idx");
        write_idx_images(&zpath, 1, 4, 4, &[0u8; 16]).unwrap();
        let z = load_idx_signals(&zpath, 2).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }
}
