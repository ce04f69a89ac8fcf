//! Flat binary model checkpoints, little-endian throughout: a fixed header
//! (magic, version, L, N, n, m as u32, then t1, t2, mu as f64) followed by W
//! row-major as doubles.

use super::UnrolledDecoder;
use crate::error::{CdecError, Result};
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: u32 = 0x43444e57; // "CDNW"
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 6 * 4 + 3 * 8;

pub fn save_checkpoint(path: &Path, decoder: &UnrolledDecoder) -> Result<()> {
    let at = |e| CdecError::io_at(path.display().to_string(), e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(at)?);
    for v in [
        MAGIC,
        VERSION,
        decoder.l_layers() as u32,
        decoder.rows() as u32,
        decoder.n() as u32,
        decoder.m() as u32,
    ] {
        f.write_all(&v.to_le_bytes()).map_err(at)?;
    }
    for v in [decoder.t1(), decoder.t2(), decoder.mu()] {
        f.write_all(&v.to_le_bytes()).map_err(at)?;
    }
    for v in decoder.w().iter() {
        f.write_all(&v.to_le_bytes()).map_err(at)?;
    }
    f.flush().map_err(at)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<UnrolledDecoder> {
    let at = |e| CdecError::io_at(path.display().to_string(), e);
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(at)?);
    let mut head = [0u8; HEADER_LEN];
    f.read_exact(&mut head).map_err(|_| CdecError::Format {
        path: path.display().to_string(),
        offset: 0,
        reason: format!("file shorter than the {HEADER_LEN}-byte header"),
    })?;
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(head[o..o + 8].try_into().unwrap());
    let magic = u32_at(0);
    if magic != MAGIC {
        return Err(CdecError::Format {
            path: path.display().to_string(),
            offset: 0,
            reason: format!("bad magic {magic:#010x}, expected {MAGIC:#010x}"),
        });
    }
    let version = u32_at(4);
    if version != VERSION {
        return Err(CdecError::Format {
            path: path.display().to_string(),
            offset: 4,
            reason: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let l = u32_at(8) as usize;
    let nn = u32_at(12) as usize;
    let n = u32_at(16) as usize;
    let m = u32_at(20) as usize;
    let t1 = f64_at(24);
    let t2 = f64_at(32);
    let mu = f64_at(40);
    let expected = nn * n * 8;
    let mut body = Vec::with_capacity(expected);
    f.read_to_end(&mut body).map_err(at)?;
    if body.len() != expected {
        return Err(CdecError::Format {
            path: path.display().to_string(),
            offset: (HEADER_LEN + body.len()) as u64,
            reason: format!(
                "expected {expected} bytes of W data for a {nn}x{n} operator, found {}",
                body.len()
            ),
        });
    }
    let mut w = Array2::zeros((nn, n));
    for (slot, bytes) in w.iter_mut().zip(body.chunks_exact(8)) {
        *slot = f64::from_le_bytes(bytes.try_into().unwrap());
    }
    UnrolledDecoder::with_steps(l, w, t1, t2, mu, m)
}
