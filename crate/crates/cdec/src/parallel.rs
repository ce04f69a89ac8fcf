//! Data-parallel execution over fixed-size batch chunks.
//!
//! Batches are split into chunks of [`CHUNK`] samples. Each chunk is mapped
//! independently (possibly on worker threads) and the per-chunk results are
//! folded in chunk-index order, so the arithmetic — and therefore every bit
//! of the result — is identical whether the map runs sequentially or on any
//! number of rayon workers.

/// Number of samples per work unit. Fixed so that summation order never
/// depends on thread count.
pub const CHUNK: usize = 16;

/// Execution strategy for batch work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// Chunks processed on the calling thread, in order.
    Sequential,
    /// Chunks processed by rayon workers. Without the `parallel` feature
    /// this falls back to the sequential path.
    #[default]
    Parallel,
}

/// Split `0..len` into consecutive ranges of at most `CHUNK` items.
pub fn chunk_ranges(len: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::with_capacity(len.div_ceil(CHUNK));
    let mut start = 0;
    while start < len {
        let end = (start + CHUNK).min(len);
        out.push(start..end);
        start = end;
    }
    out
}

/// Map every chunk range through `f` and return the results in chunk order.
pub fn map_chunks<R, F>(len: usize, mode: ExecMode, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Send + Sync,
{
    let ranges = chunk_ranges(len);
    match mode {
        ExecMode::Sequential => ranges.into_iter().map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                ranges.into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                ranges.into_iter().map(f).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_the_batch_without_overlap() {
        let rs = chunk_ranges(37);
        assert_eq!(rs.len(), 3);
        assert_eq!(rs[0], 0..16);
        assert_eq!(rs[1], 16..32);
        assert_eq!(rs[2], 32..37);
        assert!(chunk_ranges(0).is_empty());
        assert_eq!(chunk_ranges(16), vec![0..16]);
    }

    #[test]
    fn parallel_and_sequential_results_are_bit_identical() {
        // a reduction that is sensitive to summation order
        let work = |r: std::ops::Range<usize>| -> f64 {
            r.map(|i| ((i as f64) * 0.1).sin() / (i as f64 + 1.0)).sum()
        };
        let seq: f64 = map_chunks(1000, ExecMode::Sequential, work).iter().sum();
        let par: f64 = map_chunks(1000, ExecMode::Parallel, work).iter().sum();
        assert_eq!(seq.to_bits(), par.to_bits());
    }
}
