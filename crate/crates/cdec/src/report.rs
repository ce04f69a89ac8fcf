//! Artifact serialization: CSV bodies for traces, training histories,
//! landscape grids, and results tables, plus JSON sidecars. Bodies contain
//! no timestamps, so a rerun with the same inputs is byte-identical;
//! wall-clock metadata lives only in sidecars.

use crate::error::{CdecError, Result};
use crate::landscape::LandscapeGrid;
use crate::solver::TraceRow;
use crate::trainer::{CellOutcome, EpochRecord};
use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Shortest round-trip decimal form of a float. Stable across runs for
/// identical bits, which is what keeps CSV bodies reproducible.
pub fn format_f64(v: f64) -> String {
    format!("{v}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CdecError {
    CdecError::io_at(path.display().to_string(), e)
}

/// Per-iteration solver trace.
pub fn write_trace_csv(mut out: impl Write, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(out, "iter,objective,feasibility_gap,rel_change")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.iter,
            format_f64(r.objective),
            format_f64(r.feasibility_gap),
            format_f64(r.rel_change)
        )?;
    }
    Ok(())
}

/// Per-epoch training history.
pub fn write_history_csv(mut out: impl Write, rows: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_loss,test_loss,ege")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            format_f64(r.train_loss),
            format_f64(r.val_loss),
            format_f64(r.test_loss),
            format_f64(r.ege)
        )?;
    }
    Ok(())
}

/// Landscape grid in long form, one row per (alpha, beta) point. A missing
/// cell leaves the loss field empty.
pub fn write_grid_csv(mut out: impl Write, grid: &LandscapeGrid) -> std::io::Result<()> {
    writeln!(out, "alpha,beta,loss")?;
    for (i, &alpha) in grid.alphas.iter().enumerate() {
        for (j, &beta) in grid.betas.iter().enumerate() {
            let loss = grid.losses[[i, j]].map(format_f64).unwrap_or_default();
            writeln!(out, "{},{},{}", format_f64(alpha), format_f64(beta), loss)?;
        }
    }
    Ok(())
}

/// A reconstruction or any other flat vector.
pub fn write_vector_csv(mut out: impl Write, x: ArrayView1<f64>) -> std::io::Result<()> {
    writeln!(out, "index,value")?;
    for (i, &v) in x.iter().enumerate() {
        writeln!(out, "{},{}", i, format_f64(v))?;
    }
    Ok(())
}

/// Seed-averaged experiment results, one row per grid cell.
pub fn write_results_csv(mut out: impl Write, cells: &[CellOutcome]) -> std::io::Result<()> {
    writeln!(
        out,
        "l_layers,j_steps,rows,loss,seeds_ok,seeds_failed,mean_train_loss,mean_test_loss,mean_ege"
    )?;
    for c in cells {
        let fmt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.spec.l_layers,
            c.spec.j_steps,
            c.spec.rows,
            csv_field(&c.spec.loss.to_string()),
            c.per_seed.len(),
            c.failures.len(),
            fmt(c.mean_train_loss()),
            fmt(c.mean_test_loss()),
            fmt(c.mean_ege())
        )?;
    }
    Ok(())
}

/// Column-aligned text rendering of the same results table.
pub fn render_results_table(cells: &[CellOutcome]) -> String {
    let header = [
        "L", "J", "N", "loss", "ok", "failed", "train", "test", "ege",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for c in cells {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        rows.push(vec![
            c.spec.l_layers.to_string(),
            c.spec.j_steps.to_string(),
            c.spec.rows.to_string(),
            c.spec.loss.to_string(),
            c.per_seed.len().to_string(),
            c.failures.len().to_string(),
            fmt(c.mean_train_loss()),
            fmt(c.mean_test_loss()),
            fmt(c.mean_ege()),
        ]);
    }
    render_table(&rows)
}

/// Pads each column to its widest cell. The first row is the header.
pub fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for r in rows {
        for (i, cell) in r.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (i, cell) in r.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{:<width$}", cell, width = widths[i]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// One completed training run, written next to its artifacts so result
/// directories can be aggregated later. The fingerprint hashes the resolved
/// config minus the seed; rows with equal cell keys but different
/// fingerprints must not be averaged together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub l_layers: usize,
    pub j_steps: usize,
    pub rows: usize,
    pub loss: String,
    pub seed: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub ege: f64,
    pub config_fingerprint: String,
}

pub fn write_run_record(path: &Path, record: &RunRecord) -> Result<()> {
    let body = serde_json::to_string_pretty(record)
        .map_err(|e| CdecError::invalid(format!("run record serialization: {e}")))?;
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

pub fn read_run_record(path: &Path) -> Result<RunRecord> {
    let body = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&body).map_err(|e| CdecError::Format {
        path: path.display().to_string(),
        offset: e.column() as u64,
        reason: format!("run record parse: {e}"),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// `<artifact>.meta.json` next to the artifact.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".meta.json");
    artifact.with_file_name(name)
}

/// Writes the reproducibility sidecar for an already-written artifact:
/// content hash, resolved config, creation time, and command-specific
/// extras. The artifact body itself is never touched.
pub fn write_sidecar(
    artifact: &Path,
    resolved_config: &str,
    extra: &serde_json::Value,
) -> Result<PathBuf> {
    let bytes = std::fs::read(artifact).map_err(|e| io_err(artifact, e))?;
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let doc = serde_json::json!({
        "artifact": artifact.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        "sha256": sha256_hex(&bytes),
        "bytes": bytes.len(),
        "created_unix": created,
        "resolved_config": resolved_config,
        "extra": extra,
    });
    let path = sidecar_path(artifact);
    let body = serde_json::to_string_pretty(&doc)
        .map_err(|e| CdecError::invalid(format!("sidecar serialization: {e}")))?;
    std::fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::{GridMeta, ROW_NORM_TAG};
    use crate::ops::LossKind;
    use crate::trainer::{CellSpec, Metrics};
    use ndarray::{arr1, Array2};

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, -3.5, 1e-300, 2.0 / 3.0, 1.0, 0.0, 123456.789] {
            let s = format_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "value {v} via {s}");
        }
    }

    #[test]
    fn trace_csv_matches_golden_body() {
        let rows = vec![
            TraceRow {
                iter: 0,
                objective: 1.5,
                feasibility_gap: 0.25,
                rel_change: 0.0,
            },
            TraceRow {
                iter: 1,
                objective: 1.0,
                feasibility_gap: 0.0,
                rel_change: 0.125,
            },
        ];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "iter,objective,feasibility_gap,rel_change\n0,1.5,0.25,0\n1,1,0,0.125\n"
        );
    }

    #[test]
    fn history_csv_matches_golden_body() {
        let rows = vec![EpochRecord {
            epoch: 0,
            train_loss: 0.5,
            val_loss: 0.75,
            test_loss: 0.625,
            ege: 0.25,
        }];
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,val_loss,test_loss,ege\n0,0.5,0.75,0.625,0.25\n"
        );
    }

    #[test]
    fn grid_csv_leaves_missing_cells_empty() {
        let mut losses = Array2::from_elem((2, 2), None);
        losses[[0, 0]] = Some(1.0);
        losses[[0, 1]] = Some(2.5);
        losses[[1, 1]] = Some(0.5);
        let grid = LandscapeGrid {
            alphas: vec![0.0, 1.0],
            betas: vec![0.0, 1.0],
            losses,
            meta: GridMeta {
                model_id: "m".into(),
                dataset_id: "d".into(),
                seed: 1,
                normalization: ROW_NORM_TAG.into(),
            },
        };
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &grid).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "alpha,beta,loss\n0,0,1\n0,1,2.5\n1,0,\n1,1,0.5\n"
        );
    }

    #[test]
    fn vector_csv_is_indexed() {
        let mut buf = Vec::new();
        write_vector_csv(&mut buf, arr1(&[0.5, -1.0]).view()).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "index,value\n0,0.5\n1,-1\n"
        );
    }

    fn outcome() -> CellOutcome {
        let m = |t: f64| Metrics {
            train_loss: t,
            test_loss: t + 0.5,
            ege: 0.5,
            best_epoch: Some(0),
            history: vec![],
        };
        CellOutcome {
            spec: CellSpec {
                l_layers: 5,
                j_steps: 4,
                rows: 18,
                loss: LossKind::LogCosh,
            },
            per_seed: vec![(1, m(1.0)), (2, m(2.0))],
            failures: vec![(3, "boom".into())],
        }
    }

    #[test]
    fn results_csv_averages_over_seeds() {
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &[outcome()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.contains("5,4,18,log-cosh,2,1,1.5,2,0.5"),
            "body: {text}"
        );
    }

    #[test]
    fn text_table_is_aligned_and_complete() {
        let text = render_results_table(&[outcome()]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("L"));
        assert!(lines[1].contains("log-cosh"));
        let col = lines[0].find("test").unwrap();
        assert_eq!(&lines[1][col..col + 8], "2.000000");
    }

    #[test]
    fn identical_inputs_produce_identical_bytes() {
        let run = || {
            let mut buf = Vec::new();
            write_results_csv(&mut buf, &[outcome()]).unwrap();
            buf
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn run_record_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("result.json");
        let rec = RunRecord {
            l_layers: 5,
            j_steps: 1,
            rows: 18,
            loss: "mse".into(),
            seed: 7,
            train_loss: 0.25,
            test_loss: 0.5,
            ege: 0.25,
            config_fingerprint: "abc".into(),
        };
        write_run_record(&path, &rec).unwrap();
        assert_eq!(read_run_record(&path).unwrap(), rec);
        assert!(read_run_record(&dir.path().join("missing.json")).is_err());
    }

    #[test]
    fn sidecar_hashes_the_artifact_and_carries_config() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("trace.csv");
        std::fs::write(&artifact, b"iter,objective\n0,1\n").unwrap();
        let extra = serde_json::json!({"command": "solve"});
        let side = write_sidecar(&artifact, "mu = 1", &extra).unwrap();
        assert_eq!(side, dir.path().join("trace.csv.meta.json"));
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&side).unwrap()).unwrap();
        assert_eq!(doc["sha256"], sha256_hex(b"iter,objective\n0,1\n"));
        assert_eq!(doc["resolved_config"], "mu = 1");
        assert_eq!(doc["extra"]["command"], "solve");
        assert!(doc["created_unix"].as_u64().unwrap() > 0);
        assert_eq!(
            std::fs::read(&artifact).unwrap(),
            b"iter,objective\n0,1\n".to_vec()
        );
    }

    #[test]
    fn csv_fields_with_commas_are_quoted() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
