//! Subcommand implementations.
//!
//! Every artifact goes into the configured output directory with a
//! `.meta.json` sidecar carrying the resolved config, a SHA-256 of the
//! artifact bytes, and command-specific extras. Artifact bodies are
//! timestamp-free, so reruns with identical settings reproduce them byte
//! for byte; wall-clock time lives only in the sidecars.

use crate::config::ExperimentConfig;
use crate::data::{build_train_data, CACHE_TEST, CACHE_TRAIN};
use cdec::continuation::continuation_weight;
use cdec::landscape::{random_directions, roughness, scan, GridMeta, ROW_NORM_TAG};
use cdec::parallel::ExecMode;
use cdec::report::{
    read_run_record, render_results_table, sha256_hex, write_grid_csv, write_history_csv,
    write_results_csv, write_run_record, write_sidecar, write_trace_csv, write_vector_csv,
    RunRecord,
};
use cdec::sensing::cache::write_cache;
use cdec::sensing::{init_analysis_operator, Dataset, SensingProblem};
use cdec::solver::{feasibility_gap, objective, solve, SolverConfig, TraceRow};
use cdec::trainer::{evaluate, train, CellOutcome, CellSpec, Metrics};
use cdec::unfolded::checkpoint::{load_checkpoint, save_checkpoint};
use cdec::unfolded::UnrolledDecoder;
use cdec::{CdecError, Result};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CdecError::io_at(dir.display().to_string(), e))
}

fn write_artifact(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CdecError::io_at(path.display().to_string(), e))
}

fn csv_to_bytes(build: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    build(&mut buf).map_err(|e| CdecError::io_at("<memory>", e))?;
    Ok(buf)
}

/// Write `bytes` to `dir/name` and its sidecar; returns the artifact path.
fn emit(
    dir: &Path,
    name: &str,
    bytes: &[u8],
    cfg: &ExperimentConfig,
    extra: serde_json::Value,
) -> Result<PathBuf> {
    let path = dir.join(name);
    write_artifact(&path, bytes)?;
    write_sidecar(&path, &cfg.resolved, &extra)?;
    Ok(path)
}

fn load_matching_checkpoint(path: &Path, n: usize) -> Result<UnrolledDecoder> {
    let dec = load_checkpoint(path)?;
    if dec.n() != n {
        return Err(CdecError::invalid(format!(
            "checkpoint operates on dimension {} but the dataset has {n}",
            dec.n()
        )));
    }
    Ok(dec)
}

// ---------------------------------------------------------------- solve

pub struct SolveOpts {
    pub index: usize,
    pub iters: usize,
    pub rel_tol: f64,
    pub continuation_steps: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

/// Model-based reconstruction of one test sample, with the continuation
/// warm-start loop when more than one step is configured. Each step runs
/// the full `--iters` budget; the trace concatenates all steps under a
/// global iteration counter. Without a checkpoint the analysis operator is
/// the identity (plain l1 analysis); a checkpoint supplies its W and mu.
pub fn cmd_solve(cfg: &ExperimentConfig, opts: &SolveOpts) -> Result<()> {
    let data = build_train_data(cfg)?;
    if opts.index >= data.test.len() {
        return Err(CdecError::invalid(format!(
            "--index {} is out of range for a test split of {} samples",
            opts.index,
            data.test.len()
        )));
    }
    let n = data.train.n();
    let (w, mu, w_source) = match &opts.checkpoint {
        Some(p) => {
            let dec = load_matching_checkpoint(p, n)?;
            (dec.w().clone(), dec.mu(), p.display().to_string())
        }
        None => (Array2::eye(n), cfg.model.mu, "identity".to_string()),
    };
    let j_steps = opts
        .continuation_steps
        .unwrap_or(cfg.model.continuation_steps);
    if j_steps == 0 || opts.iters == 0 {
        return Err(CdecError::invalid(
            "--continuation-steps and --iters must be positive",
        ));
    }

    let i = opts.index;
    let mut stage = SensingProblem {
        a_tilde: data.a_tilde.clone(),
        y: data.test.y.row(i).to_owned(),
        eps: data.test.eps[i],
        x0: data.test.x0.row(i).to_owned(),
        mu,
    };
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut xhat_prev = stage.x0.clone();
    let mut x_final = stage.x0.clone();
    for j in 0..j_steps {
        let config = SolverConfig::for_problem(&stage, w.view(), opts.iters, opts.rel_tol)?;
        let (x, stage_trace) = solve(&stage, w.view(), &config).map_err(|e| match e {
            CdecError::Diverged { iter, context } => CdecError::Diverged {
                iter,
                context: format!("continuation step {j}: {context}"),
            },
            other => other,
        })?;
        for row in stage_trace {
            trace.push(TraceRow {
                iter: trace.len(),
                ..row
            });
        }
        let wgt = continuation_weight(j);
        stage.x0 = &xhat_prev + &(wgt * &(&x - &xhat_prev));
        xhat_prev = x.clone();
        x_final = x;
    }

    let obj = objective(x_final.view(), w.view(), mu, data.test.x0.row(i))?;
    let gap = feasibility_gap(
        x_final.view(),
        data.a_tilde.view(),
        data.test.y.row(i),
        data.test.eps[i],
    )?;
    let truth = data.test.x.row(i);
    let diff = &x_final - &truth;
    let rel_err = diff.dot(&diff).sqrt() / truth.dot(&truth).sqrt().max(1e-300);

    ensure_dir(&cfg.output_dir)?;
    let extra = serde_json::json!({
        "command": "solve",
        "index": i,
        "iters_per_step": opts.iters,
        "rel_tol": opts.rel_tol,
        "continuation_steps": j_steps,
        "w_source": w_source,
        "final_objective": obj,
        "feasibility_gap": gap,
        "relative_error": rel_err,
    });
    let buf = csv_to_bytes(|b| write_trace_csv(b, &trace))?;
    emit(&cfg.output_dir, "solve_trace.csv", &buf, cfg, extra.clone())?;
    let buf = csv_to_bytes(|b| write_vector_csv(b, x_final.view()))?;
    emit(&cfg.output_dir, "solve_xhat.csv", &buf, cfg, extra)?;
    println!(
        "solved test sample {i}: {j_steps} continuation step(s) x {} iters, objective {obj:.6}, \
         feasibility gap {gap:.3e}, relative error {rel_err:.3e}",
        opts.iters
    );
    println!(
        "wrote solve_trace.csv and solve_xhat.csv to {}",
        cfg.output_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train

/// Train the configured cell once per seed in [train].seeds. Per seed this
/// writes `model_s<seed>.ckpt`, `history_s<seed>.csv`, and
/// `result_s<seed>.json`; the seed-averaged summary lands in `results.csv`.
/// A failing seed is reported and skipped, matching the sweep semantics of
/// the trainer, but an all-seeds failure is an error.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let data = build_train_data(cfg)?;
    let n = data.train.n();
    let cell = CellSpec {
        l_layers: cfg.model.layers,
        j_steps: cfg.model.continuation_steps,
        rows: cfg.model.n_multiplier * n,
        loss: cfg.model.loss,
    };
    let base = cfg.to_train_config();
    let root = cfg.sensing.seed;
    let fingerprint = cfg.fingerprint();
    ensure_dir(&cfg.output_dir)?;

    let mut outcome = CellOutcome {
        spec: cell.clone(),
        per_seed: Vec::new(),
        failures: Vec::new(),
    };
    let mut first_error: Option<CdecError> = None;
    for &seed in &cfg.train.seeds {
        let attempt = (|| -> Result<(UnrolledDecoder, Metrics)> {
            let w0 = init_analysis_operator(cell.rows, n, root, &format!("cli/init/{seed}"))?;
            let dec = UnrolledDecoder::new(cell.l_layers, w0, data.a_tilde.view(), cfg.model.mu)?;
            train(&data, dec, &base, seed)
        })();
        let (dec, metrics) = match attempt {
            Ok(pair) => pair,
            Err(e) => {
                eprintln!("seed {seed} failed: {e}");
                outcome.failures.push((seed, e.to_string()));
                first_error.get_or_insert(e);
                continue;
            }
        };

        let extra = serde_json::json!({ "command": "train", "seed": seed, "cell": cell.label() });
        let ckpt = cfg.output_dir.join(format!("model_s{seed}.ckpt"));
        save_checkpoint(&ckpt, &dec)?;
        write_sidecar(&ckpt, &cfg.resolved, &extra)?;
        let buf = csv_to_bytes(|b| write_history_csv(b, &metrics.history))?;
        emit(
            &cfg.output_dir,
            &format!("history_s{seed}.csv"),
            &buf,
            cfg,
            extra.clone(),
        )?;
        let record = RunRecord {
            l_layers: cell.l_layers,
            j_steps: cell.j_steps,
            rows: cell.rows,
            loss: cell.loss.to_string(),
            seed,
            train_loss: metrics.train_loss,
            test_loss: metrics.test_loss,
            ege: metrics.ege,
            config_fingerprint: fingerprint.clone(),
        };
        let record_path = cfg.output_dir.join(format!("result_s{seed}.json"));
        write_run_record(&record_path, &record)?;
        write_sidecar(&record_path, &cfg.resolved, &extra)?;
        println!(
            "seed {seed}: train {:.6}, test {:.6}, ege {:.6}{}",
            metrics.train_loss,
            metrics.test_loss,
            metrics.ege,
            metrics
                .best_epoch
                .map(|e| format!(" (snapshot from epoch {e})"))
                .unwrap_or_default()
        );
        outcome.per_seed.push((seed, metrics));
    }
    if outcome.per_seed.is_empty() {
        // surface the real failure so divergence keeps its exit code
        return Err(first_error.expect("no seeds succeeded, so one failed"));
    }

    let cells = [outcome];
    let buf = csv_to_bytes(|b| write_results_csv(b, &cells))?;
    emit(
        &cfg.output_dir,
        "results.csv",
        &buf,
        cfg,
        serde_json::json!({ "command": "train", "cell": cell.label() }),
    )?;
    print!("{}", render_results_table(&cells));
    println!("artifacts written to {}", cfg.output_dir.display());
    Ok(())
}

// ---------------------------------------------------------------- eval

pub struct EvalOpts {
    pub checkpoint: PathBuf,
}

/// Evaluate a checkpoint on the configured dataset with the configured
/// loss and continuation depth.
pub fn cmd_eval(cfg: &ExperimentConfig, opts: &EvalOpts) -> Result<()> {
    let data = build_train_data(cfg)?;
    let dec = load_matching_checkpoint(&opts.checkpoint, data.train.n())?;
    let metrics = evaluate(
        &data,
        &dec,
        cfg.model.loss,
        cfg.model.continuation_steps,
        ExecMode::Parallel,
    )?;
    ensure_dir(&cfg.output_dir)?;
    let body = format!(
        "train_loss,test_loss,ege\n{},{},{}\n",
        metrics.train_loss, metrics.test_loss, metrics.ege
    );
    emit(
        &cfg.output_dir,
        "eval.csv",
        body.as_bytes(),
        cfg,
        serde_json::json!({
            "command": "eval",
            "checkpoint": opts.checkpoint.display().to_string(),
        }),
    )?;
    println!(
        "train {:.6}, test {:.6}, ege {:.6} ({} / {} samples, loss {}, J={})",
        metrics.train_loss,
        metrics.test_loss,
        metrics.ege,
        data.train.len(),
        data.test.len(),
        cfg.model.loss,
        cfg.model.continuation_steps
    );
    Ok(())
}

// ---------------------------------------------------------------- landscape

pub struct LandscapeOpts {
    pub checkpoint: PathBuf,
    pub points: usize,
    pub lim: f64,
    pub subset: usize,
}

/// Scan the loss surface around a checkpoint along two random directions
/// with rows rescaled to the checkpoint's row norms. The grid is symmetric
/// around the unperturbed model, so `--points` must be odd.
pub fn cmd_landscape(cfg: &ExperimentConfig, opts: &LandscapeOpts) -> Result<()> {
    if opts.points < 3 || opts.points.is_multiple_of(2) {
        return Err(CdecError::invalid(
            "--points must be an odd number of at least 3 so the origin is a grid point",
        ));
    }
    if !(opts.lim > 0.0 && opts.lim.is_finite()) {
        return Err(CdecError::invalid("--lim must be finite and positive"));
    }
    let data = build_train_data(cfg)?;
    let dec = load_matching_checkpoint(&opts.checkpoint, data.train.n())?;
    let ds: Dataset = if opts.subset > 0 && opts.subset < data.test.len() {
        data.test.slice(0..opts.subset, "scan")
    } else {
        data.test.clone()
    };

    let dir_seed = cfg.sensing.seed;
    let (d1, d2) = random_directions(dec.w().view(), dir_seed)?;
    let half = (opts.points - 1) / 2;
    let h = opts.lim / half as f64;
    let axis: Vec<f64> = (0..opts.points)
        .map(|i| (i as f64 - half as f64) * h)
        .collect();
    let meta = GridMeta {
        model_id: opts.checkpoint.display().to_string(),
        dataset_id: ds.tag.clone(),
        seed: dir_seed,
        normalization: ROW_NORM_TAG.into(),
    };
    let grid = scan(
        &dec,
        data.a_tilde.view(),
        &ds,
        &d1,
        &d2,
        &axis,
        &axis,
        cfg.model.loss,
        cfg.model.continuation_steps,
        ExecMode::Parallel,
        meta,
    )?;
    let rough = roughness(&grid)?;
    let origin = grid
        .origin_value()
        .expect("scan guarantees a finite origin");

    ensure_dir(&cfg.output_dir)?;
    let d1_bytes: Vec<u8> = d1.iter().flat_map(|v| v.to_le_bytes()).collect();
    let d2_bytes: Vec<u8> = d2.iter().flat_map(|v| v.to_le_bytes()).collect();
    let extra = serde_json::json!({
        "command": "landscape",
        "checkpoint": opts.checkpoint.display().to_string(),
        "points": opts.points,
        "lim": opts.lim,
        "subset": ds.len(),
        "direction_seed": dir_seed,
        "direction_norms": "row-norm-matched",
        "d1_sha256": sha256_hex(&d1_bytes),
        "d2_sha256": sha256_hex(&d2_bytes),
        "origin_loss": origin,
        "roughness": rough.value,
        "interior_valid": rough.interior_valid,
        "interior_total": rough.interior_total,
        "missing_cells": grid.missing_count(),
    });
    let buf = csv_to_bytes(|b| write_grid_csv(b, &grid))?;
    emit(&cfg.output_dir, "landscape_grid.csv", &buf, cfg, extra)?;
    println!(
        "{}x{} grid over [-{lim}, {lim}]^2: origin loss {origin:.6}, log-roughness {:.6} \
         ({}/{} interior points valid, {} cells missing)",
        opts.points,
        opts.points,
        rough.value,
        rough.interior_valid,
        rough.interior_total,
        grid.missing_count(),
        lim = opts.lim,
    );
    println!("wrote landscape_grid.csv to {}", cfg.output_dir.display());
    Ok(())
}

// ---------------------------------------------------------------- compare

pub struct CompareOpts {
    pub results_dir: Option<PathBuf>,
}

fn collect_records(dir: &Path, found: &mut Vec<(PathBuf, RunRecord)>, skipped: &mut Vec<String>) {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            skipped.push(format!("{}: {e}", dir.display()));
            return;
        }
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for path in paths {
        if path.is_dir() {
            collect_records(&path, found, skipped);
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !(name.starts_with("result") && name.ends_with(".json")) || name.ends_with(".meta.json")
        {
            continue;
        }
        match read_run_record(&path) {
            Ok(r) => found.push((path, r)),
            Err(e) => skipped.push(format!("{}: {e}", path.display())),
        }
    }
}

/// Aggregate run records under a results directory into a seed-averaged
/// table per (L, J, N, loss) cell. Cells whose records carry different
/// config fingerprints are reported per fingerprint, never merged, and the
/// heterogeneity is flagged. Unreadable files are reported but do not fail
/// the command.
pub fn cmd_compare(cfg: &ExperimentConfig, opts: &CompareOpts) -> Result<()> {
    let dir = opts
        .results_dir
        .clone()
        .unwrap_or_else(|| cfg.output_dir.clone());
    let mut found = Vec::new();
    let mut skipped = Vec::new();
    collect_records(&dir, &mut found, &mut skipped);
    for s in &skipped {
        eprintln!("skipped: {s}");
    }
    if found.is_empty() {
        return Err(CdecError::invalid(format!(
            "no readable run records under {}",
            dir.display()
        )));
    }

    type CellKey = (usize, usize, usize, String);
    let mut groups: BTreeMap<(CellKey, String), Vec<RunRecord>> = BTreeMap::new();
    for (path, r) in found {
        let loss_ok = r.loss.parse::<cdec::ops::LossKind>();
        if loss_ok.is_err() {
            eprintln!("skipped: {}: unknown loss '{}'", path.display(), r.loss);
            continue;
        }
        let key = (
            (r.l_layers, r.j_steps, r.rows, r.loss.clone()),
            r.config_fingerprint.clone(),
        );
        groups.entry(key).or_default().push(r);
    }

    let mut fingerprints_per_cell: BTreeMap<CellKey, usize> = BTreeMap::new();
    for (cell, _) in groups.keys() {
        *fingerprints_per_cell.entry(cell.clone()).or_default() += 1;
    }
    for (cell, count) in &fingerprints_per_cell {
        if *count > 1 {
            eprintln!(
                "warning: cell L={} J={} N={} loss={} has {count} distinct config \
                 fingerprints; rows kept separate",
                cell.0, cell.1, cell.2, cell.3
            );
        }
    }

    let mut cells: Vec<CellOutcome> = Vec::new();
    for ((key, _fp), records) in groups {
        let loss = key.3.parse().expect("validated above");
        let mut outcome = CellOutcome {
            spec: CellSpec {
                l_layers: key.0,
                j_steps: key.1,
                rows: key.2,
                loss,
            },
            per_seed: Vec::new(),
            failures: Vec::new(),
        };
        for r in records {
            outcome.per_seed.push((
                r.seed,
                Metrics {
                    train_loss: r.train_loss,
                    test_loss: r.test_loss,
                    ege: r.ege,
                    best_epoch: None,
                    history: Vec::new(),
                },
            ));
        }
        outcome.per_seed.sort_by_key(|(s, _)| *s);
        cells.push(outcome);
    }

    let buf = csv_to_bytes(|b| write_results_csv(b, &cells))?;
    emit(
        &dir,
        "compare.csv",
        &buf,
        cfg,
        serde_json::json!({
            "command": "compare",
            "records": cells.iter().map(|c| c.per_seed.len()).sum::<usize>(),
            "skipped": skipped.len(),
        }),
    )?;
    print!("{}", render_results_table(&cells));
    if !skipped.is_empty() {
        println!("{} unreadable record(s) reported above", skipped.len());
    }
    println!("wrote compare.csv to {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------- gen-data

/// Materialize the configured dataset into `train.ds` / `test.ds` caches
/// that later runs can load with source = cache.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.dataset.source == crate::config::DataSource::Cache {
        return Err(CdecError::invalid(
            "gen-data regenerates from a generator source; source = cache is already materialized",
        ));
    }
    let data = build_train_data(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    for (name, split) in [(CACHE_TRAIN, &data.train), (CACHE_TEST, &data.test)] {
        let path = cfg.output_dir.join(name);
        write_cache(&path, split)?;
        write_sidecar(
            &path,
            &cfg.resolved,
            &serde_json::json!({
                "command": "gen-data",
                "split": split.tag,
                "samples": split.len(),
                "n": split.n(),
                "m": split.m(),
            }),
        )?;
    }
    println!(
        "wrote {CACHE_TRAIN} ({} samples) and {CACHE_TEST} ({} samples) to {} (n={}, m={})",
        data.train.len(),
        data.test.len(),
        cfg.output_dir.display(),
        data.train.n(),
        data.train.m()
    );
    Ok(())
}
