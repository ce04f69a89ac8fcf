//! Plain-text experiment configs.
//!
//! Format: UTF-8 lines, `[section]` headers, `key = value` pairs, `#` or `;`
//! comments. Every key has a default, so an empty (or absent) file is a
//! valid quickstart config. Command-line `--set section.key=value` overrides
//! are applied after the file. Sidecars record the canonical rendering of
//! the merged result; the config fingerprint hashes the subset of settings
//! that influence results, so two invocations agree on their fingerprint
//! exactly when their runs are comparable.

use cdec::ops::LossKind;
use cdec::parallel::ExecMode;
use cdec::report::sha256_hex;
use cdec::trainer::TrainConfig;
use cdec::{CdecError, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

/// Allowed keys per section; parse rejects anything else so typos surface
/// as config errors instead of silently applied defaults.
const SCHEMA: &[(&str, &[&str])] = &[
    (
        "dataset",
        &[
            "source",
            "side",
            "n",
            "sparsity",
            "train",
            "test",
            "path",
            "downsample",
        ],
    ),
    ("sensing", &["m_ratio", "noise_std", "seed"]),
    (
        "model",
        &["layers", "continuation_steps", "n_multiplier", "loss", "mu"],
    ),
    (
        "train",
        &[
            "batch_size",
            "learning_rate",
            "max_epochs",
            "patience",
            "seeds",
        ],
    ),
    ("output", &["dir"]),
];

fn known_section(name: &str) -> bool {
    SCHEMA.iter().any(|(s, _)| *s == name)
}

fn known_key(section: &str, key: &str) -> bool {
    SCHEMA
        .iter()
        .find(|(s, _)| *s == section)
        .is_some_and(|(_, keys)| keys.contains(&key))
}

/// Raw key-value view of a config file plus overrides, before typing.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<(String, String), String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut out = RawConfig::default();
        let mut section = String::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    CdecError::invalid(format!("line {lineno}: unterminated section header"))
                })?;
                if !known_section(name) {
                    return Err(CdecError::invalid(format!(
                        "line {lineno}: unknown section [{name}]"
                    )));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CdecError::invalid(format!("line {lineno}: expected key = value, got '{line}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(CdecError::invalid(format!(
                    "line {lineno}: key '{key}' appears before any [section] header"
                )));
            }
            if !known_key(&section, key) {
                return Err(CdecError::invalid(format!(
                    "line {lineno}: unknown key '{key}' in [{section}]"
                )));
            }
            out.values
                .insert((section.clone(), key.to_string()), value.to_string());
        }
        Ok(out)
    }

    /// Apply one `section.key=value` override.
    pub fn set(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            CdecError::invalid(format!("--set expects section.key=value, got '{spec}'"))
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            CdecError::invalid(format!("--set expects section.key=value, got '{spec}'"))
        })?;
        if !known_key(section, key) {
            return Err(CdecError::invalid(format!(
                "--set: unknown key '{section}.{key}'"
            )));
        }
        self.values.insert(
            (section.to_string(), key.to_string()),
            value.trim().to_string(),
        );
        Ok(())
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Blobs,
    Sparse,
    Idx,
    Png,
    Cache,
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Blobs => "blobs",
            DataSource::Sparse => "sparse",
            DataSource::Idx => "idx",
            DataSource::Png => "png",
            DataSource::Cache => "cache",
        }
    }

    /// File-backed sources need a resolvable path at parse time.
    pub fn needs_path(self) -> bool {
        matches!(self, DataSource::Idx | DataSource::Png | DataSource::Cache)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Blob image side length; the signal dimension becomes side^2.
    pub side: usize,
    /// Signal dimension for sparse and cache sources.
    pub n: usize,
    pub sparsity: usize,
    pub train: usize,
    pub test: usize,
    pub path: Option<PathBuf>,
    pub downsample: usize,
}

#[derive(Debug, Clone)]
pub struct SensingSpec {
    pub m_ratio: f64,
    pub noise_std: f64,
    /// Root seed; every random consumer derives its own stream from it.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub layers: usize,
    pub continuation_steps: usize,
    /// Analysis operator rows as a multiple of the signal dimension.
    pub n_multiplier: usize,
    pub loss: LossKind,
    pub mu: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub sensing: SensingSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub output_dir: PathBuf,
    /// Canonical rendering of the merged settings (sidecar payload).
    pub resolved: String,
}

fn parse_field<T: std::str::FromStr>(
    raw: &RawConfig,
    section: &str,
    key: &str,
    default: T,
) -> Result<T> {
    match raw.get(section, key) {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| {
            CdecError::invalid(format!(
                "[{section}] {key}: cannot parse '{s}' as {}",
                std::any::type_name::<T>()
            ))
        }),
    }
}

fn parse_seeds(raw: &RawConfig) -> Result<Vec<u64>> {
    let text = raw.get("train", "seeds").unwrap_or("0");
    let mut seeds = Vec::new();
    for piece in text.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        seeds.push(piece.parse().map_err(|_| {
            CdecError::invalid(format!(
                "[train] seeds: '{piece}' is not an unsigned integer"
            ))
        })?);
    }
    if seeds.is_empty() {
        return Err(CdecError::invalid("[train] seeds: list is empty"));
    }
    Ok(seeds)
}

impl ExperimentConfig {
    /// Merge file text (may be empty) and overrides, validate, and freeze
    /// the canonical rendering.
    pub fn resolve(file_text: &str, sets: &[String]) -> Result<ExperimentConfig> {
        let mut raw = RawConfig::parse(file_text)?;
        for s in sets {
            raw.set(s)?;
        }
        let source = match raw.get("dataset", "source").unwrap_or("blobs") {
            "blobs" => DataSource::Blobs,
            "sparse" => DataSource::Sparse,
            "idx" => DataSource::Idx,
            "png" => DataSource::Png,
            "cache" => DataSource::Cache,
            other => {
                return Err(CdecError::invalid(format!(
                    "[dataset] source: unknown source '{other}' (expected blobs, sparse, idx, png, or cache)"
                )))
            }
        };
        let dataset = DatasetSpec {
            source,
            side: parse_field(&raw, "dataset", "side", 8)?,
            n: parse_field(&raw, "dataset", "n", 64)?,
            sparsity: parse_field(&raw, "dataset", "sparsity", 4)?,
            train: parse_field(&raw, "dataset", "train", 200)?,
            test: parse_field(&raw, "dataset", "test", 50)?,
            path: raw.get("dataset", "path").map(PathBuf::from),
            downsample: parse_field(&raw, "dataset", "downsample", 1)?,
        };
        let sensing = SensingSpec {
            m_ratio: parse_field(&raw, "sensing", "m_ratio", 0.25)?,
            noise_std: parse_field(&raw, "sensing", "noise_std", 1e-4)?,
            seed: parse_field(&raw, "sensing", "seed", 0)?,
        };
        let loss: LossKind = raw
            .get("model", "loss")
            .unwrap_or("log-cosh")
            .parse()
            .map_err(|e| CdecError::invalid(format!("[model] loss: {e}")))?;
        let model = ModelSpec {
            layers: parse_field(&raw, "model", "layers", 5)?,
            continuation_steps: parse_field(&raw, "model", "continuation_steps", 1)?,
            n_multiplier: parse_field(&raw, "model", "n_multiplier", 10)?,
            loss,
            mu: parse_field(&raw, "model", "mu", 3.0)?,
        };
        let train = TrainSpec {
            batch_size: parse_field(&raw, "train", "batch_size", 32)?,
            learning_rate: parse_field(&raw, "train", "learning_rate", 1e-3)?,
            max_epochs: parse_field(&raw, "train", "max_epochs", 3)?,
            patience: parse_field(&raw, "train", "patience", 0)?,
            seeds: parse_seeds(&raw)?,
        };
        let output_dir = raw
            .get("output", "dir")
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("CDEC_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));

        let cfg = ExperimentConfig {
            resolved: render(&dataset, &sensing, &model, &train, &output_dir),
            dataset,
            sensing,
            model,
            train,
            output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.side == 0 || d.n == 0 || d.downsample == 0 {
            return Err(CdecError::invalid(
                "[dataset] side, n, and downsample must all be positive",
            ));
        }
        if d.train == 0 || d.test == 0 {
            return Err(CdecError::invalid(
                "[dataset] train and test split sizes must be positive",
            ));
        }
        if d.source == DataSource::Sparse && d.sparsity == 0 {
            return Err(CdecError::invalid("[dataset] sparsity must be positive"));
        }
        if d.source.needs_path() {
            let path = d.path.as_ref().ok_or_else(|| {
                CdecError::invalid(format!(
                    "[dataset] path is required for source = {}",
                    d.source.name()
                ))
            })?;
            if !path.exists() {
                return Err(CdecError::invalid(format!(
                    "[dataset] path: '{}' does not exist",
                    path.display()
                )));
            }
        }
        if !(self.sensing.m_ratio > 0.0 && self.sensing.m_ratio < 1.0) {
            return Err(CdecError::invalid(format!(
                "[sensing] m_ratio must lie strictly between 0 and 1, got {}",
                self.sensing.m_ratio
            )));
        }
        if !(self.sensing.noise_std >= 0.0 && self.sensing.noise_std.is_finite()) {
            return Err(CdecError::invalid(
                "[sensing] noise_std must be finite and nonnegative",
            ));
        }
        if self.model.layers == 0 || self.model.continuation_steps == 0 {
            return Err(CdecError::invalid(
                "[model] layers and continuation_steps must be positive",
            ));
        }
        if self.model.n_multiplier < 2 {
            return Err(CdecError::invalid(
                "[model] n_multiplier must be at least 2 (the analysis operator is redundant)",
            ));
        }
        if !(self.model.mu > 0.0 && self.model.mu.is_finite()) {
            return Err(CdecError::invalid("[model] mu must be finite and positive"));
        }
        Ok(())
    }

    /// Measurement count implied by the ratio for signal dimension `n`.
    pub fn measurements(&self, n: usize) -> usize {
        ((self.sensing.m_ratio * n as f64).round() as usize).max(1)
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            max_epochs: self.train.max_epochs,
            early_stop_patience: self.train.patience,
            loss: self.model.loss,
            j_steps: self.model.continuation_steps,
            l_layers: self.model.layers,
            seeds: self.train.seeds.clone(),
            exec: ExecMode::Parallel,
        }
    }

    /// SHA-256 over the settings that influence results. The output
    /// directory and the seed list are excluded: each record carries its
    /// own seed, and runs of one cell spread over several directories or
    /// seed batches must still average together in compare.
    pub fn fingerprint(&self) -> String {
        let d = &self.dataset;
        let mut p = String::new();
        let _ = write!(
            p,
            "dataset:{}:{}:{}:{}:{}:{}:{};",
            d.source.name(),
            d.side,
            d.n,
            d.sparsity,
            d.train,
            d.test,
            d.downsample
        );
        if let Some(path) = &d.path {
            let _ = write!(p, "path:{};", path.display());
        }
        let _ = write!(
            p,
            "sensing:{}:{}:{};",
            self.sensing.m_ratio, self.sensing.noise_std, self.sensing.seed
        );
        let _ = write!(
            p,
            "model:{}:{}:{}:{}:{};",
            self.model.layers,
            self.model.continuation_steps,
            self.model.n_multiplier,
            self.model.loss,
            self.model.mu
        );
        let _ = write!(
            p,
            "train:{}:{}:{}:{}",
            self.train.batch_size,
            self.train.learning_rate,
            self.train.max_epochs,
            self.train.patience
        );
        sha256_hex(p.as_bytes())
    }
}

fn render(
    d: &DatasetSpec,
    s: &SensingSpec,
    m: &ModelSpec,
    t: &TrainSpec,
    out: &std::path::Path,
) -> String {
    let mut r = String::new();
    let _ = writeln!(r, "[dataset]");
    let _ = writeln!(r, "source = {}", d.source.name());
    let _ = writeln!(r, "side = {}", d.side);
    let _ = writeln!(r, "n = {}", d.n);
    let _ = writeln!(r, "sparsity = {}", d.sparsity);
    let _ = writeln!(r, "train = {}", d.train);
    let _ = writeln!(r, "test = {}", d.test);
    if let Some(p) = &d.path {
        let _ = writeln!(r, "path = {}", p.display());
    }
    let _ = writeln!(r, "downsample = {}", d.downsample);
    let _ = writeln!(r, "[sensing]");
    let _ = writeln!(r, "m_ratio = {}", s.m_ratio);
    let _ = writeln!(r, "noise_std = {}", s.noise_std);
    let _ = writeln!(r, "seed = {}", s.seed);
    let _ = writeln!(r, "[model]");
    let _ = writeln!(r, "layers = {}", m.layers);
    let _ = writeln!(r, "continuation_steps = {}", m.continuation_steps);
    let _ = writeln!(r, "n_multiplier = {}", m.n_multiplier);
    let _ = writeln!(r, "loss = {}", m.loss);
    let _ = writeln!(r, "mu = {}", m.mu);
    let _ = writeln!(r, "[train]");
    let _ = writeln!(r, "batch_size = {}", t.batch_size);
    let _ = writeln!(r, "learning_rate = {}", t.learning_rate);
    let _ = writeln!(r, "max_epochs = {}", t.max_epochs);
    let _ = writeln!(r, "patience = {}", t.patience);
    let seeds: Vec<String> = t.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(r, "seeds = {}", seeds.join(","));
    let _ = writeln!(r, "[output]");
    let _ = writeln!(r, "dir = {}", out.display());
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_without_any_input() {
        let cfg = ExperimentConfig::resolve("", &[]).unwrap();
        assert_eq!(cfg.dataset.source, DataSource::Blobs);
        assert_eq!(cfg.model.layers, 5);
        assert_eq!(cfg.train.seeds, vec![0]);
        assert!(cfg.resolved.contains("m_ratio = 0.25"));
    }

    #[test]
    fn file_values_and_overrides_apply_in_order() {
        let text = "[model]\nlayers = 7\nmu = 1.5\n";
        let cfg =
            ExperimentConfig::resolve(text, &["model.layers=9".into(), "train.seeds=3,4".into()])
                .unwrap();
        assert_eq!(cfg.model.layers, 9);
        assert_eq!(cfg.model.mu, 1.5);
        assert_eq!(cfg.train.seeds, vec![3, 4]);
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let err = RawConfig::parse("[model]\nlayers 7\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = RawConfig::parse("[nope]\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = RawConfig::parse("[model]\nlayer = 7\n").unwrap_err();
        assert!(err.to_string().contains("unknown key 'layer'"), "{err}");
    }

    #[test]
    fn keys_before_a_section_are_rejected() {
        let err = RawConfig::parse("layers = 7\n").unwrap_err();
        assert!(err.to_string().contains("before any [section]"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# top\n\n[model]\n; note\nlayers = 2\n";
        let cfg = ExperimentConfig::resolve(text, &[]).unwrap();
        assert_eq!(cfg.model.layers, 2);
    }

    #[test]
    fn m_ratio_bounds_are_enforced() {
        for bad in ["1.0", "0", "-0.5", "1.5"] {
            let err =
                ExperimentConfig::resolve("", &[format!("sensing.m_ratio={bad}")]).unwrap_err();
            assert!(err.to_string().contains("m_ratio"), "{err}");
        }
    }

    #[test]
    fn missing_dataset_path_is_a_parse_time_error() {
        let text = "[dataset]\nsource = idx\npath = /nonexistent/file.idx\n";
        let err = ExperimentConfig::resolve(text, &[]).unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");
        let text = "[dataset]\nsource = png\n";
        let err = ExperimentConfig::resolve(text, &[]).unwrap_err();
        assert!(err.to_string().contains("path is required"), "{err}");
    }

    #[test]
    fn fingerprint_tracks_resolved_settings() {
        let a = ExperimentConfig::resolve("", &[]).unwrap();
        let b = ExperimentConfig::resolve("[model]\nlayers = 5\n", &[]).unwrap();
        let c = ExperimentConfig::resolve("", &["model.layers=6".into()]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        for section in ["dataset.train=9", "sensing.seed=7", "train.batch_size=4"] {
            let d = ExperimentConfig::resolve("", &[section.into()]).unwrap();
            assert_ne!(a.fingerprint(), d.fingerprint(), "{section}");
        }
    }

    #[test]
    fn fingerprint_ignores_output_dir_and_seed_list() {
        let a = ExperimentConfig::resolve("", &[]).unwrap();
        let b = ExperimentConfig::resolve("", &["output.dir=elsewhere".into()]).unwrap();
        let c = ExperimentConfig::resolve("", &["train.seeds=5,6".into()]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), c.fingerprint());
        assert_ne!(a.resolved, b.resolved);
    }

    #[test]
    fn malformed_set_specs_are_rejected() {
        let mut raw = RawConfig::default();
        assert!(raw.set("model.layers").is_err());
        assert!(raw.set("layers=3").is_err());
        assert!(raw.set("model.bogus=3").is_err());
    }
}
