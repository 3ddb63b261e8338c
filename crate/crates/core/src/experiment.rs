//! Experiment configuration, run directories, and the inspect/compare tools.
//!
//! Layout written by [`run_experiment`]:
//!
//! ```text
//! <out>/config.json                resolved experiment config
//! <out>/results.json               all runs: {config, matrices, metrics}
//! <out>/report.csv, summary.md
//! <out>/<variant>-seed<seed>/
//!     config.json                  resolved per-run config
//!     results.json                 {config, matrices, metrics}
//!     report.csv
//!     train_report.json            per-task training statistics (timings vary)
//!     gates/task_NNN.tssg          score-training variants only
//!     heads/task_NNN.tssh
//!     importance.tssi              soft-masking variants only
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Result, TssError};
use crate::eval::{self, SummaryRow, VariantResult};
use crate::gating::{self, PackedGates};
use crate::masking::ImportanceMap;
use crate::model::ModelConfig;
use crate::taskgen::{make_stream, StreamKind, TaskDims};
use crate::trainer::{run_sequence, SequenceRun, TrainConfig, TrainReport, Variant};

pub const HEAD_MAGIC: &[u8; 4] = b"TSSH";

/// Environment variable capping how many runs execute at once.
pub const THREADS_ENV: &str = "TSS_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub n_tasks: usize,
    pub dims: TaskDims,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            kind: StreamKind::Heterogeneous,
            n_tasks: 10,
            dims: TaskDims::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            variants: Variant::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            out: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stream.n_tasks < 2 {
            return Err(TssError::Config(format!(
                "stream.n_tasks must be at least 2, got {}",
                self.stream.n_tasks
            )));
        }
        self.stream.dims.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.input_dim != self.stream.dims.input_dim {
            return Err(TssError::Config(format!(
                "model.input_dim ({}) must equal stream.dims.input_dim ({})",
                self.model.input_dim, self.stream.dims.input_dim
            )));
        }
        if self.variants.is_empty() {
            return Err(TssError::Config("variants must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(TssError::Config("seeds must not be empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.variants {
            if !seen.insert(v) {
                return Err(TssError::Config(format!("variant {v} listed twice")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return Err(TssError::Config(format!("seed {s} listed twice")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| TssError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TssError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| TssError::Config(format!("{}: {e}", path.display())))
    }

    pub fn run_config(&self, variant: Variant, seed: u64) -> RunConfig {
        RunConfig {
            variant,
            seed,
            stream: self.stream.clone(),
            model: self.model,
            train: self.train.clone(),
        }
    }

    pub fn run_dir(&self, variant: Variant, seed: u64) -> PathBuf {
        self.out.join(format!("{}-seed{seed}", variant.name()))
    }
}

/// Everything that determines one (variant, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub forgetting_rate_accuracy: f64,
    pub forgetting_rate_macro_f1: f64,
    pub final_mean_accuracy: f64,
    pub final_mean_macro_f1: f64,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub stream_order: Vec<usize>,
    pub logit_digests: Vec<Vec<String>>,
}

/// Contents of a run directory's `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub config: RunConfig,
    pub matrices: Vec<VariantResult>,
    pub metrics: RunMetrics,
}

impl RunResults {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("results.json");
        let text = std::fs::read_to_string(&path).map_err(|e| TssError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| TssError::Corrupt {
            path,
            reason: e.to_string(),
        })
    }

    pub fn primary(&self) -> &VariantResult {
        &self.matrices[0]
    }
}

fn variant_result(config: &RunConfig, run: &SequenceRun) -> VariantResult {
    VariantResult {
        variant: config.variant.name().to_string(),
        stream_kind: config.stream.kind.to_string(),
        seed: config.seed,
        primary: run.accuracy.clone(),
        secondary: vec![run.macro_f1.clone()],
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| TssError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| TssError::io(path, e))
}

/// Runs one (variant, seed) pair and writes its directory.
pub fn run_one(config: &RunConfig, dir: &Path) -> Result<(RunResults, Vec<TrainReport>)> {
    let stream = make_stream(
        config.stream.kind,
        config.stream.n_tasks,
        config.seed,
        &config.stream.dims,
    )?;
    let run = run_sequence(
        &stream,
        config.variant,
        config.model,
        &config.train,
        config.seed,
    )?;
    let results = RunResults {
        config: config.clone(),
        matrices: vec![variant_result(config, &run)],
        metrics: RunMetrics {
            forgetting_rate_accuracy: eval::forgetting_rate(&run.accuracy)?,
            forgetting_rate_macro_f1: eval::forgetting_rate(&run.macro_f1)?,
            final_mean_accuracy: run.accuracy.final_mean(),
            final_mean_macro_f1: run.macro_f1.final_mean(),
            frozen_digest_before: run.frozen_digest_before.clone(),
            frozen_digest_after: run.frozen_digest_after.clone(),
            stream_order: stream.order.clone(),
            logit_digests: run.logit_digests.clone(),
        },
    };
    write_run_dir(dir, &results, &run)?;
    Ok((results, run.reports))
}

fn write_run_dir(dir: &Path, results: &RunResults, run: &SequenceRun) -> Result<()> {
    create_dir(dir)?;
    write_file(
        &dir.join("config.json"),
        &serde_json::to_vec_pretty(&results.config)?,
    )?;
    write_file(
        &dir.join("results.json"),
        &serde_json::to_vec_pretty(results)?,
    )?;
    write_file(
        &dir.join("report.csv"),
        eval::render_csv(&results.matrices)?.as_bytes(),
    )?;
    write_file(
        &dir.join("train_report.json"),
        &serde_json::to_vec_pretty(&run.reports)?,
    )?;

    let heads_dir = dir.join("heads");
    create_dir(&heads_dir)?;
    for (t, head) in run.heads.iter().enumerate() {
        let bias = crate::tensor::Matrix::row_vector(&head.bias);
        let bytes = codec::encode_floats(HEAD_MAGIC, t as u32, &[head.weight.clone(), bias])?;
        write_file(&heads_dir.join(format!("task_{t:03}.tssh")), &bytes)?;
    }
    if run.gates.iter().any(Option::is_some) {
        let gates_dir = dir.join("gates");
        create_dir(&gates_dir)?;
        for (t, packed) in run.gates.iter().enumerate() {
            if let Some(p) = packed {
                p.write(&gates_dir.join(format!("task_{t:03}.tssg")))?;
            }
        }
    }
    if let Some(imp) = &run.importance {
        let last = run.heads.len().saturating_sub(1) as u32;
        imp.write(&dir.join("importance.tssi"), last)?;
    }
    Ok(())
}

fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub run_dirs: Vec<PathBuf>,
    pub runs: Vec<RunResults>,
    pub summary: Vec<SummaryRow>,
}

/// The config as embedded in the combined `results.json`: the output path
/// is dropped so reruns into other directories stay byte-identical.
fn config_without_out(config: &ExperimentConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(config)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("out");
    }
    Ok(v)
}

/// Runs every (variant, seed) pair, in parallel up to `TSS_THREADS`, and
/// writes all artifacts under `config.out`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    create_dir(&config.out)?;
    write_file(
        &config.out.join("config.json"),
        &serde_json::to_vec_pretty(config)?,
    )?;

    let jobs: Vec<(Variant, u64)> = config
        .variants
        .iter()
        .flat_map(|&v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| TssError::Config(format!("thread pool: {e}")))?;
    let outputs: Vec<Result<RunResults>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(v, s)| run_one(&config.run_config(v, s), &config.run_dir(v, s)).map(|r| r.0))
            .collect()
    });
    let runs = outputs.into_iter().collect::<Result<Vec<_>>>()?;

    let results: Vec<VariantResult> = runs.iter().map(|r| r.primary().clone()).collect();
    eval::emit_report(&config_without_out(config)?, &results, &config.out)?;
    Ok(ExperimentOutcome {
        run_dirs: jobs.iter().map(|&(v, s)| config.run_dir(v, s)).collect(),
        summary: eval::summarize(&results)?,
        runs,
    })
}

/// Ten equal-width bins over `[0, 1)`; values outside are clamped into the
/// first or last bin.
pub fn histogram(values: impl Iterator<Item = f64>) -> [usize; 10] {
    let mut bins = [0usize; 10];
    for v in values {
        let b = (v * 10.0).floor();
        let idx = if b.is_nan() || b < 0.0 {
            0
        } else {
            (b as usize).min(9)
        };
        bins[idx] += 1;
    }
    bins
}

fn collect_artifacts(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| TssError::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| TssError::io(path, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_artifacts(&p, out)?;
        } else if matches!(
            p.extension().and_then(|e| e.to_str()),
            Some("tssg" | "tssi" | "tssh")
        ) {
            out.push(p);
        }
    }
    Ok(())
}

fn inspect_file(path: &Path, base: &Path, out: &mut String) -> Result<()> {
    let shown = path
        .strip_prefix(base)
        .unwrap_or(path)
        .display()
        .to_string();
    let shown = if shown.is_empty() {
        path.display().to_string()
    } else {
        shown
    };
    let bytes = std::fs::read(path).map_err(|e| TssError::io(path, e))?;
    let corrupt = |e: TssError| TssError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("tssg") => {
            let packed = PackedGates::from_bytes(&bytes).map_err(corrupt)?;
            let gates = gating::unpack(&packed).map_err(corrupt)?;
            let _ = writeln!(
                out,
                "{shown}: gates for task {}, {} tensors, {} gates in {} bytes, CRC OK",
                packed.task_id,
                packed.shapes.len(),
                packed.total_gates(),
                bytes.len()
            );
            for (i, g) in gates.tensors.iter().enumerate() {
                let frac = g.count_nonzero() as f64 / g.len().max(1) as f64;
                let _ = writeln!(
                    out,
                    "  tensor {i}: {}x{}, ones-fraction {frac:.4}",
                    g.rows(),
                    g.cols()
                );
            }
        }
        Some("tssi") => {
            let (task, imp) = ImportanceMap::from_bytes(&bytes).map_err(corrupt)?;
            let _ = writeln!(
                out,
                "{shown}: accumulated importance through task {task}, {} tensors, CRC OK",
                imp.tensors.len()
            );
            for (i, t) in imp.tensors.iter().enumerate() {
                let bins = histogram(t.data().iter().copied());
                let (mean, _) = if t.is_empty() {
                    (0.0, 0.0)
                } else {
                    crate::tensor::stats(t)
                };
                let _ = writeln!(
                    out,
                    "  tensor {i}: {}x{}, mean {mean:.4}, histogram {bins:?}",
                    t.rows(),
                    t.cols()
                );
            }
        }
        _ => {
            let (task, tensors) = codec::decode_floats(HEAD_MAGIC, &bytes).map_err(corrupt)?;
            let shapes: Vec<String> = tensors
                .iter()
                .map(|t| format!("{}x{}", t.rows(), t.cols()))
                .collect();
            let _ = writeln!(
                out,
                "{shown}: head for task {task}, tensors [{}], CRC OK",
                shapes.join(", ")
            );
        }
    }
    Ok(())
}

/// Human-readable summary of every gate, importance and head file at `path`
/// (a file or a directory searched recursively). Fails on the first corrupt
/// file, naming it.
pub fn inspect(path: &Path) -> Result<String> {
    let mut files = Vec::new();
    let base = if path.is_dir() {
        collect_artifacts(path, &mut files)?;
        path
    } else {
        files.push(path.to_path_buf());
        path.parent().unwrap_or(path)
    };
    if files.is_empty() {
        return Err(TssError::Invalid(format!(
            "no .tssg/.tssi/.tssh files under {}",
            path.display()
        )));
    }
    let mut out = String::new();
    for f in &files {
        inspect_file(f, base, &mut out)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<SummaryRow>,
    pub markdown: String,
}

/// Cross-variant table over run directories that share one stream
/// configuration.
pub fn compare(run_dirs: &[PathBuf]) -> Result<Comparison> {
    if run_dirs.len() < 2 {
        return Err(TssError::Invalid(
            "compare needs at least two run directories".into(),
        ));
    }
    let runs = run_dirs
        .iter()
        .map(|d| RunResults::load(d))
        .collect::<Result<Vec<_>>>()?;
    let reference = &runs[0].config.stream;
    for (dir, r) in run_dirs.iter().zip(&runs) {
        if &r.config.stream != reference {
            return Err(TssError::Config(format!(
                "{} was run on a different stream configuration than {}",
                dir.display(),
                run_dirs[0].display()
            )));
        }
    }
    let results: Vec<VariantResult> = runs.iter().map(|r| r.primary().clone()).collect();
    let rows = eval::summarize(&results)?;
    let title = format!(
        "Comparison on {} stream ({} tasks)",
        reference.kind, reference.n_tasks
    );
    let markdown = eval::render_summary(&rows, &results[0].primary.metric, &title);
    Ok(Comparison { rows, markdown })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins() {
        let h = histogram([0.0, 0.05, 0.1, 0.95, 0.999, 1.0, -0.1].into_iter());
        assert_eq!(h.iter().sum::<usize>(), 7);
        assert_eq!(h[0], 3);
        assert_eq!(h[1], 1);
        assert_eq!(h[9], 3);
    }

    #[test]
    fn config_json_diagnostics() {
        let err = ExperimentConfig::from_json("{\n  \"stream\": {\"n_taks\": 3}\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("n_taks") && msg.contains("line 2"), "{msg}");
        let cfg = ExperimentConfig::from_json("{\"seeds\": [4]}").unwrap();
        assert_eq!(cfg.seeds, vec![4]);
        assert_eq!(cfg.variants.len(), 6);
    }

    #[test]
    fn validation_catches_mismatches() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.model.input_dim = 7;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("input_dim"));
        let cfg = ExperimentConfig {
            seeds: vec![1, 1],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
