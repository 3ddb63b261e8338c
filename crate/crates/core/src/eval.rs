//! Metrics over continual-learning runs and report rendering.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TssError};

/// Lower-triangular performance matrix: `values[i][j]` is the score on task
/// `j`'s test split measured right after training task `i` (`j <= i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub metric: String,
    /// Fingerprint of the task stream the matrix was measured on.
    pub stream: String,
    pub values: Vec<Vec<f64>>,
}

impl ResultMatrix {
    pub fn new(metric: impl Into<String>, stream: impl Into<String>) -> Self {
        Self {
            metric: metric.into(),
            stream: stream.into(),
            values: Vec::new(),
        }
    }

    /// Appends the row for the next trained task; it must hold one entry per
    /// task trained so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.values.len() + 1 {
            return Err(TssError::Shape(format!(
                "row {} must have {} entries, got {}",
                self.values.len(),
                self.values.len() + 1,
                row.len()
            )));
        }
        self.values.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_tasks()).map(|i| self.values[i][i]).collect()
    }

    /// Scores on every task after the last one was trained.
    pub fn final_row(&self) -> &[f64] {
        self.values.last().map_or(&[], |r| r.as_slice())
    }

    pub fn final_mean(&self) -> f64 {
        mean(self.final_row())
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

fn check_predictions(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(TssError::Invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(TssError::Invalid("metrics need at least one sample".into()));
    }
    if let Some(&bad) = labels.iter().chain(preds).find(|&&c| c >= n_classes) {
        return Err(TssError::Invalid(format!(
            "class {bad} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || labels.is_empty() {
        return Err(TssError::Invalid(format!(
            "accuracy over {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1. Classes absent from both predictions and
/// labels contribute 0 and still count in the denominator.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    check_predictions(preds, labels, n_classes)?;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let total: f64 = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / n_classes as f64)
}

/// Per-task drop `A[i][i] − A[T][i]` for every task but the last.
pub fn forgetting_contributions(a: &ResultMatrix) -> Result<Vec<f64>> {
    let t = a.n_tasks();
    if t < 2 {
        return Err(TssError::Invalid(format!(
            "forgetting rate needs at least 2 tasks, got {t}"
        )));
    }
    let last = &a.values[t - 1];
    Ok((0..t - 1).map(|i| a.values[i][i] - last[i]).collect())
}

/// `1/(T−1) · Σ_{i<T} (A[i][i] − A[T][i])`, over every task but the last.
/// Negative values mean backward transfer.
pub fn forgetting_rate(a: &ResultMatrix) -> Result<f64> {
    Ok(mean(&forgetting_contributions(a)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferDelta {
    pub per_task: Vec<f64>,
    pub mean: f64,
}

/// `Δ_k = method A[T][k] − ONE A[k][k]`.
pub fn transfer_delta(method: &ResultMatrix, one: &ResultMatrix) -> Result<TransferDelta> {
    if method.stream != one.stream || method.n_tasks() != one.n_tasks() {
        return Err(TssError::Invalid(format!(
            "transfer delta needs results on the same stream ({} tasks on {} vs {} tasks on {})",
            method.n_tasks(),
            method.stream,
            one.n_tasks(),
            one.stream
        )));
    }
    if method.metric != one.metric {
        return Err(TssError::Invalid(format!(
            "metric mismatch: {} vs {}",
            method.metric, one.metric
        )));
    }
    let per_task: Vec<f64> = method
        .final_row()
        .iter()
        .zip(one.diagonal())
        .map(|(m, o)| m - o)
        .collect();
    Ok(TransferDelta {
        mean: mean(&per_task),
        per_task,
    })
}

/// One (variant, seed) run as it appears in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub stream_kind: String,
    pub seed: u64,
    /// Primary metric matrix.
    pub primary: ResultMatrix,
    /// Additional matrices, e.g. macro-F1.
    #[serde(default)]
    pub secondary: Vec<ResultMatrix>,
}

pub const CSV_COLUMNS: [&str; 8] = [
    "variant",
    "stream_kind",
    "seed",
    "task_id",
    "metric_name",
    "value",
    "forgetting_rate",
    "transfer_delta",
];

fn one_baseline<'a>(results: &'a [VariantResult], r: &VariantResult) -> Option<&'a VariantResult> {
    results
        .iter()
        .find(|o| o.variant == "one" && o.seed == r.seed && o.primary.stream == r.primary.stream)
}

/// CSV with the fixed [`CSV_COLUMNS`]; one row per (variant, seed, task)
/// holding the final primary metric. Forgetting rate is blank for
/// single-task runs, transfer delta is blank without a matching ONE run.
pub fn render_csv(results: &[VariantResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| TssError::Format(format!("csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(err)?;
    for r in results {
        let fr = forgetting_rate(&r.primary).ok();
        let delta = match one_baseline(results, r) {
            Some(one) => Some(transfer_delta(&r.primary, &one.primary)?),
            None => None,
        };
        for (k, v) in r.primary.final_row().iter().enumerate() {
            w.write_record([
                r.variant.clone(),
                r.stream_kind.clone(),
                r.seed.to_string(),
                k.to_string(),
                r.primary.metric.clone(),
                v.to_string(),
                fr.map(|f| f.to_string()).unwrap_or_default(),
                delta
                    .as_ref()
                    .map(|d| d.per_task[k].to_string())
                    .unwrap_or_default(),
            ])
            .map_err(err)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| TssError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| TssError::Format(e.to_string()))
}

/// Aggregate row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub final_mean: f64,
    pub final_std: f64,
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
    pub transfer_mean: Option<f64>,
    pub transfer_std: Option<f64>,
}

/// Mean ± population std over seeds for each variant, in first-seen order.
pub fn summarize(results: &[VariantResult]) -> Result<Vec<SummaryRow>> {
    let mut variants: Vec<&str> = Vec::new();
    for r in results {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    variants
        .into_iter()
        .map(|v| {
            let runs: Vec<&VariantResult> = results.iter().filter(|r| r.variant == v).collect();
            let finals: Vec<f64> = runs.iter().map(|r| r.primary.final_mean()).collect();
            let frs: Vec<f64> = runs
                .iter()
                .filter_map(|r| forgetting_rate(&r.primary).ok())
                .collect();
            let mut deltas = Vec::new();
            for r in &runs {
                if let Some(one) = one_baseline(results, r) {
                    deltas.push(transfer_delta(&r.primary, &one.primary)?.mean);
                }
            }
            let complete = |xs: &[f64]| xs.len() == runs.len() && !xs.is_empty();
            Ok(SummaryRow {
                variant: v.to_string(),
                seeds: runs.iter().map(|r| r.seed).collect(),
                final_mean: mean(&finals),
                final_std: std_dev(&finals),
                forgetting_mean: complete(&frs).then(|| mean(&frs)),
                forgetting_std: complete(&frs).then(|| std_dev(&frs)),
                transfer_mean: complete(&deltas).then(|| mean(&deltas)),
                transfer_std: complete(&deltas).then(|| std_dev(&deltas)),
            })
        })
        .collect()
}

fn pm(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        _ => "n/a".into(),
    }
}

/// Markdown table in the usual continual-learning layout (values in %).
pub fn render_summary(rows: &[SummaryRow], metric: &str, title: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {title}\n");
    let _ = writeln!(
        out,
        "| Variant | Seeds | Final {metric} | Forgetting rate | Transfer Δ vs ONE |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.variant,
            r.seeds.len(),
            pm(Some(r.final_mean), Some(r.final_std)),
            pm(r.forgetting_mean, r.forgetting_std),
            pm(r.transfer_mean, r.transfer_std),
        );
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CombinedResults<C> {
    pub config: C,
    pub matrices: Vec<VariantResult>,
    pub metrics: Vec<SummaryRow>,
}

/// Writes `results.json`, `report.csv` and `summary.md` into `dir`.
pub fn emit_report<C: Serialize>(config: &C, results: &[VariantResult], dir: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(TssError::Invalid("no results to report".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| TssError::io(dir, e))?;
    let metrics = summarize(results)?;
    let combined = CombinedResults {
        config,
        matrices: results.to_vec(),
        metrics: metrics.clone(),
    };
    let write = |name: &str, body: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| TssError::io(p, e))
    };
    write("results.json", &serde_json::to_vec_pretty(&combined)?)?;
    write("report.csv", render_csv(results)?.as_bytes())?;
    let title = format!("Results on {} stream", results[0].stream_kind);
    write(
        "summary.md",
        render_summary(&metrics, &results[0].primary.metric, &title).as_bytes(),
    )?;
    Ok(())
}
