//! Per-task training and whole-sequence orchestration for every method
//! variant.
//!
//! One task goes through two phases:
//!
//! 1. sub-network discovery: scores are thresholded into gates on every
//!    step, the straight-through gradient is attenuated by `1 − I` (the
//!    importance accumulated over earlier tasks) and fed to Adam;
//! 2. importance: the training data is passed through once more, and the
//!    resulting importance is normalized and folded into the accumulation.
//!
//! Variants switch these pieces on and off; see [`Variant`].

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TssError};
use crate::eval::{self, ResultMatrix};
use crate::gating::{self, GateSet, PackedGates};
use crate::masking::{self, ImportanceMap, ImportanceTarget};
use crate::model::{self, GatedModel, Head, ModelConfig, ScoreSet};
use crate::taskgen::{Dataset, TaskData, TaskStream};
use crate::tensor::{Matrix, Rng};

/// Method variants.
///
/// | variant | gates | score init | soft-mask | trains adapters |
/// |---|---|---|---|---|
/// | `Tss` | yes | carry over | scores | no |
/// | `TssWoSd` | no | – | adapter weights | yes, shared |
/// | `TssWoSm` | yes | fresh Kaiming | no | no |
/// | `TssWoSmNaive` | yes | carry over | no | no |
/// | `One` | yes | fresh Kaiming | no | no; fresh model per task |
/// | `Ncl` | no | – | no | yes, shared |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tss,
    TssWoSd,
    TssWoSm,
    TssWoSmNaive,
    One,
    Ncl,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Tss,
        Variant::TssWoSd,
        Variant::TssWoSm,
        Variant::TssWoSmNaive,
        Variant::One,
        Variant::Ncl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tss => "tss",
            Variant::TssWoSd => "tss_wo_sd",
            Variant::TssWoSm => "tss_wo_sm",
            Variant::TssWoSmNaive => "tss_wo_sm_naive",
            Variant::One => "one",
            Variant::Ncl => "ncl",
        }
    }

    /// Trains popup scores over frozen adapters.
    pub fn discovers_subnetworks(self) -> bool {
        !self.trains_adapters()
    }

    pub fn trains_adapters(self) -> bool {
        matches!(self, Variant::TssWoSd | Variant::Ncl)
    }

    pub fn soft_masks(self) -> bool {
        matches!(self, Variant::Tss | Variant::TssWoSd)
    }

    /// Initializes each task's scores from the previous task's.
    pub fn carries_scores(self) -> bool {
        matches!(self, Variant::Tss | Variant::TssWoSmNaive)
    }

    fn importance_target(self) -> ImportanceTarget {
        if self.trains_adapters() {
            ImportanceTarget::AdapterWeights
        } else {
            ImportanceTarget::Scores
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = TssError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| {
                TssError::Config(format!(
                    "unknown variant {s:?} (expected one of {})",
                    Variant::ALL.map(Variant::name).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_scores: f64,
    pub lr_heads: f64,
    /// Learning rate for adapter weights in the variants that train them.
    pub lr_adapters: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Gate threshold: a gate opens where its score exceeds this value.
    pub threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Apply `1 − I` to the Adam update instead of to the raw gradient.
    pub mask_final_update: bool,
    /// Abort when the epoch loss exceeds this multiple of the loss on the
    /// first batch for `divergence_epochs` consecutive epochs.
    pub divergence_factor: f64,
    pub divergence_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_scores: 1e-2,
            lr_heads: 1e-2,
            lr_adapters: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            threshold: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mask_final_update: false,
            divergence_factor: 10.0,
            divergence_epochs: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_scores", self.lr_scores),
            ("lr_heads", self.lr_heads),
            ("lr_adapters", self.lr_adapters),
            ("adam_eps", self.adam_eps),
            ("divergence_factor", self.divergence_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TssError::Config(format!(
                    "train.{name} must be a positive finite number, got {v}"
                )));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(TssError::Config(format!(
                    "train.{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("divergence_epochs", self.divergence_epochs),
        ] {
            if v == 0 {
                return Err(TssError::Config(format!("train.{name} must be at least 1")));
            }
        }
        if !self.threshold.is_finite() {
            return Err(TssError::Config("train.threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Adam moments for a fixed list of tensors. Weight decay is zero.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, config: &TrainConfig, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advances the step counter; call once before the updates of a step.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    /// Updates tensor `index` in place. `update_scale`, when given, multiplies
    /// the final update element-wise.
    pub fn update(
        &mut self,
        index: usize,
        param: &mut [f64],
        grad: &[f64],
        update_scale: Option<&[f64]>,
    ) {
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let m = &mut self.first[index];
        let v = &mut self.second[index];
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            let mut delta = self.lr * m_hat / (v_hat.sqrt() + self.eps);
            if let Some(s) = update_scale {
                delta *= s[i];
            }
            param[i] -= delta;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task_id: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub wall_time_secs: f64,
    pub gate_ones_fraction: Option<f64>,
    pub importance_mean: Option<f64>,
    pub importance_max: Option<f64>,
}

/// What one task hands to the trainer.
#[derive(Debug, Clone, Copy)]
pub struct TaskInput<'a> {
    pub task_id: usize,
    pub data: &'a TaskData,
    /// Importance accumulated over the earlier tasks.
    pub acc_importance: Option<&'a ImportanceMap>,
    /// Trained scores of the previous task.
    pub prev_scores: Option<&'a ScoreSet>,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    /// Trained scores; `None` for the adapter-training variants.
    pub scores: Option<ScoreSet>,
    /// Final gates (all open for the adapter-training variants).
    pub gates: GateSet,
    pub report: TrainReport,
}

// Labels for deriving per-task random streams.
const STREAM_SCORES: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_MODEL: u64 = 4;
const STREAM_ONE_MODEL: u64 = 5;

/// Accuracy, macro-F1 and logits on a dataset.
pub fn evaluate(
    model: &GatedModel,
    gates: &GateSet,
    task_id: usize,
    data: &Dataset,
) -> Result<(f64, f64, Matrix)> {
    let (logits, _) = model.forward(gates, task_id, &data.x)?;
    let preds = model::predict(&logits);
    let n_classes = model.head(task_id)?.n_classes();
    Ok((
        eval::accuracy(&preds, &data.y)?,
        eval::macro_f1(&preds, &data.y, n_classes)?,
        logits,
    ))
}

pub fn logits_digest(logits: &Matrix) -> String {
    let mut h = Sha256::new();
    for v in logits.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn n_classes_of(data: &TaskData) -> usize {
    data.train
        .y
        .iter()
        .chain(&data.val.y)
        .chain(&data.test.y)
        .max()
        .map_or(1, |&m| m + 1)
}

struct Snapshot {
    scores: Option<ScoreSet>,
    head: Head,
    adapters: Option<Vec<Matrix>>,
}

pub fn train_task(
    model: &mut GatedModel,
    variant: Variant,
    input: TaskInput<'_>,
    config: &TrainConfig,
    rng: &Rng,
) -> Result<TaskOutcome> {
    train_task_observed(model, variant, input, config, rng, &mut |_, _| {})
}

/// [`train_task`] that calls `observer(step, scores)` after every optimizer
/// step of a score-training variant.
pub fn train_task_observed(
    model: &mut GatedModel,
    variant: Variant,
    input: TaskInput<'_>,
    config: &TrainConfig,
    rng: &Rng,
    observer: &mut dyn FnMut(usize, &ScoreSet),
) -> Result<TaskOutcome> {
    config.validate()?;
    let started = Instant::now();
    let t = input.task_id;
    let t64 = t as u64;
    let shapes = model.gated_shapes();
    let sizes: Vec<usize> = shapes.iter().map(|&(r, c)| r * c).collect();
    let train = &input.data.train;
    if train.is_empty() {
        return Err(TssError::Invalid(format!("task {t} has no training data")));
    }

    let n_classes = n_classes_of(input.data);
    let hidden = model.config().hidden_dim;
    model.add_head(
        t,
        Head::new(&mut rng.split(&[STREAM_HEAD, t64]), hidden, n_classes),
    );

    let mask = if variant.soft_masks() {
        match input.acc_importance {
            Some(acc) if acc.shapes() == shapes => Some(acc),
            Some(acc) => {
                return Err(TssError::Shape(format!(
                    "importance {:?} vs gated tensors {shapes:?}",
                    acc.shapes()
                )))
            }
            None => None,
        }
    } else {
        None
    };
    let keep: Option<Vec<Vec<f64>>> = mask.map(|acc| {
        acc.tensors
            .iter()
            .map(|m| m.data().iter().map(|i| 1.0 - i).collect())
            .collect()
    });

    let mut scores = if variant.discovers_subnetworks() {
        let mut init_rng = rng.split(&[STREAM_SCORES, t64]);
        let s = if variant.carries_scores() && t > 0 {
            masking::init_scores(t, input.prev_scores, &shapes, &mut init_rng)?
        } else {
            masking::kaiming_scores(t, &shapes, &mut init_rng)
        };
        Some(s)
    } else {
        None
    };
    let open = GateSet::all_open(t, &shapes);
    let gates_for = |scores: &Option<ScoreSet>| match scores {
        Some(s) => gating::threshold(s, config.threshold),
        None => open.clone(),
    };

    let head_sizes = [hidden * n_classes, n_classes];
    let mut head_opt = Adam::new(config.lr_heads, config, &head_sizes);
    let mut param_opt = if variant.trains_adapters() {
        Adam::new(config.lr_adapters, config, &sizes)
    } else {
        Adam::new(config.lr_scores, config, &sizes)
    };

    let snapshot = |model: &GatedModel, scores: &Option<ScoreSet>| -> Result<Snapshot> {
        Ok(Snapshot {
            scores: scores.clone(),
            head: model.head(t)?.clone(),
            adapters: variant
                .trains_adapters()
                .then(|| model.gated_weights().into_iter().cloned().collect()),
        })
    };
    let mut best = snapshot(model, &scores)?;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut initial_loss: Option<f64> = None;
    let mut diverging = 0;
    let mut epochs_run = 0;
    let mut last_loss = f64::NAN;
    let mut step = 0usize;
    let mut shuffle = rng.split(&[STREAM_SHUFFLE, t64]);

    for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        let order = shuffle.permutation(train.len());
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train.subset(chunk);
            let gates = gates_for(&scores);
            let (_, trace) = model.forward(&gates, t, &batch.x)?;
            let grads = model.backward(&trace, &batch.y)?;
            if !grads.loss.is_finite() {
                return Err(TssError::Numerical {
                    task: t,
                    reason: format!("non-finite loss at epoch {epochs_run}, step {step}"),
                });
            }
            loss_sum += grads.loss;
            n_batches += 1;
            initial_loss.get_or_insert(grads.loss);

            head_opt.tick();
            {
                let head = model.head_mut(t)?;
                head_opt.update(0, head.weight.data_mut(), grads.head.weight.data(), None);
                head_opt.update(1, &mut head.bias, &grads.head.bias, None);
            }

            let raw = if variant.trains_adapters() {
                &grads.effective
            } else {
                &grads.scores
            };
            let masked;
            let (grad_set, update_scale): (&[Matrix], _) = match (&mask, &keep) {
                (Some(acc), Some(_)) if !config.mask_final_update => {
                    masked = masking::soft_mask_all(raw, acc)?;
                    (&masked, None)
                }
                (Some(_), Some(k)) => (raw, Some(k)),
                _ => (raw, None),
            };
            param_opt.tick();
            for (i, g) in grad_set.iter().enumerate() {
                let scale = update_scale.map(|k: &Vec<Vec<f64>>| k[i].as_slice());
                match scores.as_mut() {
                    Some(s) => param_opt.update(i, s.tensors[i].data_mut(), g.data(), scale),
                    None => {
                        param_opt.update(i, model.gated_weight_mut(i).data_mut(), g.data(), scale)
                    }
                }
            }
            if let Some(s) = &scores {
                observer(step, s);
            }
            step += 1;
        }
        last_loss = loss_sum / n_batches as f64;
        match initial_loss {
            Some(l0) if last_loss > config.divergence_factor * l0 => {
                diverging += 1;
                if diverging >= config.divergence_epochs {
                    return Err(TssError::Numerical {
                        task: t,
                        reason: format!(
                            "loss {last_loss:.4} above {}x the initial {l0:.4} for {diverging} epochs",
                            config.divergence_factor
                        ),
                    });
                }
            }
            _ => diverging = 0,
        }

        let (val_acc, _, _) = evaluate(model, &gates_for(&scores), t, &input.data.val)?;
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epochs_run;
            best = snapshot(model, &scores)?;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    // restore the best validation state
    *model.head_mut(t)? = best.head;
    if let Some(weights) = best.adapters {
        for (i, w) in weights.into_iter().enumerate() {
            *model.gated_weight_mut(i) = w;
        }
    }
    let scores = best.scores;
    let gates = gates_for(&scores);
    let (train_acc, _, _) = evaluate(model, &gates, t, train)?;

    Ok(TaskOutcome {
        report: TrainReport {
            task_id: t,
            epochs_run,
            best_epoch,
            train_loss: last_loss,
            train_accuracy: train_acc,
            val_accuracy: best_val,
            wall_time_secs: started.elapsed().as_secs_f64(),
            gate_ones_fraction: scores.is_some().then(|| gates.ones_fraction()),
            importance_mean: None,
            importance_max: None,
        },
        scores,
        gates,
    })
}

/// Computes the finished task's importance on its training data, normalizes
/// it and folds it into the accumulation. The model is only read.
pub fn finish_task(
    model: &GatedModel,
    variant: Variant,
    task_id: usize,
    gates: &GateSet,
    data: &Dataset,
    acc_importance: &ImportanceMap,
    config: &TrainConfig,
) -> Result<(ImportanceMap, ImportanceMap)> {
    let raw = masking::compute_importance(
        model,
        gates,
        task_id,
        data,
        config.batch_size,
        variant.importance_target(),
    )?;
    let normalized = masking::normalize(&raw)?;
    let acc = masking::accumulate(acc_importance, &normalized)?;
    Ok((acc, normalized))
}

/// Everything a sequence run produces.
#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: ResultMatrix,
    pub macro_f1: ResultMatrix,
    /// `logit_digests[i][j]`: digest of task `j`'s test logits after task `i`.
    pub logit_digests: Vec<Vec<String>>,
    /// Saved gates per task (`None` for the adapter-training variants).
    pub gates: Vec<Option<PackedGates>>,
    pub heads: Vec<Head>,
    /// Final accumulated importance, for the soft-masking variants.
    pub importance: Option<ImportanceMap>,
    pub reports: Vec<TrainReport>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
}

fn combined_digest<'a>(digests: impl Iterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for d in digests {
        h.update(d.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Trains every task of `stream` in order, evaluating all tasks seen so far
/// after each one.
pub fn run_sequence(
    stream: &TaskStream,
    variant: Variant,
    model_config: ModelConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<SequenceRun> {
    if stream.is_empty() {
        return Err(TssError::Invalid("empty task stream".into()));
    }
    model_config.validate()?;
    config.validate()?;
    if let Some(t) = stream.tasks.first() {
        if t.dims.input_dim != model_config.input_dim {
            return Err(TssError::Config(format!(
                "model.input_dim {} does not match stream input_dim {}",
                model_config.input_dim, t.dims.input_dim
            )));
        }
    }
    let rng = Rng::new(seed);
    let fingerprint = stream.fingerprint();

    // ONE keeps a separate model per task; everything else shares one.
    let mut models: Vec<GatedModel> = if variant == Variant::One {
        stream
            .tasks
            .iter()
            .map(|t| {
                GatedModel::build(
                    model_config,
                    &mut rng.split(&[STREAM_ONE_MODEL, t.task_id as u64]),
                )
            })
            .collect::<Result<_>>()?
    } else {
        vec![GatedModel::build(
            model_config,
            &mut rng.split(&[STREAM_MODEL]),
        )?]
    };
    let digest_all = |models: &[GatedModel]| {
        let ds: Vec<String> = models.iter().map(GatedModel::frozen_digest).collect();
        if ds.len() == 1 {
            ds[0].clone()
        } else {
            combined_digest(ds.iter().map(String::as_str))
        }
    };
    let frozen_digest_before = digest_all(&models);

    let mut accuracy = ResultMatrix::new("accuracy", &fingerprint);
    let mut macro_f1 = ResultMatrix::new("macro_f1", &fingerprint);
    let mut logit_digests = Vec::with_capacity(stream.len());
    let mut saved_gates: Vec<GateSet> = Vec::with_capacity(stream.len());
    let mut packed = Vec::with_capacity(stream.len());
    let mut test_sets: Vec<Dataset> = Vec::with_capacity(stream.len());
    let mut reports = Vec::with_capacity(stream.len());
    let mut acc = ImportanceMap::zeros(&model_config.gated_shapes());
    let mut prev_scores: Option<ScoreSet> = None;

    for spec in &stream.tasks {
        let t = spec.task_id;
        let data = spec.generate();
        let model = if variant == Variant::One {
            &mut models[t]
        } else {
            &mut models[0]
        };
        let outcome = train_task(
            model,
            variant,
            TaskInput {
                task_id: t,
                data: &data,
                acc_importance: Some(&acc),
                prev_scores: prev_scores.as_ref(),
            },
            config,
            &rng,
        )?;
        let mut report = outcome.report;
        if variant.soft_masks() {
            let (next, normalized) =
                finish_task(model, variant, t, &outcome.gates, &data.train, &acc, config)?;
            report.importance_mean = Some(normalized.mean());
            report.importance_max = Some(normalized.max());
            acc = next;
        }
        packed.push(if variant.discovers_subnetworks() {
            Some(gating::pack(&outcome.gates)?)
        } else {
            None
        });
        saved_gates.push(outcome.gates);
        prev_scores = outcome.scores;
        test_sets.push(data.test);
        reports.push(report);

        let mut acc_row = Vec::with_capacity(t + 1);
        let mut f1_row = Vec::with_capacity(t + 1);
        let mut digest_row = Vec::with_capacity(t + 1);
        for (j, test) in test_sets.iter().enumerate() {
            let m = if variant == Variant::One {
                &models[j]
            } else {
                &models[0]
            };
            let gates = if variant.discovers_subnetworks() {
                saved_gates[j].clone()
            } else {
                GateSet::all_open(j, &model_config.gated_shapes())
            };
            let (a, f, logits) = evaluate(m, &gates, j, test)?;
            acc_row.push(a);
            f1_row.push(f);
            digest_row.push(logits_digest(&logits));
        }
        accuracy.push_row(acc_row)?;
        macro_f1.push_row(f1_row)?;
        logit_digests.push(digest_row);
    }

    let heads = stream
        .tasks
        .iter()
        .map(|spec| {
            let m = if variant == Variant::One {
                &models[spec.task_id]
            } else {
                &models[0]
            };
            m.head(spec.task_id).cloned()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SequenceRun {
        variant,
        seed,
        accuracy,
        macro_f1,
        logit_digests,
        gates: packed,
        heads,
        importance: variant.soft_masks().then_some(acc),
        reports,
        frozen_digest_before,
        frozen_digest_after: digest_all(&models),
    })
}
