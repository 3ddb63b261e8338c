//! Frozen MLP backbone with bottleneck adapters and per-task heads.
//!
//! Every hidden layer computes `h = relu(x·W + b)` and is followed by an
//! adapter `h' = h + relu(h·ŵ_down + b_down)·ŵ_up + b_up`, where the
//! effective weights `ŵ = w ⊗ g` are the frozen adapter weights selected by a
//! binary gate set. The adapter weight matrices are the only gated tensors;
//! they are ordered `[down_0, up_0, down_1, up_1, ...]` everywhere in the
//! crate.
//!
//! Backpropagation is written out by hand. Only the gradients that training
//! can use are produced: the gradient with respect to each effective adapter
//! weight, the straight-through score gradient derived from it, and the head
//! gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TssError};
use crate::gating::{self, GateSet};
use crate::tensor::{self, matmul, randn, BinaryOp, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub bottleneck_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 20,
            hidden_dim: 32,
            n_layers: 2,
            bottleneck_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("bottleneck_dim", self.bottleneck_dim),
        ] {
            if v == 0 {
                return Err(TssError::Config(format!("model.{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Shapes of the gated tensors, in canonical order.
    pub fn gated_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers)
            .flat_map(|_| {
                [
                    (self.hidden_dim, self.bottleneck_dim),
                    (self.bottleneck_dim, self.hidden_dim),
                ]
            })
            .collect()
    }

    pub fn gated_param_count(&self) -> usize {
        2 * self.n_layers * self.hidden_dim * self.bottleneck_dim
    }
}

/// A fully connected layer `x·weight + bias`, with `weight` shaped `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn kaiming(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: randn(rng, fan_in, fan_out, (2.0 / fan_in as f64).sqrt()),
            bias: vec![0.0; fan_out],
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = matmul(x, &self.weight)?;
        out.add_row_broadcast(&self.bias)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    /// `hidden × bottleneck`
    pub w_down: Matrix,
    pub b_down: Vec<f64>,
    /// `bottleneck × hidden`
    pub w_up: Matrix,
    pub b_up: Vec<f64>,
}

/// Per-task classification head on top of the last adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn new(rng: &mut Rng, hidden_dim: usize, n_classes: usize) -> Self {
        Self {
            weight: randn(rng, hidden_dim, n_classes, (1.0 / hidden_dim as f64).sqrt()),
            bias: vec![0.0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }
}

/// Trainable popup scores, one matrix per gated tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub task_id: usize,
    pub tensors: Vec<Matrix>,
}

impl ScoreSet {
    pub fn down(&self, layer: usize) -> &Matrix {
        &self.tensors[2 * layer]
    }

    pub fn up(&self, layer: usize) -> &Matrix {
        &self.tensors[2 * layer + 1]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(Matrix::shape).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

/// Intermediates of one layer of the forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Layer input.
    pub input: Matrix,
    /// `x·W + b` before the ReLU.
    pub pre_activation: Matrix,
    /// Backbone layer output, which is also the adapter input.
    pub hidden: Matrix,
    /// `h·ŵ_down + b_down` before the ReLU.
    pub down_pre: Matrix,
    pub down_act: Matrix,
    /// Adapter output, `hidden` plus the residual branch.
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub task_id: usize,
    pub layers: Vec<LayerTrace>,
    /// Effective (gated) adapter weights used in the pass.
    pub effective: Vec<Matrix>,
    pub logits: Matrix,
}

#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// ∂L/∂ŵ for every gated tensor.
    pub effective: Vec<Matrix>,
    /// Straight-through score gradients, `∂L/∂ŵ ⊗ w`.
    pub scores: Vec<Matrix>,
    pub head: HeadGradients,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedModel {
    config: ModelConfig,
    backbone: Vec<Dense>,
    adapters: Vec<Adapter>,
    heads: BTreeMap<usize, Head>,
}

impl GatedModel {
    /// Draws the backbone and adapters with `N(0, 2/fan_in)` weights and zero
    /// biases. No heads are attached.
    pub fn build(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut backbone = Vec::with_capacity(config.n_layers);
        let mut adapters = Vec::with_capacity(config.n_layers);
        for layer in 0..config.n_layers {
            let fan_in = if layer == 0 {
                config.input_dim
            } else {
                config.hidden_dim
            };
            backbone.push(Dense::kaiming(rng, fan_in, config.hidden_dim));
            let down = Dense::kaiming(rng, config.hidden_dim, config.bottleneck_dim);
            let up = Dense::kaiming(rng, config.bottleneck_dim, config.hidden_dim);
            adapters.push(Adapter {
                w_down: down.weight,
                b_down: down.bias,
                w_up: up.weight,
                b_up: up.bias,
            });
        }
        Ok(Self {
            config,
            backbone,
            adapters,
            heads: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &[Dense] {
        &self.backbone
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [Adapter] {
        &mut self.adapters
    }

    pub fn gated_shapes(&self) -> Vec<(usize, usize)> {
        self.config.gated_shapes()
    }

    /// Adapter weight matrices in canonical gated order.
    pub fn gated_weights(&self) -> Vec<&Matrix> {
        self.adapters
            .iter()
            .flat_map(|a| [&a.w_down, &a.w_up])
            .collect()
    }

    pub fn gated_weight_mut(&mut self, index: usize) -> &mut Matrix {
        let adapter = &mut self.adapters[index / 2];
        if index.is_multiple_of(2) {
            &mut adapter.w_down
        } else {
            &mut adapter.w_up
        }
    }

    pub fn add_head(&mut self, task_id: usize, head: Head) {
        self.heads.insert(task_id, head);
    }

    pub fn head(&self, task_id: usize) -> Result<&Head> {
        self.heads
            .get(&task_id)
            .ok_or(TssError::MissingHead(task_id))
    }

    pub fn head_mut(&mut self, task_id: usize) -> Result<&mut Head> {
        self.heads
            .get_mut(&task_id)
            .ok_or(TssError::MissingHead(task_id))
    }

    /// SHA-256 over the backbone and adapter parameters (shapes and
    /// little-endian values), as lowercase hex. Heads are excluded.
    pub fn frozen_digest(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |m: &Matrix| {
            hasher.update((m.rows() as u64).to_le_bytes());
            hasher.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                hasher.update(v.to_le_bytes());
            }
        };
        for layer in &self.backbone {
            feed(&layer.weight);
            feed(&Matrix::row_vector(&layer.bias));
        }
        for a in &self.adapters {
            feed(&a.w_down);
            feed(&Matrix::row_vector(&a.b_down));
            feed(&a.w_up);
            feed(&Matrix::row_vector(&a.b_up));
        }
        hex::encode(hasher.finalize())
    }

    fn check_gates(&self, gates: &GateSet) -> Result<()> {
        let expected = self.gated_shapes();
        let got = gates.shapes();
        if expected != got {
            return Err(TssError::Shape(format!(
                "gate shapes {got:?} do not match adapter shapes {expected:?}"
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        gates: &GateSet,
        task_id: usize,
        batch: &Matrix,
    ) -> Result<(Matrix, ForwardTrace)> {
        self.check_gates(gates)?;
        let head = self.head(task_id)?;
        if batch.cols() != self.config.input_dim {
            return Err(TssError::Shape(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.config.input_dim
            )));
        }
        let effective = self
            .gated_weights()
            .into_iter()
            .zip(&gates.tensors)
            .map(|(w, g)| gating::select(w, g))
            .collect::<Result<Vec<_>>>()?;

        let mut layers = Vec::with_capacity(self.config.n_layers);
        let mut x = batch.clone();
        for (l, (dense, adapter)) in self.backbone.iter().zip(&self.adapters).enumerate() {
            let pre_activation = dense.apply(&x)?;
            let hidden = pre_activation.map(relu);
            let mut down_pre = matmul(&hidden, &effective[2 * l])?;
            down_pre.add_row_broadcast(&adapter.b_down)?;
            let down_act = down_pre.map(relu);
            let mut branch = matmul(&down_act, &effective[2 * l + 1])?;
            branch.add_row_broadcast(&adapter.b_up)?;
            let output = tensor::ew(BinaryOp::Add, &hidden, &branch)?;
            layers.push(LayerTrace {
                input: x,
                pre_activation,
                hidden,
                down_pre,
                down_act,
                output: output.clone(),
            });
            x = output;
        }
        let mut logits = matmul(&x, &head.weight)?;
        logits.add_row_broadcast(&head.bias)?;
        let trace = ForwardTrace {
            task_id,
            layers,
            effective,
            logits: logits.clone(),
        };
        Ok((logits, trace))
    }

    /// Backpropagates mean cross-entropy through a trace produced by
    /// [`GatedModel::forward`] with the same gates.
    ///
    /// The step function of the gates is treated as the identity, so the score
    /// gradient of element `(i, j)` is `∂L/∂ŵ_ij · w_ij`.
    pub fn backward(&self, trace: &ForwardTrace, labels: &[usize]) -> Result<Gradients> {
        let head = self.head(trace.task_id)?;
        if trace.layers.len() != self.config.n_layers
            || trace.effective.len() != 2 * self.config.n_layers
        {
            return Err(TssError::Shape(format!(
                "trace has {} layers, model has {}",
                trace.layers.len(),
                self.config.n_layers
            )));
        }
        if trace.logits.cols() != head.n_classes() {
            return Err(TssError::Shape(format!(
                "trace logits have {} classes, head for task {} has {}",
                trace.logits.cols(),
                trace.task_id,
                head.n_classes()
            )));
        }
        let (loss, mut upstream) = cross_entropy_with_grad(&trace.logits, labels)?;

        let last = &trace.layers[self.config.n_layers - 1].output;
        let head_grads = HeadGradients {
            weight: matmul(&last.transpose(), &upstream)?,
            bias: upstream.column_sums(),
        };
        upstream = matmul(&upstream, &head.weight.transpose())?;

        let mut effective = vec![Matrix::zeros(0, 0); 2 * self.config.n_layers];
        for l in (0..self.config.n_layers).rev() {
            let lt = &trace.layers[l];
            let w_down_eff = &trace.effective[2 * l];
            let w_up_eff = &trace.effective[2 * l + 1];

            // output = hidden + relu(hidden·ŵ_down + b_down)·ŵ_up + b_up
            effective[2 * l + 1] = matmul(&lt.down_act.transpose(), &upstream)?;
            let d_act = matmul(&upstream, &w_up_eff.transpose())?;
            let d_down_pre = relu_backward(&d_act, &lt.down_pre)?;
            effective[2 * l] = matmul(&lt.hidden.transpose(), &d_down_pre)?;
            let through_down = matmul(&d_down_pre, &w_down_eff.transpose())?;
            let d_hidden = tensor::ew(BinaryOp::Add, &upstream, &through_down)?;

            if l > 0 {
                let d_pre = relu_backward(&d_hidden, &lt.pre_activation)?;
                upstream = matmul(&d_pre, &self.backbone[l].weight.transpose())?;
            }
        }

        let scores = effective
            .iter()
            .zip(self.gated_weights())
            .map(|(g, w)| straight_through(g, w))
            .collect::<Result<Vec<_>>>()?;

        Ok(Gradients {
            effective,
            scores,
            head: head_grads,
            loss,
        })
    }
}

/// Score gradient from the effective-weight gradient: `grad_ŵ ⊗ w`.
pub fn straight_through(grad_effective: &Matrix, weight: &Matrix) -> Result<Matrix> {
    tensor::ew(BinaryOp::Mul, grad_effective, weight)
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn relu_backward(grad: &Matrix, pre: &Matrix) -> Result<Matrix> {
    if grad.shape() != pre.shape() {
        return Err(TssError::Shape("relu backward".into()));
    }
    let data = grad
        .data()
        .iter()
        .zip(pre.data())
        .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(grad.rows(), grad.cols(), data)
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(TssError::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.rows() == 0 {
        return Err(TssError::Invalid("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(TssError::Invalid(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of `logits` against integer `labels`.
pub fn head_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| log_sum_exp(logits.row(r)) - logits.get(r, y))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let loss = head_loss(logits, labels)?;
    let n = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &y) in labels.iter().enumerate() {
        let lse = log_sum_exp(logits.row(r));
        for c in 0..logits.cols() {
            let p = (logits.get(r, c) - lse).exp();
            let target = if c == y { 1.0 } else { 0.0 };
            grad.set(r, c, (p - target) / n);
        }
    }
    Ok((loss, grad))
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn predict(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
