//! Importance of gated parameters and gradient soft-masking.
//!
//! After a task is trained, its data is passed through the network once more
//! and the absolute mean gradient of every score (or adapter weight, for the
//! variant that trains adapters directly) is recorded. Each tensor is then
//! standardized and squashed through `|tanh(·)|` into `[0, 1)`, and folded
//! into a running element-wise maximum. While later tasks train, gradients
//! are scaled by `1 − I` so parameters that mattered before move less.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Result, TssError};
use crate::gating::GateSet;
use crate::model::{GatedModel, ScoreSet};
use crate::taskgen::Dataset;
use crate::tensor::{self, randn, BinaryOp, Matrix, Rng};

pub const IMPORTANCE_MAGIC: &[u8; 4] = b"TSSI";

/// Standard deviations below this are treated as zero by [`normalize`].
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceKind {
    Raw,
    Normalized,
    Accumulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub kind: ImportanceKind,
    pub tensors: Vec<Matrix>,
}

/// Which parameters importance is measured for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportanceTarget {
    /// Popup scores (gradient `∂L/∂ŵ ⊗ w`).
    Scores,
    /// Adapter weights directly (gradient `∂L/∂ŵ`, with all gates open).
    AdapterWeights,
}

impl ImportanceMap {
    /// The empty accumulation used before the first task.
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        Self {
            kind: ImportanceKind::Accumulated,
            tensors: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(Matrix::shape).collect()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data().iter().copied())
    }

    pub fn mean(&self) -> f64 {
        let n: usize = self.tensors.iter().map(Matrix::len).sum();
        if n == 0 {
            return 0.0;
        }
        self.values().sum::<f64>() / n as f64
    }

    pub fn max(&self) -> f64 {
        self.values().fold(0.0, f64::max)
    }

    /// Encodes as a `TSSI` file; `task_id` records the last task folded in.
    pub fn to_bytes(&self, task_id: u32) -> Result<Vec<u8>> {
        codec::encode_floats(IMPORTANCE_MAGIC, task_id, &self.tensors)
    }

    /// Decodes a `TSSI` file as an accumulated map.
    pub fn from_bytes(bytes: &[u8]) -> Result<(u32, Self)> {
        let (task_id, tensors) = codec::decode_floats(IMPORTANCE_MAGIC, bytes)?;
        Ok((
            task_id,
            Self {
                kind: ImportanceKind::Accumulated,
                tensors,
            },
        ))
    }

    pub fn write(&self, path: &Path, task_id: u32) -> Result<()> {
        std::fs::write(path, self.to_bytes(task_id)?).map_err(|e| TssError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<(u32, Self)> {
        let bytes = std::fs::read(path).map_err(|e| TssError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| TssError::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn check_shapes(what: &str, a: &[Matrix], b: &[Matrix]) -> Result<()> {
    let sa: Vec<_> = a.iter().map(Matrix::shape).collect();
    let sb: Vec<_> = b.iter().map(Matrix::shape).collect();
    if sa != sb {
        return Err(TssError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Mean over batches of `|batch-mean gradient|` of the cross-entropy, for
/// every gated element. Reads the model only.
pub fn compute_importance(
    model: &GatedModel,
    gates: &GateSet,
    task_id: usize,
    data: &Dataset,
    batch_size: usize,
    target: ImportanceTarget,
) -> Result<ImportanceMap> {
    if data.is_empty() {
        return Err(TssError::Invalid(
            "importance needs a nonempty dataset".into(),
        ));
    }
    let mut sums: Vec<Matrix> = model
        .gated_shapes()
        .iter()
        .map(|&(r, c)| Matrix::zeros(r, c))
        .collect();
    let mut n_batches = 0usize;
    for batch in data.batches(batch_size) {
        let (_, trace) = model.forward(gates, task_id, &batch.x)?;
        let grads = model.backward(&trace, &batch.y)?;
        let per_tensor = match target {
            ImportanceTarget::Scores => &grads.scores,
            ImportanceTarget::AdapterWeights => &grads.effective,
        };
        for (acc, g) in sums.iter_mut().zip(per_tensor) {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v.abs();
            }
        }
        n_batches += 1;
    }
    let inv = 1.0 / n_batches as f64;
    Ok(ImportanceMap {
        kind: ImportanceKind::Raw,
        tensors: sums.iter().map(|m| tensor::scale(m, inv)).collect(),
    })
}

/// `(t − mean) / std` with the population std, or `None` when the spread
/// is too small to standardize.
pub fn standardize(t: &Matrix) -> Option<Matrix> {
    if t.is_empty() {
        return None;
    }
    let (mean, std) = tensor::stats(t);
    if std < DEGENERATE_STD {
        return None;
    }
    Some(tensor::scale(
        &tensor::ew_scalar(BinaryOp::Sub, t, mean),
        1.0 / std,
    ))
}

/// Per tensor: standardize to mean 0 / std 1, then `|tanh(z)|`. A tensor
/// with (near) zero spread maps to all zeros.
pub fn normalize(raw: &ImportanceMap) -> Result<ImportanceMap> {
    if raw.kind != ImportanceKind::Raw {
        return Err(TssError::Invalid(format!(
            "normalize expects a raw map, got {:?}",
            raw.kind
        )));
    }
    let tensors = raw
        .tensors
        .iter()
        .map(|t| {
            if t.is_empty() {
                return t.clone();
            }
            match standardize(t) {
                Some(z) => tensor::abs(&tensor::tanh(&z)),
                None => Matrix::zeros(t.rows(), t.cols()),
            }
        })
        .collect();
    Ok(ImportanceMap {
        kind: ImportanceKind::Normalized,
        tensors,
    })
}

/// Element-wise maximum of the running accumulation and a new normalized map.
pub fn accumulate(prev: &ImportanceMap, new: &ImportanceMap) -> Result<ImportanceMap> {
    if prev.kind != ImportanceKind::Accumulated || new.kind != ImportanceKind::Normalized {
        return Err(TssError::Invalid(format!(
            "accumulate expects (accumulated, normalized), got ({:?}, {:?})",
            prev.kind, new.kind
        )));
    }
    check_shapes("accumulate", &prev.tensors, &new.tensors)?;
    let tensors = prev
        .tensors
        .iter()
        .zip(&new.tensors)
        .map(|(a, b)| tensor::ew(BinaryOp::Max, a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceMap {
        kind: ImportanceKind::Accumulated,
        tensors,
    })
}

/// `(1 − I) ⊗ grad` for one tensor.
pub fn soft_mask(grad: &Matrix, importance: &Matrix) -> Result<Matrix> {
    if grad.shape() != importance.shape() {
        return Err(TssError::Shape(format!(
            "soft_mask: gradient {:?} vs importance {:?}",
            grad.shape(),
            importance.shape()
        )));
    }
    let data = grad
        .data()
        .iter()
        .zip(importance.data())
        .map(|(&g, &i)| (1.0 - i) * g)
        .collect();
    Matrix::from_vec(grad.rows(), grad.cols(), data)
}

/// [`soft_mask`] over a whole gradient set.
pub fn soft_mask_all(grads: &[Matrix], acc: &ImportanceMap) -> Result<Vec<Matrix>> {
    if acc.kind != ImportanceKind::Accumulated {
        return Err(TssError::Invalid(format!(
            "soft-masking needs an accumulated map, got {:?}",
            acc.kind
        )));
    }
    check_shapes("soft_mask", grads, &acc.tensors)?;
    grads
        .iter()
        .zip(&acc.tensors)
        .map(|(g, i)| soft_mask(g, i))
        .collect()
}

/// Fresh scores with `N(0, 2/fan_in)` entries, `fan_in` being the row count
/// of the weight each tensor gates.
pub fn kaiming_scores(task_id: usize, shapes: &[(usize, usize)], rng: &mut Rng) -> ScoreSet {
    ScoreSet {
        task_id,
        tensors: shapes
            .iter()
            .map(|&(r, c)| randn(rng, r, c, (2.0 / r as f64).sqrt()))
            .collect(),
    }
}

/// Scores for task `task_index`: Kaiming draws for the first task, a copy of
/// the previous task's trained scores afterwards.
pub fn init_scores(
    task_index: usize,
    prev: Option<&ScoreSet>,
    shapes: &[(usize, usize)],
    rng: &mut Rng,
) -> Result<ScoreSet> {
    match (task_index, prev) {
        (0, None) => Ok(kaiming_scores(0, shapes, rng)),
        (0, Some(_)) => Err(TssError::Invalid(
            "the first task has no previous scores to copy".into(),
        )),
        (_, None) => Err(TssError::Invalid(format!(
            "task {task_index} needs the previous task's trained scores"
        ))),
        (t, Some(p)) => {
            if p.shapes() != shapes {
                return Err(TssError::Shape(format!(
                    "previous scores {:?} vs expected {shapes:?}",
                    p.shapes()
                )));
            }
            Ok(ScoreSet {
                task_id: t,
                tensors: p.tensors.clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Head, ModelConfig};

    fn raw(values: &[f64]) -> ImportanceMap {
        ImportanceMap {
            kind: ImportanceKind::Raw,
            tensors: vec![Matrix::row_vector(values)],
        }
    }

    fn acc(values: &[f64]) -> ImportanceMap {
        ImportanceMap {
            kind: ImportanceKind::Accumulated,
            tensors: vec![Matrix::row_vector(values)],
        }
    }

    fn norm(values: &[f64]) -> ImportanceMap {
        ImportanceMap {
            kind: ImportanceKind::Normalized,
            tensors: vec![Matrix::row_vector(values)],
        }
    }

    #[test]
    fn normalize_pair() {
        let n = normalize(&raw(&[1.0, -1.0])).unwrap();
        for v in n.tensors[0].data() {
            assert!((v - 0.76159).abs() < 1e-5);
        }
    }

    #[test]
    fn normalize_constant_is_zero() {
        let n = normalize(&raw(&[0.3; 6])).unwrap();
        assert!(n.tensors[0].data().iter().all(|&v| v == 0.0));
        assert!(normalize(&n).is_err());
    }

    #[test]
    fn normalize_is_per_tensor() {
        let m = ImportanceMap {
            kind: ImportanceKind::Raw,
            tensors: vec![
                Matrix::row_vector(&[1.0, 3.0]),
                Matrix::row_vector(&[100.0, 300.0]),
            ],
        };
        let n = normalize(&m).unwrap();
        assert_eq!(n.tensors[0], n.tensors[1]);
    }

    #[test]
    fn accumulate_cases() {
        let a = accumulate(&acc(&[0.2, 0.9]), &norm(&[0.5, 0.1])).unwrap();
        assert_eq!(a.tensors[0].data(), &[0.5, 0.9]);
        let first = accumulate(&ImportanceMap::zeros(&[(1, 3)]), &norm(&[0.1, 0.0, 0.7])).unwrap();
        assert_eq!(first.tensors[0].data(), &[0.1, 0.0, 0.7]);
        assert!(accumulate(&acc(&[0.1]), &norm(&[0.1, 0.2])).is_err());
        assert!(accumulate(&norm(&[0.1]), &norm(&[0.1])).is_err());
    }

    #[test]
    fn soft_mask_cases() {
        let g = Matrix::row_vector(&[1.0, 2.0]);
        assert_eq!(
            soft_mask(&g, &Matrix::row_vector(&[0.0, 1.0]))
                .unwrap()
                .data(),
            &[1.0, 0.0]
        );
        assert_eq!(soft_mask(&g, &Matrix::zeros(1, 2)).unwrap(), g);
        assert_eq!(
            soft_mask(&g, &Matrix::filled(1, 2, 0.5)).unwrap().data(),
            &[0.5, 1.0]
        );
        assert!(soft_mask(&g, &Matrix::zeros(2, 1)).is_err());
        assert!(soft_mask_all(&[g], &norm(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn init_scores_contract() {
        let shapes = [(8, 3), (3, 8)];
        let a = init_scores(0, None, &shapes, &mut Rng::new(4)).unwrap();
        let b = init_scores(0, None, &shapes, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        let c = init_scores(3, Some(&a), &shapes, &mut Rng::new(99)).unwrap();
        assert_eq!(c.tensors, a.tensors);
        assert_eq!(c.task_id, 3);
        assert!(init_scores(1, None, &shapes, &mut Rng::new(0)).is_err());
        assert!(init_scores(0, Some(&a), &shapes, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn kaiming_std() {
        let s = kaiming_scores(0, &[(8, 12_500)], &mut Rng::new(77));
        let (mean, std) = tensor::stats(&s.tensors[0]);
        assert!(mean.abs() < 0.01);
        assert!((std - 0.5).abs() <= 0.02 * 0.5, "std {std}");
    }

    fn setup() -> (GatedModel, GateSet, Dataset) {
        let cfg = ModelConfig {
            input_dim: 3,
            hidden_dim: 5,
            n_layers: 2,
            bottleneck_dim: 2,
        };
        let mut rng = Rng::new(12);
        let mut model = GatedModel::build(cfg, &mut rng).unwrap();
        model.add_head(0, Head::new(&mut rng, 5, 3));
        let scores = kaiming_scores(0, &model.gated_shapes(), &mut rng);
        let gates = crate::gating::threshold(&scores, 0.0);
        let data = Dataset {
            x: randn(&mut rng, 8, 3, 1.0),
            y: vec![0, 1, 2, 0, 1, 2, 0, 1],
        };
        (model, gates, data)
    }

    #[test]
    fn identical_samples_give_single_sample_gradient() {
        let (model, gates, data) = setup();
        let one = data.subset(&[3]);
        let many = data.subset(&[3; 8]);
        let single =
            compute_importance(&model, &gates, 0, &one, 1, ImportanceTarget::Scores).unwrap();
        for bs in [1, 4, 8] {
            let m =
                compute_importance(&model, &gates, 0, &many, bs, ImportanceTarget::Scores).unwrap();
            for (a, b) in m.values().zip(single.values()) {
                assert!((a - b).abs() <= 1e-14 * b.abs().max(1e-300), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn batch_of_one_matches_per_sample_loop() {
        let (model, gates, data) = setup();
        let imp =
            compute_importance(&model, &gates, 0, &data, 1, ImportanceTarget::Scores).unwrap();
        assert!(imp.values().all(|v| v >= 0.0));
        // oracle: explicit per-sample loop
        let shapes = model.gated_shapes();
        let mut sums: Vec<Vec<f64>> = shapes.iter().map(|&(r, c)| vec![0.0; r * c]).collect();
        for i in 0..data.len() {
            let x = data.x.select_rows(&[i]);
            let (_, trace) = model.forward(&gates, 0, &x).unwrap();
            let g = model.backward(&trace, &[data.y[i]]).unwrap();
            for (s, t) in sums.iter_mut().zip(&g.scores) {
                for (a, v) in s.iter_mut().zip(t.data()) {
                    *a += v.abs();
                }
            }
        }
        for (s, t) in sums.iter().zip(&imp.tensors) {
            for (a, b) in s.iter().zip(t.data()) {
                assert!((a / 8.0 - b).abs() <= 1e-12 * b.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn importance_leaves_model_untouched() {
        let (model, gates, data) = setup();
        let before = model.clone();
        compute_importance(
            &model,
            &gates,
            0,
            &data,
            3,
            ImportanceTarget::AdapterWeights,
        )
        .unwrap();
        assert_eq!(model, before);
        let empty = data.subset(&[]);
        assert!(
            compute_importance(&model, &gates, 0, &empty, 3, ImportanceTarget::Scores).is_err()
        );
    }

    #[test]
    fn tssi_roundtrip() {
        let m = acc(&[0.1, 0.5, 0.99]);
        let (task, back) = ImportanceMap::from_bytes(&m.to_bytes(6).unwrap()).unwrap();
        assert_eq!(task, 6);
        assert_eq!(back, m);
    }
}
