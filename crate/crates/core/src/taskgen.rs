//! Seeded synthetic classification streams.
//!
//! Every task labels latent Gaussian inputs `z` with a linear teacher,
//! `y = argmax(W*ᵀ z)`, and observes a transformed copy `x = T_k(z) + noise`.
//!
//! * similar family: one shared teacher; `T_k` rotates `z` by a small angle
//!   inside a fixed 2-D subspace, so the tasks share most of their structure.
//! * dissimilar family: every task has its own teacher and its own
//!   coordinate permutation, so nothing carries over between tasks.
//!
//! Heterogeneous streams interleave the two families in a seeded order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TssError};
use crate::tensor::{randn, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Similar,
    Dissimilar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Similar,
    Dissimilar,
    Heterogeneous,
}

impl std::str::FromStr for StreamKind {
    type Err = TssError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "similar" => Ok(StreamKind::Similar),
            "dissimilar" => Ok(StreamKind::Dissimilar),
            "heterogeneous" | "mixed" => Ok(StreamKind::Heterogeneous),
            other => Err(TssError::Config(format!(
                "unknown stream kind {other:?} (expected similar, dissimilar or heterogeneous)"
            ))),
        }
    }
}

impl std::fmt::Display for StreamKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StreamKind::Similar => "similar",
            StreamKind::Dissimilar => "dissimilar",
            StreamKind::Heterogeneous => "heterogeneous",
        })
    }
}

/// Sizes shared by every task of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskDims {
    pub input_dim: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise_std: f64,
    /// Upper bound on the per-task rotation of the similar family, in degrees.
    pub max_rotation_deg: f64,
}

impl Default for TaskDims {
    fn default() -> Self {
        Self {
            input_dim: 20,
            n_classes: 5,
            n_train: 500,
            n_val: 100,
            n_test: 200,
            noise_std: 0.1,
            max_rotation_deg: 30.0,
        }
    }
}

impl TaskDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(TssError::Config(
                "stream.dims.input_dim must be at least 2".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(TssError::Config(
                "stream.dims.n_classes must be at least 2".into(),
            ));
        }
        for (name, v) in [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
        ] {
            if v == 0 {
                return Err(TssError::Config(format!(
                    "stream.dims.{name} must be at least 1"
                )));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(TssError::Config(
                "stream.dims.noise_std must be finite and >= 0".into(),
            ));
        }
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(TssError::Config(
                "stream.dims.max_rotation_deg must lie in [0, 180]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub family: TaskFamily,
    pub dims: TaskDims,
    /// Seeds the teacher matrix; tasks with equal ids share a teacher.
    pub teacher_id: u64,
    /// Seeds the rotation plane (similar family only).
    pub subspace_id: u64,
    pub rotation_deg: f64,
    /// Seeds the input permutation (dissimilar family only).
    pub permutation_id: Option<u64>,
    /// Seeds the samples.
    pub seed: u64,
}

/// Labeled samples; row `i` of `x` has label `y[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Consecutive batches of at most `batch_size` rows, in data order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Dataset> + '_ {
        let n = self.len();
        (0..n.div_ceil(batch_size.max(1))).map(move |b| {
            let idx: Vec<usize> = (b * batch_size..((b + 1) * batch_size).min(n)).collect();
            self.subset(&idx)
        })
    }

    /// Writes `f0..f{d-1},label` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| TssError::Format(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        let mut header: Vec<String> = (0..self.x.cols()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(io)?;
        for (r, &y) in self.y.iter().enumerate() {
            let mut rec: Vec<String> = self.x.row(r).iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| TssError::io(path, e))
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.x.data() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.y {
            h.update((y as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in [&self.train, &self.val, &self.test] {
            h.update(d.digest());
        }
        hex::encode(h.finalize())
    }
}

/// Unit-norm-column teacher, `input_dim × n_classes`.
pub fn teacher(teacher_id: u64, dims: &TaskDims) -> Matrix {
    let mut rng = Rng::new(teacher_id).split(&[0x7465_6163]);
    let mut w = randn(&mut rng, dims.input_dim, dims.n_classes, 1.0);
    for c in 0..dims.n_classes {
        let norm = (0..dims.input_dim)
            .map(|r| w.get(r, c).powi(2))
            .sum::<f64>()
            .sqrt();
        for r in 0..dims.input_dim {
            w.set(r, c, w.get(r, c) / norm);
        }
    }
    w
}

/// Orthonormal pair spanning the rotation plane of a similar family.
fn rotation_plane(subspace_id: u64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = Rng::new(subspace_id).split(&[0x706c_616e]);
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut u: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    normalize(&mut u);
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, a)| *x -= dot * a);
    normalize(&mut v);
    (u, v)
}

impl TaskSpec {
    /// Materializes the task. Splits are taken from one pool of
    /// `n_train + n_val + n_test` draws, so they never share a sample.
    pub fn generate(&self) -> TaskData {
        let dims = &self.dims;
        let d = dims.input_dim;
        let w = teacher(self.teacher_id, dims);
        let plane = match self.family {
            TaskFamily::Similar => Some(rotation_plane(self.subspace_id, d)),
            TaskFamily::Dissimilar => None,
        };
        let perm = self
            .permutation_id
            .map(|id| Rng::new(id).split(&[0x7065_726d]).permutation(d));
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();

        let mut rng = Rng::new(self.seed).split(&[0x6461_7461]);
        let total = dims.n_train + dims.n_val + dims.n_test;
        let mut x = Matrix::zeros(total, d);
        let mut y = Vec::with_capacity(total);
        let mut z = vec![0.0; d];
        for r in 0..total {
            z.iter_mut().for_each(|v| *v = rng.normal());
            let mut label = 0;
            let mut best = f64::NEG_INFINITY;
            for c in 0..dims.n_classes {
                let s: f64 = (0..d).map(|i| w.get(i, c) * z[i]).sum();
                if s > best {
                    best = s;
                    label = c;
                }
            }
            y.push(label);

            let mut obs = z.clone();
            if let Some((u, v)) = &plane {
                let a: f64 = u.iter().zip(&z).map(|(p, q)| p * q).sum();
                let b: f64 = v.iter().zip(&z).map(|(p, q)| p * q).sum();
                let a2 = cos * a - sin * b;
                let b2 = sin * a + cos * b;
                for i in 0..d {
                    obs[i] += (a2 - a) * u[i] + (b2 - b) * v[i];
                }
            }
            if let Some(p) = &perm {
                obs = p.iter().map(|&j| obs[j]).collect();
            }
            for (i, o) in obs.iter().enumerate() {
                x.set(r, i, o + dims.noise_std * rng.normal());
            }
        }
        let all = Dataset { x, y };
        let idx: Vec<usize> = (0..total).collect();
        let (train_idx, rest) = idx.split_at(dims.n_train);
        let (val_idx, test_idx) = rest.split_at(dims.n_val);
        TaskData {
            train: all.subset(train_idx),
            val: all.subset(val_idx),
            test: all.subset(test_idx),
        }
    }
}

const SIMILAR: u64 = 1;
const DISSIMILAR: u64 = 2;
const ORDER: u64 = 3;

/// `n_tasks` tasks sharing one teacher and one rotation plane, with angles
/// drawn uniformly from `[0, max_rotation_deg]`.
pub fn make_similar_family(n_tasks: usize, base_seed: u64, dims: &TaskDims) -> Vec<TaskSpec> {
    let root = Rng::new(base_seed).split(&[SIMILAR]);
    let teacher_id = root.split(&[0]).seed();
    let subspace_id = root.split(&[1]).seed();
    let mut angles = root.split(&[2]);
    (0..n_tasks)
        .map(|k| TaskSpec {
            task_id: k,
            family: TaskFamily::Similar,
            dims: *dims,
            teacher_id,
            subspace_id,
            rotation_deg: angles.uniform() * dims.max_rotation_deg,
            permutation_id: None,
            seed: root.split(&[3, k as u64]).seed(),
        })
        .collect()
}

/// `n_tasks` tasks with independent teachers and input permutations.
pub fn make_dissimilar_family(n_tasks: usize, base_seed: u64, dims: &TaskDims) -> Vec<TaskSpec> {
    let root = Rng::new(base_seed).split(&[DISSIMILAR]);
    (0..n_tasks)
        .map(|k| {
            let k64 = k as u64;
            TaskSpec {
                task_id: k,
                family: TaskFamily::Dissimilar,
                dims: *dims,
                teacher_id: root.split(&[0, k64]).seed(),
                subspace_id: 0,
                rotation_deg: 0.0,
                permutation_id: Some(root.split(&[1, k64]).seed()),
                seed: root.split(&[3, k64]).seed(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub seed: u64,
    /// `order[i]` is the index, within the generated pool, of the `i`-th task.
    pub order: Vec<usize>,
    /// Tasks in training order; `tasks[i].task_id == i`.
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Stable identifier of the generated content.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("stream serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Builds a stream of `n_tasks` tasks. Heterogeneous streams hold
/// `n_tasks / 2` similar tasks and the rest dissimilar. The pool is shuffled
/// with a seeded permutation in every case.
pub fn make_stream(
    kind: StreamKind,
    n_tasks: usize,
    seed: u64,
    dims: &TaskDims,
) -> Result<TaskStream> {
    if n_tasks < 2 {
        return Err(TssError::Config(format!(
            "a stream needs at least 2 tasks, got {n_tasks}"
        )));
    }
    dims.validate()?;
    let pool = match kind {
        StreamKind::Similar => make_similar_family(n_tasks, seed, dims),
        StreamKind::Dissimilar => make_dissimilar_family(n_tasks, seed, dims),
        StreamKind::Heterogeneous => {
            let n_similar = n_tasks / 2;
            let mut pool = make_similar_family(n_similar, seed, dims);
            pool.extend(make_dissimilar_family(n_tasks - n_similar, seed, dims));
            pool
        }
    };
    let order = Rng::new(seed).split(&[ORDER]).permutation(pool.len());
    let tasks = order
        .iter()
        .enumerate()
        .map(|(i, &j)| TaskSpec {
            task_id: i,
            ..pool[j].clone()
        })
        .collect();
    Ok(TaskStream {
        kind,
        seed,
        order,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> TaskDims {
        TaskDims {
            n_train: 50,
            n_val: 10,
            n_test: 20,
            ..TaskDims::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let dims = small_dims();
        let a = make_stream(StreamKind::Heterogeneous, 4, 9, &dims).unwrap();
        let b = make_stream(StreamKind::Heterogeneous, 4, 9, &dims).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(x.generate().digest(), y.generate().digest());
        }
    }

    #[test]
    fn split_sizes() {
        let data = make_similar_family(1, 3, &small_dims())[0].generate();
        assert_eq!(data.train.len(), 50);
        assert_eq!(data.val.len(), 10);
        assert_eq!(data.test.len(), 20);
        assert_eq!(data.train.x.cols(), 20);
        assert!(data.train.y.iter().all(|&c| c < 5));
    }

    #[test]
    fn zero_rotation_leaves_inputs_unrotated() {
        let dims = TaskDims {
            noise_std: 0.0,
            ..small_dims()
        };
        let mut spec = make_similar_family(1, 3, &dims)[0].clone();
        spec.rotation_deg = 0.0;
        let data = spec.generate();
        // labels must be recoverable from the observed inputs through the teacher
        let w = teacher(spec.teacher_id, &dims);
        for r in 0..data.train.len() {
            let x = data.train.x.row(r);
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for c in 0..dims.n_classes {
                let s: f64 = (0..dims.input_dim).map(|i| w.get(i, c) * x[i]).sum();
                if s > best_s {
                    best_s = s;
                    best = c;
                }
            }
            assert_eq!(best, data.train.y[r]);
        }
    }

    #[test]
    fn similar_stream_has_only_similar_tasks() {
        let s = make_stream(StreamKind::Similar, 5, 1, &small_dims()).unwrap();
        assert!(s.tasks.iter().all(|t| t.family == TaskFamily::Similar));
        assert!(s
            .tasks
            .iter()
            .all(|t| (0.0..=30.0).contains(&t.rotation_deg)));
        let teacher = s.tasks[0].teacher_id;
        assert!(s.tasks.iter().all(|t| t.teacher_id == teacher));
    }

    #[test]
    fn heterogeneous_split_is_half_and_half() {
        let s = make_stream(StreamKind::Heterogeneous, 10, 4, &small_dims()).unwrap();
        let sim = s
            .tasks
            .iter()
            .filter(|t| t.family == TaskFamily::Similar)
            .count();
        assert_eq!(sim, 5);
        let s = make_stream(StreamKind::Heterogeneous, 7, 4, &small_dims()).unwrap();
        let sim = s
            .tasks
            .iter()
            .filter(|t| t.family == TaskFamily::Similar)
            .count();
        assert_eq!(sim, 3);
        for (i, t) in s.tasks.iter().enumerate() {
            assert_eq!(t.task_id, i);
        }
        let mut sorted = s.order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn dissimilar_teachers_are_distinct() {
        let dims = small_dims();
        let fam = make_dissimilar_family(6, 2, &dims);
        let digests: Vec<String> = fam
            .iter()
            .map(|t| {
                let w = teacher(t.teacher_id, &dims);
                let mut h = Sha256::new();
                w.data().iter().for_each(|v| h.update(v.to_le_bytes()));
                hex::encode(h.finalize())
            })
            .collect();
        for i in 0..digests.len() {
            for j in i + 1..digests.len() {
                assert_ne!(digests[i], digests[j]);
            }
        }
    }

    #[test]
    fn stream_needs_two_tasks() {
        assert!(make_stream(StreamKind::Similar, 1, 0, &small_dims()).is_err());
    }

    #[test]
    fn seeds_change_order() {
        let dims = small_dims();
        let mut differing = 0;
        for s in 0..20u64 {
            let a = make_stream(StreamKind::Heterogeneous, 10, 2 * s, &dims).unwrap();
            let b = make_stream(StreamKind::Heterogeneous, 10, 2 * s + 1, &dims).unwrap();
            if a.order != b.order {
                differing += 1;
            }
        }
        // two random permutations of 10 collide with probability 1/10!
        assert_eq!(differing, 20);
    }

    #[test]
    fn csv_export() {
        let data = make_dissimilar_family(1, 0, &small_dims())[0].generate();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        data.val.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("f0,f1,"));
        assert!(header.ends_with("f19,label"));
        assert_eq!(lines.count(), 10);
    }

    #[test]
    fn parse_stream_kind() {
        assert_eq!(
            "heterogeneous".parse::<StreamKind>().unwrap(),
            StreamKind::Heterogeneous
        );
        assert!("bogus".parse::<StreamKind>().is_err());
    }
}
