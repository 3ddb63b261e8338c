//! Linear-probe oracles for the synthetic task families: a softmax
//! regression trained on one task and scored on another.

use tss_core::taskgen::{make_dissimilar_family, make_similar_family, Dataset, TaskDims, TaskSpec};

fn dims(n_test: usize) -> TaskDims {
    TaskDims {
        n_train: 1000,
        n_test,
        ..TaskDims::default()
    }
}

/// Full-batch gradient descent on mean cross-entropy. Returns `d × C`
/// weights followed by a bias row.
fn fit_probe(data: &Dataset, n_classes: usize) -> Vec<Vec<f64>> {
    let d = data.x.cols();
    let n = data.len() as f64;
    let mut w = vec![vec![0.0; n_classes]; d + 1];
    for _ in 0..300 {
        let mut grad = vec![vec![0.0; n_classes]; d + 1];
        for (i, &label) in data.y.iter().enumerate() {
            let x = data.x.row(i);
            let p = softmax(&logits(&w, x));
            for c in 0..n_classes {
                let g = p[c] - f64::from(u8::from(c == label));
                for (k, xk) in x.iter().enumerate() {
                    grad[k][c] += g * xk / n;
                }
                grad[d][c] += g / n;
            }
        }
        for (wr, gr) in w.iter_mut().zip(&grad) {
            for (a, g) in wr.iter_mut().zip(gr) {
                *a -= 0.5 * g;
            }
        }
    }
    w
}

fn logits(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..w[0].len())
        .map(|c| {
            w[d][c]
                + x.iter()
                    .enumerate()
                    .map(|(k, xk)| xk * w[k][c])
                    .sum::<f64>()
        })
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn probe_accuracy(w: &[Vec<f64>], data: &Dataset) -> f64 {
    let hits = data
        .y
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let z = logits(w, data.x.row(i));
            let best = (0..z.len()).fold(0, |b, c| if z[c] > z[b] { c } else { b });
            best == label
        })
        .count();
    hits as f64 / data.len() as f64
}

fn with_angle(spec: &TaskSpec, deg: f64) -> TaskSpec {
    TaskSpec {
        rotation_deg: deg,
        ..spec.clone()
    }
}

#[test]
fn similar_family_transfers_across_small_rotations() {
    let dims = dims(1000);
    let chance = 1.0 / dims.n_classes as f64;
    for seed in 0..3 {
        let base = &make_similar_family(2, seed, &dims)[0];
        let source = with_angle(base, 0.0).generate();
        let target = TaskSpec {
            seed: base.seed ^ 0x5eed,
            ..with_angle(base, 5.0)
        }
        .generate();
        let w = fit_probe(&source.train, dims.n_classes);
        let acc = probe_accuracy(&w, &target.test);
        assert!(
            acc >= 2.0 * chance,
            "seed {seed}: cross-task accuracy {acc}"
        );
    }
}

#[test]
fn dissimilar_family_does_not_transfer() {
    let dims = dims(4000);
    let chance = 1.0 / dims.n_classes as f64;
    for seed in 0..3 {
        let tasks = make_dissimilar_family(2, seed, &dims);
        let (a, b) = (tasks[0].generate(), tasks[1].generate());
        let w = fit_probe(&a.train, dims.n_classes);
        let own = probe_accuracy(&w, &a.test);
        let cross = probe_accuracy(&w, &b.test);
        assert!(
            own >= 2.0 * chance,
            "seed {seed}: probe failed to fit its own task ({own})"
        );
        assert!(
            (cross - chance).abs() <= 0.05,
            "seed {seed}: cross-task accuracy {cross} vs chance {chance}"
        );
    }
}

#[test]
fn labels_are_near_uniform() {
    let dims = TaskDims::default();
    let uniform = 1.0 / dims.n_classes as f64;
    let specs = make_similar_family(3, 11, &dims)
        .into_iter()
        .chain(make_dissimilar_family(3, 11, &dims));
    for spec in specs {
        let data = spec.generate();
        let n = data.train.len();
        assert!(n >= 500);
        for c in 0..dims.n_classes {
            let frac = data.train.y.iter().filter(|&&y| y == c).count() as f64 / n as f64;
            assert!(
                (frac - uniform).abs() <= 0.10,
                "{:?} task {}: class {c} has fraction {frac}",
                spec.family,
                spec.task_id
            );
        }
    }
}
