//! Least-squares oracles on generated data: how much of the target each
//! modality can explain, and how the generator's knobs move that.

use otdistill_core::losses::TaskKind;
use otdistill_core::synthdata::{generate, standard_config, Dataset, GenSpec, Split};
use otdistill_core::Matrix;
use otdistill_oracles as oracle;

const CLASSIFICATION: TaskKind = TaskKind::Classification { num_classes: 2 };
const REGRESSION: TaskKind = TaskKind::Regression { outputs: 2 };

fn rows(m: &Matrix) -> oracle::Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Design rows for one split: modality A alone, or A next to B.
fn design(data: &Dataset, split: Split, multimodal: bool) -> oracle::Rows {
    let v = data.view(split);
    if multimodal {
        rows(&Matrix::hconcat(&[&v.raw_a, &v.raw_b]).unwrap())
    } else {
        rows(&v.raw_a)
    }
}

fn target_column(data: &Dataset, split: Split, j: usize) -> Vec<f64> {
    let t = data.view(split).targets;
    (0..t.rows()).map(|i| t.get(i, j)).collect()
}

/// Test-split R², averaged over outputs, of a least-squares fit on train.
fn oracle_r2(data: &Dataset, multimodal: bool) -> f64 {
    let (train, test) = (
        design(data, Split::Train, multimodal),
        design(data, Split::Test, multimodal),
    );
    let outputs = data.targets().cols();
    (0..outputs)
        .map(|j| {
            let w = oracle::least_squares(&train, &target_column(data, Split::Train, j));
            oracle::r_squared(&oracle::predict(&w, &test), &target_column(data, Split::Test, j))
        })
        .sum::<f64>()
        / outputs as f64
}

/// Test-split accuracy of a least-squares fit to the binary label,
/// thresholded at one half.
fn oracle_accuracy(data: &Dataset, multimodal: bool) -> f64 {
    let w = oracle::least_squares(
        &design(data, Split::Train, multimodal),
        &target_column(data, Split::Train, 0),
    );
    let pred = oracle::predict(&w, &design(data, Split::Test, multimodal));
    let labels = target_column(data, Split::Test, 0);
    let hits = pred
        .iter()
        .zip(&labels)
        .filter(|(p, y)| ((**p >= 0.5) as u8 as f64) == **y)
        .count();
    hits as f64 / labels.len() as f64
}

fn mean_over_seeds(seeds: impl Iterator<Item = u64>, f: impl Fn(u64) -> f64) -> f64 {
    let v: Vec<f64> = seeds.map(f).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn spec(seed: u64, task: TaskKind, rho: f64) -> GenSpec {
    GenSpec {
        privileged_informativeness: rho,
        ..standard_config(seed, task)
    }
}

#[test]
fn without_privileged_signal_modality_a_explains_as_much() {
    let gap = mean_over_seeds(0..50, |seed| {
        let d = generate(&GenSpec {
            n_samples: 2000,
            unreliability: 0.0,
            ..spec(seed, REGRESSION, 0.0)
        })
        .unwrap();
        oracle_r2(&d, true) - oracle_r2(&d, false)
    });
    assert!(gap.abs() <= 0.02, "multimodal minus prevalent R² = {gap}");
}

#[test]
fn fully_privileged_noise_free_target_is_invisible_to_a() {
    let r2 = mean_over_seeds(0..5, |seed| {
        let d = generate(&GenSpec {
            noise_a: 0.0,
            noise_b: 0.0,
            ..spec(seed, REGRESSION, 1.0)
        })
        .unwrap();
        let prevalent = oracle_r2(&d, false);
        assert!(
            oracle_r2(&d, true) > 0.9,
            "modality B should explain a function of its own latent"
        );
        prevalent
    });
    assert!(r2.abs() <= 0.02, "prevalent-only R² = {r2}");
}

#[test]
fn standard_config_leaves_room_for_distillation() {
    let (multi, prevalent) = (
        mean_over_seeds(1..6, |s| {
            oracle_accuracy(&generate(&standard_config(s, CLASSIFICATION)).unwrap(), true)
        }),
        mean_over_seeds(1..6, |s| {
            oracle_accuracy(&generate(&standard_config(s, CLASSIFICATION)).unwrap(), false)
        }),
    );
    assert!(
        multi - prevalent >= 0.03,
        "multimodal {multi:.4} vs prevalent {prevalent:.4}"
    );
}

#[test]
fn prevalent_oracle_never_gains_from_more_privileged_signal() {
    let rhos = [0.0, 0.25, 0.5, 0.75, 1.0];
    for (task, metric) in [
        (REGRESSION, oracle_r2 as fn(&Dataset, bool) -> f64),
        (CLASSIFICATION, oracle_accuracy),
    ] {
        let means: Vec<f64> = rhos
            .iter()
            .map(|&rho| mean_over_seeds(1..6, |s| metric(&generate(&spec(s, task, rho)).unwrap(), false)))
            .collect();
        for w in means.windows(2) {
            assert!(w[1] <= w[0] + 0.01, "{task:?}: {means:?}");
        }
    }
}

#[test]
fn unreliable_prevalent_rows_hurt_the_prevalent_oracle() {
    for task in [REGRESSION, CLASSIFICATION] {
        let metric = |u: f64| {
            mean_over_seeds(1..6, |s| {
                let d = generate(&GenSpec {
                    unreliability: u,
                    ..standard_config(s, task)
                })
                .unwrap();
                match task {
                    TaskKind::Regression { .. } => oracle_r2(&d, false),
                    TaskKind::Classification { .. } => oracle_accuracy(&d, false),
                }
            })
        };
        let (clean, degraded) = (metric(0.0), metric(0.5));
        assert!(degraded < clean, "{task:?}: u=0 {clean:.4}, u=0.5 {degraded:.4}");
    }
}
