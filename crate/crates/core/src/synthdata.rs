//! Linear-Gaussian two-modality data with a tanh link.
//!
//! Modality A sees only the shared latent `z_s`; modality B sees `z_s` and a
//! privileged-only latent `z_p`. The target mixes both through
//! `(1 − ρ)·w_s·z_s + ρ·w_p·z_p`, so `ρ` sets how much of the signal is out
//! of A's reach.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::TaskKind;
use crate::rng::{self, StreamRng};
use crate::tensor::Matrix;

const MANIFEST_VERSION: u32 = 1;
const SPLIT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub n_samples: usize,
    pub shared_dim: usize,
    pub privileged_dim: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub noise_a: f64,
    pub noise_b: f64,
    pub privileged_informativeness: f64,
    pub task: TaskKind,
    /// Fraction of samples whose modality-A row is pure noise.
    pub unreliability: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("generator spec: {msg}")));
        if [self.shared_dim, self.privileged_dim, self.dim_a, self.dim_b].contains(&0) {
            return bad("all dimensions must be at least 1");
        }
        if !(self.noise_a >= 0.0 && self.noise_a.is_finite() && self.noise_b >= 0.0 && self.noise_b.is_finite()) {
            return bad("noise levels must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.privileged_informativeness) {
            return bad("privileged_informativeness must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.unreliability) {
            return bad("unreliability must lie in [0, 1)");
        }
        self.task.validate()?;
        let sizes = split_sizes(self.n_samples);
        if sizes.contains(&0) {
            return bad("too few samples for non-empty train/val/test splits");
        }
        if let TaskKind::Classification { num_classes } = self.task {
            if self.n_samples < 3 * num_classes {
                return bad("too few samples per class");
            }
        }
        Ok(())
    }
}

/// The configuration the acceptance experiments run on.
pub fn standard_config(seed: u64, task: TaskKind) -> GenSpec {
    GenSpec {
        n_samples: 6000,
        shared_dim: 4,
        privileged_dim: 3,
        dim_a: 20,
        dim_b: 16,
        noise_a: 0.3,
        noise_b: 0.2,
        privileged_informativeness: 0.5,
        task,
        unreliability: 0.1,
        seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> f64 {
        match self {
            Split::Train => 0.0,
            Split::Val => 1.0,
            Split::Test => 2.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        Split::ALL.into_iter().find(|s| s.code() == c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    A,
    B,
}

/// Rows of one split, gathered.
#[derive(Clone, Debug)]
pub struct SplitView {
    pub indices: Vec<usize>,
    pub raw_a: Matrix,
    pub raw_b: Matrix,
    pub targets: Matrix,
}

impl SplitView {
    pub fn modality(&self, m: Modality) -> &Matrix {
        match m {
            Modality::A => &self.raw_a,
            Modality::B => &self.raw_b,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    spec: GenSpec,
    raw_a: Matrix,
    raw_b: Matrix,
    /// n×outputs for regression, n×1 class indices for classification.
    targets: Matrix,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn spec(&self) -> &GenSpec {
        &self.spec
    }

    pub fn task(&self) -> TaskKind {
        self.spec.task
    }

    pub fn raw_a(&self) -> &Matrix {
        &self.raw_a
    }

    pub fn raw_b(&self) -> &Matrix {
        &self.raw_b
    }

    pub fn modality(&self, m: Modality) -> &Matrix {
        match m {
            Modality::A => &self.raw_a,
            Modality::B => &self.raw_b,
        }
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn view(&self, split: Split) -> SplitView {
        let indices = self.indices(split);
        SplitView {
            raw_a: self.raw_a.select_rows(&indices),
            raw_b: self.raw_b.select_rows(&indices),
            targets: self.targets.select_rows(&indices),
            indices,
        }
    }

    /// Writes `raw_a.csv`, `raw_b.csv`, `targets.csv`, `splits.csv` and a
    /// `manifest.json` carrying the `GenSpec` and a SHA-256 per file.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let split_col = Matrix::column(&self.splits.iter().map(|s| s.code()).collect::<Vec<_>>());
        let mut files = Vec::new();
        for (name, m) in self.arrays(&split_col) {
            let mut bytes = Vec::new();
            m.write_csv(&mut bytes).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(name);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            files.push(FileEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            spec: self.spec.clone(),
            files,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn import(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Parse {
                what: "dataset manifest".into(),
                detail: format!("unsupported version {}", manifest.version),
            });
        }
        manifest.spec.validate()?;
        let load = |name: &str| -> Result<Matrix> {
            let entry = manifest
                .files
                .iter()
                .find(|f| f.name == name)
                .ok_or_else(|| Error::Parse {
                    what: "dataset manifest".into(),
                    detail: format!("no entry for {name}"),
                })?;
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(Error::Parse {
                    what: name.to_string(),
                    detail: "checksum mismatch".into(),
                });
            }
            let m = Matrix::read_csv(bytes.as_slice())?;
            if m.shape() != (entry.rows, entry.cols) {
                return Err(Error::Parse {
                    what: name.to_string(),
                    detail: format!(
                        "shape {:?} does not match manifest {:?}",
                        m.shape(),
                        (entry.rows, entry.cols)
                    ),
                });
            }
            Ok(m)
        };
        let raw_a = load("raw_a.csv")?;
        let raw_b = load("raw_b.csv")?;
        let targets = load("targets.csv")?;
        let split_col = load("splits.csv")?;
        let splits = split_col
            .as_slice()
            .iter()
            .map(|&c| {
                Split::from_code(c).ok_or_else(|| Error::Parse {
                    what: "splits.csv".into(),
                    detail: format!("unknown split code {c}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = manifest.spec.n_samples;
        if [raw_a.rows(), raw_b.rows(), targets.rows(), splits.len()]
            .iter()
            .any(|&r| r != n)
        {
            return Err(Error::Parse {
                what: "dataset".into(),
                detail: format!("row counts disagree with n_samples = {n}"),
            });
        }
        Ok(Dataset {
            spec: manifest.spec,
            raw_a,
            raw_b,
            targets,
            splits,
        })
    }

    fn arrays<'a>(&'a self, split_col: &'a Matrix) -> [(&'static str, &'a Matrix); 4] {
        [
            ("raw_a.csv", &self.raw_a),
            ("raw_b.csv", &self.raw_b),
            ("targets.csv", &self.targets),
            ("splits.csv", split_col),
        ]
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    version: u32,
    spec: GenSpec,
    files: Vec<FileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEntry {
    name: String,
    rows: usize,
    cols: usize,
    sha256: String,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn gaussian(rng: &mut StreamRng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn unit_vector(rng: &mut StreamRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn split_sizes(n: usize) -> [usize; 3] {
    let train = (n as f64 * SPLIT_FRACTIONS[0]).round() as usize;
    let val = (n as f64 * SPLIT_FRACTIONS[1]).round() as usize;
    [train, val, n.saturating_sub(train + val)]
}

/// Walks `order` and hands each sample to the split furthest behind its
/// quota, which keeps every prefix (hence every class block) proportional.
fn assign_splits(order: &[usize], n: usize) -> Vec<Split> {
    let sizes = split_sizes(n);
    let mut given = [0usize; 3];
    let mut out = vec![Split::Train; n];
    for (pos, &i) in order.iter().enumerate() {
        let s = (0..3)
            .filter(|&s| given[s] < sizes[s])
            .max_by(|&x, &y| {
                let dx = sizes[x] as f64 * (pos + 1) as f64 / n as f64 - given[x] as f64;
                let dy = sizes[y] as f64 * (pos + 1) as f64 / n as f64 - given[y] as f64;
                dx.total_cmp(&dy).then(y.cmp(&x))
            })
            .expect("split quotas cover every sample");
        given[s] += 1;
        out[i] = Split::ALL[s];
    }
    out
}

pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::DATA);
    let n = spec.n_samples;
    let (ds, dp) = (spec.shared_dim, spec.privileged_dim);
    let rho = spec.privileged_informativeness;

    // Mixing matrices scaled so each clean feature has unit variance.
    let mix_a = gaussian(&mut rng, ds, spec.dim_a, 1.0 / (ds as f64).sqrt());
    let mix_b = gaussian(&mut rng, ds + dp, spec.dim_b, 1.0 / ((ds + dp) as f64).sqrt());
    let outputs = match spec.task {
        TaskKind::Regression { outputs } => outputs,
        TaskKind::Classification { .. } => 1,
    };
    let weights: Vec<(Vec<f64>, Vec<f64>)> = (0..outputs)
        .map(|_| (unit_vector(&mut rng, ds), unit_vector(&mut rng, dp)))
        .collect();

    let zs = gaussian(&mut rng, n, ds, 1.0);
    let zp = gaussian(&mut rng, n, dp, 1.0);
    let z = Matrix::hconcat(&[&zs, &zp])?;
    let noise_a = gaussian(&mut rng, n, spec.dim_a, spec.noise_a);
    let noise_b = gaussian(&mut rng, n, spec.dim_b, spec.noise_b);
    let mut raw_a = zs.matmul(&mix_a)?.zip_map(&noise_a, |x, e| x + e)?;
    let raw_b = z.matmul(&mix_b)?.zip_map(&noise_b, |x, e| x + e)?;

    let score = Matrix::from_fn(n, outputs, |i, d| {
        let (ws, wp) = &weights[d];
        let s: f64 = zs.row(i).iter().zip(ws).map(|(a, b)| a * b).sum();
        let p: f64 = zp.row(i).iter().zip(wp).map(|(a, b)| a * b).sum();
        ((1.0 - rho) * s + rho * p).tanh()
    });

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let unreliable = (spec.unreliability * n as f64).round() as usize;
    let std_a = (1.0 + spec.noise_a * spec.noise_a).sqrt();
    for &i in &order[..unreliable] {
        for j in 0..spec.dim_a {
            raw_a.set(i, j, std_a * rng.sample::<f64, _>(StandardNormal));
        }
    }

    let (targets, classes) = match spec.task {
        TaskKind::Regression { .. } => (score, None),
        TaskKind::Classification { num_classes } => {
            let labels = quantile_bins(score.as_slice(), num_classes);
            let targets = Matrix::column(&labels.iter().map(|&c| c as f64).collect::<Vec<_>>());
            (targets, Some(labels))
        }
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    if let Some(labels) = &classes {
        order.sort_by_key(|&i| labels[i]);
    }
    let splits = assign_splits(&order, n);

    Ok(Dataset {
        spec: spec.clone(),
        raw_a,
        raw_b,
        targets,
        splits,
    })
}

/// Equal-mass bins; ties in value fall in the same bin.
fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..bins).map(|j| sorted[j * values.len() / bins]).collect();
    values
        .iter()
        .map(|v| cuts.iter().filter(|&&c| *v >= c).count())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: TaskKind, seed: u64) -> GenSpec {
        GenSpec {
            n_samples: 400,
            ..standard_config(seed, task)
        }
    }

    #[test]
    fn standard_splits_are_70_15_15() {
        let d = generate(&standard_config(3, TaskKind::Classification { num_classes: 2 })).unwrap();
        let sizes: Vec<usize> = Split::ALL.iter().map(|&s| d.indices(s).len()).collect();
        assert_eq!(sizes, vec![4200, 900, 900]);
        assert_eq!(d.raw_a().shape(), (6000, 20));
        assert_eq!(d.raw_b().shape(), (6000, 16));
    }

    #[test]
    fn class_balance_per_split() {
        let d = generate(&standard_config(5, TaskKind::Classification { num_classes: 2 })).unwrap();
        for s in Split::ALL {
            let v = d.view(s);
            let ones = v.targets.as_slice().iter().filter(|&&c| c == 1.0).count() as f64;
            let frac = ones / v.len() as f64;
            assert!((frac - 0.5).abs() <= 0.1, "{s:?}: {frac}");
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = small(TaskKind::Regression { outputs: 2 }, 11);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = generate(&GenSpec {
            seed: 12,
            ..spec.clone()
        })
        .unwrap();
        assert_ne!(generate(&spec).unwrap().raw_a(), other.raw_a());
    }

    #[test]
    fn regression_targets_in_range() {
        let d = generate(&small(TaskKind::Regression { outputs: 2 }, 1)).unwrap();
        assert_eq!(d.targets().cols(), 2);
        assert!(d.targets().as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = small(TaskKind::Regression { outputs: 1 }, 0);
        for bad in [
            GenSpec {
                dim_a: 0,
                ..base.clone()
            },
            GenSpec {
                unreliability: 1.0,
                ..base.clone()
            },
            GenSpec {
                privileged_informativeness: 1.5,
                ..base.clone()
            },
            GenSpec {
                noise_b: -0.1,
                ..base.clone()
            },
            GenSpec {
                n_samples: 2,
                ..base.clone()
            },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn export_import_round_trip() {
        let d = generate(&small(TaskKind::Classification { num_classes: 3 }, 9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.export(dir.path()).unwrap();
        assert_eq!(Dataset::import(dir.path()).unwrap(), d);

        let path = dir.path().join("targets.csv");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("0\n");
        fs::write(&path, text).unwrap();
        assert!(matches!(Dataset::import(dir.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn quantile_bins_balance() {
        let v: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let b = quantile_bins(&v, 3);
        assert_eq!(b, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }
}
