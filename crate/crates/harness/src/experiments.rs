//! Pipeline stages and the multi-method experiments built from them.
//!
//! Output layout under `--outdir`:
//!
//! ```text
//! summary.csv  runs.csv  ablate_grid.csv  ablate_centroid.csv
//! seed_<s>/data/                      exported dataset (gen)
//! seed_<s>/teacher/  teacher.json     teacher checkpoint and report
//! seed_<s>/pool/     align.json       aligned pool checkpoint and report
//! seed_<s>/<method>/run.json          one student (or upper-bound) run
//! seed_<s>/<method>/metrics.csv
//! seed_<s>/<method>/checkpoint/       student weights (train-student)
//! seed_<s>/ablate/<cell>/run.json
//! seed_<s>/sim/sim_epoch_<n>.csv      dump-sim
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use otdistill_core::checkpoint::{load_pool, load_student, load_teacher, save_pool, save_student, save_teacher};
use otdistill_core::losses::{LossWeights, TaskKind};
use otdistill_core::metrics::{compute_metrics, MetricReport};
use otdistill_core::similarity::{cosine_similarity_matrix, select_anchors, SimilaritySource};
use otdistill_core::synthdata::{Dataset, Split};
use otdistill_core::teacherpool::TeacherPool;
use otdistill_core::training::{
    align_teachers, train_student, train_student_observed, train_teacher, write_metrics_csv, AlignReport, RunRecord,
    Selector, TeacherReport, TrainConfig,
};
use otdistill_core::{FeatureBatch, FeatureSource, Matrix};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::workers::parallel_map;

/// Rows of `summary.csv`, in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Student trained on its task loss only.
    LowerBound,
    /// The multimodal teacher itself, which sees both modalities at test time.
    UpperBound,
    PkdCosine,
    PkdMse,
    PkdKl,
    PkdotSingle,
    MtPkdot,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::LowerBound,
        Method::UpperBound,
        Method::PkdCosine,
        Method::PkdMse,
        Method::PkdKl,
        Method::PkdotSingle,
        Method::MtPkdot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::LowerBound => "lower-bound",
            Method::UpperBound => "upper-bound",
            Method::PkdCosine => "pkd-cosine",
            Method::PkdMse => "pkd-mse",
            Method::PkdKl => "pkd-kl",
            Method::PkdotSingle => "pkdot-single",
            Method::MtPkdot => "mt-pkdot",
        }
    }

    /// Student selector, or `None` for the teacher upper bound.
    pub fn selector(self) -> Option<Selector> {
        match self {
            Method::LowerBound => Some(Selector::None),
            Method::UpperBound => None,
            Method::PkdCosine => Some(Selector::Cosine),
            Method::PkdMse => Some(Selector::Mse),
            Method::PkdKl => Some(Selector::Kl),
            Method::PkdotSingle => Some(Selector::PkdotSingle),
            Method::MtPkdot => Some(Selector::MtPkdot),
        }
    }
}

pub fn metric_name(task: TaskKind) -> &'static str {
    if task.is_classification() {
        "accuracy"
    } else {
        "ccc"
    }
}

pub fn seed_dir(outdir: &Path, seed: u64) -> PathBuf {
    outdir.join(format!("seed_{seed}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let json = serde_json::to_string_pretty(value).map_err(otdistill_core::Error::from)?;
    fs::write(path, json).map_err(|e| HarnessError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn require_checkpoint(dir: &Path) -> Result<()> {
    if dir.join("checkpoint.json").is_file() {
        Ok(())
    } else {
        Err(HarnessError::MissingCheckpoint(dir.to_path_buf()))
    }
}

fn save_teacher_report(dir: &Path, report: &TeacherReport) -> Result<()> {
    write_json(&dir.join("teacher.json"), report)?;
    let mut buf = Vec::new();
    write_metrics_csv(&report.epochs, &mut buf).map_err(|e| HarnessError::io(dir, e))?;
    write_text(&dir.join("metrics.csv"), &String::from_utf8_lossy(&buf))
}

// ---- single stages (CLI) ----

pub fn gen_stage(exp: &ExperimentConfig, seed: u64, outdir: &Path) -> Result<PathBuf> {
    let dir = seed_dir(outdir, seed).join("data");
    exp.dataset(seed)?.export(&dir)?;
    Ok(dir)
}

pub fn teacher_stage(exp: &ExperimentConfig, seed: u64, outdir: &Path) -> Result<TeacherReport> {
    let config = exp.train_config(seed);
    let data = exp.dataset(seed)?;
    let (teacher, report) = train_teacher(&config, &data)?;
    let dir = seed_dir(outdir, seed);
    save_teacher(&dir.join("teacher"), &config, &teacher)?;
    save_teacher_report(&dir.join("teacher"), &report)?;
    Ok(report)
}

pub fn align_stage(exp: &ExperimentConfig, seed: u64, outdir: &Path) -> Result<AlignReport> {
    let config = exp.train_config(seed);
    let data = exp.dataset(seed)?;
    let dir = seed_dir(outdir, seed);
    require_checkpoint(&dir.join("teacher"))?;
    let teacher = load_teacher(&dir.join("teacher"), &config, &data)?;
    let (pool, report) = align_teachers(teacher, &config, &data)?;
    save_pool(&dir.join("pool"), &config, &pool)?;
    write_json(&dir.join("pool").join("align.json"), &report)?;
    Ok(report)
}

fn load_pool_checked(dir: &Path, config: &TrainConfig, data: &Dataset) -> Result<TeacherPool> {
    require_checkpoint(&dir.join("pool").join("teacher"))?;
    require_checkpoint(&dir.join("pool").join("aligned"))?;
    Ok(load_pool(&dir.join("pool"), config, data)?)
}

pub fn student_stage(exp: &ExperimentConfig, seed: u64, outdir: &Path) -> Result<RunRecord> {
    let config = exp.train_config(seed);
    let data = exp.dataset(seed)?;
    let dir = seed_dir(outdir, seed);
    let mut pool = load_pool_checked(&dir, &config, &data)?;
    let run = train_student(&mut pool, &config, &data)?;
    let run_dir = dir.join(config.selector.name());
    run.record.save(&run_dir)?;
    save_student(&run_dir.join("checkpoint"), &config, &run.student)?;
    Ok(run.record)
}

/// Recomputes the test metric of a saved student, returned next to the one
/// stored in its `run.json`.
pub fn eval_stage(exp: &ExperimentConfig, seed: u64, outdir: &Path) -> Result<(MetricReport, MetricReport)> {
    let config = exp.train_config(seed);
    let data = exp.dataset(seed)?;
    let run_dir = seed_dir(outdir, seed).join(config.selector.name());
    require_checkpoint(&run_dir.join("checkpoint"))?;
    let student = load_student(&run_dir.join("checkpoint"), &config, &data)?;
    let stored = RunRecord::load(&run_dir.join("run.json"))?;
    let test = data.view(Split::Test);
    let (_, preds) = student.infer(test.modality(student.modality))?;
    let report = compute_metrics(&preds, &test.targets, config.task)?;
    write_json(&run_dir.join("eval.json"), &report)?;
    Ok((report, stored.test))
}

// ---- multi-method experiments ----

/// Teacher and aligned pool for one seed, shared by every student cell.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub config: TrainConfig,
    pub data: Dataset,
    pub pool: TeacherPool,
    pub teacher: TeacherReport,
    pub align: AlignReport,
}

pub fn prepare(exp: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let config = exp.train_config(seed);
    let data = exp.dataset(seed)?;
    let (teacher, teacher_report) = train_teacher(&config, &data)?;
    info!(
        "seed {seed}: teacher test {:.4} (best epoch {})",
        teacher_report.test.value(),
        teacher_report.best_epoch
    );
    let (pool, align) = align_teachers(teacher, &config, &data)?;
    info!(
        "seed {seed}: alignment cosine {:?} -> {:?}",
        align.pre_cosine, align.post_cosine
    );
    Ok(Prepared {
        seed,
        config,
        data,
        pool,
        teacher: teacher_report,
        align,
    })
}

pub fn prepare_all(exp: &ExperimentConfig, seeds: &[u64], workers: usize) -> Result<Vec<Prepared>> {
    parallel_map(seeds, workers, |&s| prepare(exp, s))
}

/// One (method, seed) result.
#[derive(Clone, Debug)]
pub struct Cell {
    pub method: Method,
    pub seed: u64,
    pub metric: f64,
    /// Student run; `None` for the upper bound.
    pub record: Option<RunRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub metric: &'static str,
    pub n_seeds: usize,
    pub mean: f64,
    pub std: f64,
}

pub const SUMMARY_HEADER: &str = "method,metric,n_seeds,mean,std";
pub const RUNS_HEADER: &str = "method,seed,metric,value";

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains one student on a copy of the prepared pool.
pub fn run_student(p: &Prepared, config: &TrainConfig) -> Result<RunRecord> {
    let mut pool = p.pool.clone();
    let run = train_student(&mut pool, config, &p.data)?;
    info!(
        "seed {}: {} test {:.4} (best epoch {}, {:.1}s)",
        p.seed,
        config.selector.name(),
        run.record.test.value(),
        run.record.best_epoch,
        run.record.wall_clock_secs
    );
    Ok(run.record)
}

fn run_cell(p: &Prepared, method: Method, outdir: Option<&Path>) -> Result<Cell> {
    let dir = outdir.map(|o| seed_dir(o, p.seed).join(method.name()));
    let Some(selector) = method.selector() else {
        if let Some(dir) = &dir {
            save_teacher_report(dir, &p.teacher)?;
        }
        return Ok(Cell {
            method,
            seed: p.seed,
            metric: p.teacher.test.value(),
            record: None,
        });
    };
    let config = TrainConfig {
        selector,
        ..p.config.clone()
    };
    let record = run_student(p, &config)?;
    if let Some(dir) = &dir {
        record.save(dir)?;
    }
    Ok(Cell {
        method,
        seed: p.seed,
        metric: record.test.value(),
        record: Some(record),
    })
}

#[derive(Clone, Debug)]
pub struct CompareOutcome {
    pub cells: Vec<Cell>,
    pub summary: Vec<SummaryRow>,
}

impl CompareOutcome {
    pub fn row(&self, method: Method) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method.name())
    }

    pub fn values(&self, method: Method) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.method == method)
            .map(|c| c.metric)
            .collect()
    }
}

/// Runs every method on every prepared seed. Cells run in parallel; the
/// summary is aggregated after all of them finish.
pub fn compare_prepared(
    prepared: &[Prepared],
    methods: &[Method],
    outdir: Option<&Path>,
    workers: usize,
) -> Result<CompareOutcome> {
    let jobs: Vec<(usize, Method)> = (0..prepared.len())
        .flat_map(|i| methods.iter().map(move |&m| (i, m)))
        .collect();
    let cells = parallel_map(&jobs, workers, |&(i, m)| run_cell(&prepared[i], m, outdir))?;
    let metric = prepared.first().map_or("accuracy", |p| metric_name(p.config.task));
    let summary = methods
        .iter()
        .map(|&m| {
            let values: Vec<f64> = cells.iter().filter(|c| c.method == m).map(|c| c.metric).collect();
            let (mean, std) = mean_std(&values);
            SummaryRow {
                method: m.name().to_string(),
                metric,
                n_seeds: values.len(),
                mean,
                std,
            }
        })
        .collect();
    let outcome = CompareOutcome { cells, summary };
    if let Some(outdir) = outdir {
        write_text(&outdir.join("summary.csv"), &summary_csv(&outcome.summary))?;
        write_text(&outdir.join("runs.csv"), &runs_csv(&outcome.cells, metric))?;
    }
    Ok(outcome)
}

pub fn compare(
    exp: &ExperimentConfig,
    seeds: &[u64],
    methods: &[Method],
    outdir: Option<&Path>,
    workers: usize,
) -> Result<CompareOutcome> {
    let prepared = prepare_all(exp, seeds, workers)?;
    compare_prepared(&prepared, methods, outdir, workers)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.method, r.metric, r.n_seeds, r.mean, r.std);
    }
    s
}

fn runs_csv(cells: &[Cell], metric: &str) -> String {
    let mut s = format!("{RUNS_HEADER}\n");
    for c in cells {
        let _ = writeln!(s, "{},{},{metric},{}", c.method.name(), c.seed, c.metric);
    }
    s
}

// ---- ablations ----

pub const ABLATE_BATCHES: [usize; 3] = [32, 64, 128];
pub const ABLATE_ANCHORS: [usize; 3] = [10, 20, 30];
pub const GRID_HEADER: &str = "batch_size,anchors,n_seeds,mean,std";
pub const CENTROID_HEADER: &str = "centroid,gamma,n_seeds,mean,std";

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub batch_size: usize,
    pub anchors: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidRow {
    pub centroid: bool,
    pub gamma: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AblateOutcome {
    pub grid: Vec<GridRow>,
    pub centroid: Vec<CentroidRow>,
}

#[derive(Clone, Copy, Debug)]
enum AblateCell {
    Grid { batch_size: usize, anchors: usize },
    Centroid { on: bool },
}

impl AblateCell {
    fn dir_name(self) -> String {
        match self {
            AblateCell::Grid { batch_size, anchors } => format!("b{batch_size}_a{anchors}"),
            AblateCell::Centroid { on } => format!("centroid_{}", if on { "on" } else { "off" }),
        }
    }

    /// MT-PKDOT config for this cell. Teachers are shared across cells, so
    /// the batch size varies for the student stage only.
    fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = TrainConfig {
            selector: Selector::MtPkdot,
            ..base.clone()
        };
        match self {
            AblateCell::Grid { batch_size, anchors } => {
                c.batch_size = batch_size;
                c.anchors = anchors;
            }
            AblateCell::Centroid { on } => {
                c.weights.gamma = centroid_gamma(base, on);
            }
        }
        c
    }
}

/// `γ` for centroid on/off: the configured weight (or the default when it is
/// zero) and 0.
fn centroid_gamma(base: &TrainConfig, on: bool) -> f64 {
    match (on, base.weights.gamma) {
        (false, _) => 0.0,
        (true, g) if g > 0.0 => g,
        (true, _) => LossWeights::default().gamma,
    }
}

pub fn ablate_prepared(prepared: &[Prepared], outdir: Option<&Path>, workers: usize) -> Result<AblateOutcome> {
    let mut cells: Vec<AblateCell> = ABLATE_BATCHES
        .iter()
        .flat_map(|&b| {
            ABLATE_ANCHORS.iter().map(move |&a| AblateCell::Grid {
                batch_size: b,
                anchors: a,
            })
        })
        .collect();
    cells.extend([AblateCell::Centroid { on: true }, AblateCell::Centroid { on: false }]);
    let jobs: Vec<(usize, AblateCell)> = (0..prepared.len())
        .flat_map(|i| cells.iter().map(move |&c| (i, c)))
        .collect();
    let results = parallel_map(&jobs, workers, |&(i, cell)| {
        let p = &prepared[i];
        let record = run_student(p, &cell.config(&p.config))?;
        if let Some(o) = outdir {
            record.save(&seed_dir(o, p.seed).join("ablate").join(cell.dir_name()))?;
        }
        Ok(record.test.value())
    })?;
    let values_of = |k: usize| -> Vec<f64> { (0..prepared.len()).map(|i| results[i * cells.len() + k]).collect() };
    let base = prepared.first().map(|p| p.config.clone()).unwrap_or_default();
    let mut outcome = AblateOutcome {
        grid: Vec::new(),
        centroid: Vec::new(),
    };
    for (k, cell) in cells.iter().enumerate() {
        match *cell {
            AblateCell::Grid { batch_size, anchors } => outcome.grid.push(GridRow {
                batch_size,
                anchors,
                values: values_of(k),
            }),
            AblateCell::Centroid { on } => outcome.centroid.push(CentroidRow {
                centroid: on,
                gamma: centroid_gamma(&base, on),
                values: values_of(k),
            }),
        }
    }
    if let Some(o) = outdir {
        let mut grid = format!("{GRID_HEADER}\n");
        for r in &outcome.grid {
            let (m, s) = mean_std(&r.values);
            let _ = writeln!(grid, "{},{},{},{m},{s}", r.batch_size, r.anchors, r.values.len());
        }
        write_text(&o.join("ablate_grid.csv"), &grid)?;
        let mut cen = format!("{CENTROID_HEADER}\n");
        for r in &outcome.centroid {
            let (m, s) = mean_std(&r.values);
            let on = if r.centroid { "on" } else { "off" };
            let _ = writeln!(cen, "{on},{},{},{m},{s}", r.gamma, r.values.len());
        }
        write_text(&o.join("ablate_centroid.csv"), &cen)?;
    }
    Ok(outcome)
}

// ---- similarity dumps ----

/// Trains a student with the configured selector and writes, for a fixed
/// probe batch (the first `batch_size` validation samples), the teacher's
/// joint similarity matrix (`sim_teacher.csv`), the anchors chosen on it
/// (`anchors.csv`) and the student's joint similarity matrix after every
/// epoch (`sim_epoch_<n>.csv`, epoch 0 = initialization).
pub fn dump_sim(p: &Prepared, outdir: &Path) -> Result<usize> {
    let dir = seed_dir(outdir, p.seed).join("sim");
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let val = p.data.view(Split::Val);
    let rows: Vec<usize> = (0..p.config.batch_size.min(val.len())).collect();
    let probe = val
        .modality(p.pool.teacher().direction.modalities().0)
        .select_rows(&rows);

    let inputs = p.pool.teacher().inputs(&val);
    let teacher_joint = p.pool.teacher().features(inputs)?.joint.select_rows(&rows);
    let teacher_sim = cosine_similarity_matrix(
        &FeatureBatch::new(FeatureSource::Joint, teacher_joint),
        SimilaritySource::Teacher,
    )?;
    let anchors = select_anchors(&teacher_sim, p.config.anchors.min(rows.len()))?;
    teacher_sim.values().save_csv(&dir.join("sim_teacher.csv"))?;
    let anchor_col = Matrix::column(&anchors.iter().map(|&a| a as f64).collect::<Vec<_>>());
    anchor_col.save_csv(&dir.join("anchors.csv"))?;

    let mut pool = p.pool.clone();
    let mut written = 0;
    train_student_observed(&mut pool, &p.config, &p.data, &mut |epoch, student| {
        let (joint, _) = student.infer(&probe)?;
        let sim = cosine_similarity_matrix(
            &FeatureBatch::new(FeatureSource::Student, joint),
            SimilaritySource::Student,
        )?;
        sim.values().save_csv(&dir.join(format!("sim_epoch_{epoch}.csv")))?;
        written += 1;
        Ok(())
    })?;
    Ok(written)
}
