//! The three training stages and what they record.
//!
//! 1. [`train_teacher`]: prevalent and privileged backbones, fusion head and
//!    the T-Net, then frozen.
//! 2. [`align_teachers`]: modality adapters pulled toward the joint
//!    representation, yielding a [`TeacherPool`](crate::teacherpool::TeacherPool).
//! 3. [`train_student`]: prevalent-only student distilled from the pool.

mod adam;
mod align;
mod student;
mod teacher;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, TaskKind};
use crate::metrics::MetricReport;
use crate::models::{FusionKind, Module};
use crate::ot::SinkhornConfig;
use crate::rng::{self, StreamRng};
use crate::synthdata::{Dataset, Modality, Split};
use crate::tensor::{Gradients, Matrix, Tape, Var};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS};
pub use align::{align_teachers, AlignReport};
pub use student::{train_student, train_student_observed, Student, StudentRun};
pub use teacher::{train_teacher, Teacher, TeacherReport};

/// Which modality the student keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Student sees modality A (the weaker one); B is privileged.
    #[default]
    Sew,
    /// Student sees modality B; A is privileged.
    Wes,
}

impl Direction {
    /// `(prevalent, privileged)`.
    pub fn modalities(self) -> (Modality, Modality) {
        match self {
            Direction::Sew => (Modality::A, Modality::B),
            Direction::Wes => (Modality::B, Modality::A),
        }
    }
}

/// How the student is supervised beyond its own task loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    /// Task loss only.
    None,
    /// Pointwise cosine distance to the joint teacher's representation.
    Cosine,
    /// Pointwise squared error to the joint teacher's representation.
    Mse,
    /// KL between softened teacher and student outputs.
    Kl,
    /// OT + centroid against the joint teacher only.
    PkdotSingle,
    /// OT + centroid against the per-batch best teacher of the pool.
    #[default]
    MtPkdot,
}

impl Selector {
    pub const ALL: [Selector; 6] = [
        Selector::None,
        Selector::Cosine,
        Selector::Mse,
        Selector::Kl,
        Selector::PkdotSingle,
        Selector::MtPkdot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Selector::None => "none",
            Selector::Cosine => "cosine",
            Selector::Mse => "mse",
            Selector::Kl => "kl",
            Selector::PkdotSingle => "pkdot-single",
            Selector::MtPkdot => "mt-pkdot",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEpochs {
    pub teacher: usize,
    pub align: usize,
    pub student: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        Self {
            teacher: 100,
            align: 50,
            student: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRates {
    pub teacher: f64,
    pub align: f64,
    pub student: f64,
}

impl Default for StageRates {
    fn default() -> Self {
        Self {
            teacher: 1e-3,
            align: 1e-3,
            student: 1e-4,
        }
    }
}

/// Layer widths shared by the teacher, adapters, T-Net and student.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub backbone_hidden: usize,
    pub feature_dim: usize,
    pub fusion_hidden: usize,
    pub joint_dim: usize,
    pub adapter_bottleneck: usize,
    pub tnet_bottleneck: usize,
    pub fusion: FusionKind,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            backbone_hidden: 64,
            feature_dim: 32,
            fusion_hidden: 64,
            joint_dim: 64,
            adapter_bottleneck: 32,
            tnet_bottleneck: 32,
            fusion: FusionKind::Concat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub anchors: usize,
    pub epochs: StageEpochs,
    pub lr: StageRates,
    /// Epochs without validation improvement before a stage stops.
    pub patience: usize,
    pub weights: LossWeights,
    pub sinkhorn: SinkhornConfig,
    pub task: TaskKind,
    pub direction: Direction,
    pub selector: Selector,
    pub arch: ArchConfig,
    /// Backbones (0 = prevalent, 1 = privileged) that get an aligned teacher.
    pub aligned_backbones: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 128,
            anchors: 30,
            epochs: StageEpochs::default(),
            lr: StageRates::default(),
            patience: 15,
            weights: LossWeights::default(),
            sinkhorn: SinkhornConfig::default(),
            task: TaskKind::Classification { num_classes: 2 },
            direction: Direction::Sew,
            selector: Selector::MtPkdot,
            arch: ArchConfig::default(),
            aligned_backbones: vec![0, 1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.anchors == 0 || self.anchors > self.batch_size {
            return bad(format!(
                "anchors must lie in 1..={}, got {}",
                self.batch_size, self.anchors
            ));
        }
        for (stage, lr) in [
            ("teacher", self.lr.teacher),
            ("align", self.lr.align),
            ("student", self.lr.student),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{stage} learning rate must be positive, got {lr}"));
            }
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.sinkhorn.epsilon > 0.0 && self.sinkhorn.epsilon.is_finite()) || self.sinkhorn.max_iters == 0 {
            return bad("sinkhorn needs epsilon > 0 and max_iters >= 1".into());
        }
        let a = &self.arch;
        if [
            a.backbone_hidden,
            a.feature_dim,
            a.fusion_hidden,
            a.joint_dim,
            a.adapter_bottleneck,
            a.tnet_bottleneck,
        ]
        .contains(&0)
        {
            return bad("architecture widths must be at least 1".into());
        }
        if let Some(&i) = self.aligned_backbones.iter().find(|&&i| i > 1) {
            return bad(format!(
                "aligned backbone {i} does not exist (0 = prevalent, 1 = privileged)"
            ));
        }
        let mut seen = self.aligned_backbones.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.aligned_backbones.len() {
            return bad("aligned_backbones has duplicates".into());
        }
        self.weights.validate()?;
        self.task.validate()
    }

    /// Data-dependent checks.
    pub fn validate_for(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        if data.task() != self.task {
            return Err(Error::Config(format!(
                "config task {:?} does not match dataset task {:?}",
                self.task,
                data.task()
            )));
        }
        let n_train = data.indices(Split::Train).len();
        if n_train < self.batch_size {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {n_train} training samples",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::synthdata::sha256_hex(&json)
    }

    /// Hash of the settings that determine the teacher and the aligned pool;
    /// student-only settings are reset to their defaults first.
    pub fn upstream_hash(&self) -> String {
        let d = Self::default();
        let mut c = self.clone();
        c.anchors = d.anchors;
        c.weights = d.weights;
        c.sinkhorn = d.sinkhorn;
        c.selector = d.selector;
        c.epochs.student = d.epochs.student;
        c.lr.student = d.lr.student;
        c.hash()
    }

    pub(crate) fn init_rng(&self, stage: &str) -> StreamRng {
        rng::stream(self.seed, &format!("{}:{stage}", rng::INIT))
    }

    pub(crate) fn shuffle_rng(&self, stage: &str) -> StreamRng {
        rng::stream(self.seed, &format!("{}:{stage}", rng::SHUFFLE))
    }
}

/// Shuffled full-size batches over `0..n`; the remainder is dropped.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub task_loss: f64,
    pub ot_loss: Option<f64>,
    pub cen_loss: Option<f64>,
    pub total: Option<f64>,
    pub metric: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,split,task_loss,ot_loss,cen_loss,total,metric";

pub fn write_metrics_csv(records: &[EpochRecord], mut w: impl Write) -> std::io::Result<()> {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }
    writeln!(w, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.split.name(),
            r.task_loss,
            opt(r.ot_loss),
            opt(r.cen_loss),
            opt(r.total),
            opt(r.metric)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionHistogram {
    pub teachers: Vec<String>,
    pub counts: Vec<u64>,
    pub percentages: Vec<f64>,
}

/// Everything a student run produced, in the order it happened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub selector: Selector,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub stopped_early: bool,
    pub selection: Option<SelectionHistogram>,
    pub test: MetricReport,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn save(&self, outdir: &Path) -> Result<()> {
        std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
        let path = outdir.join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        let path = outdir.join("metrics.csv");
        let mut buf = Vec::new();
        write_metrics_csv(&self.epochs, &mut buf).map_err(|e| Error::io(&path, e))?;
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Tracks the best validation score (higher is better) and when to stop.
#[derive(Clone, Debug)]
pub(crate) struct EarlyStop {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since: usize,
}

impl EarlyStop {
    pub(crate) fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since: 0,
        }
    }

    /// Returns whether `score` is a new best.
    pub(crate) fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.since = 0;
            true
        } else {
            self.since += 1;
            false
        }
    }

    pub(crate) fn should_stop(&self) -> bool {
        self.since >= self.patience
    }

    pub(crate) fn best(&self) -> f64 {
        self.best
    }

    pub(crate) fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Task loss of fixed predictions, on a scratch tape.
pub(crate) fn eval_task_loss(predictions: &Matrix, targets: &Matrix, kind: TaskKind) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(predictions.clone());
    let l = crate::losses::task_loss(&mut tape, p, targets, kind)?;
    tape.scalar(l)
}

/// Put every parameter of `modules` on `tape` as trainable leaves, in order.
pub(crate) fn bind_trainable(tape: &mut Tape, modules: &[&dyn Module]) -> Vec<Vec<Var>> {
    modules.iter().map(|m| m.bind(tape, true)).collect()
}

/// Adam step over `modules`, whose parameters were bound as `vars`.
pub(crate) fn apply_adam(
    modules: &mut [&mut dyn Module],
    vars: &[Vec<Var>],
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let g: Vec<Matrix> = vars.iter().flatten().map(|&v| grads.wrt(v)).collect();
    let mut params: Vec<&mut Matrix> = modules.iter_mut().flat_map(|m| m.params_mut()).collect();
    adam_step(&mut params, &g, state, lr)
}

pub(crate) fn adam_for(modules: &[&dyn Module], prefix: &str) -> AdamState {
    let params: Vec<&Matrix> = modules.iter().flat_map(|m| m.params()).collect();
    AdamState::indexed(&params, prefix)
}

pub(crate) fn divergence(stage: &'static str, epoch: usize, lr: f64, err: Error) -> Error {
    match err {
        Error::NonFinite(detail) | Error::Numerical(detail) => Error::Divergence {
            stage,
            epoch,
            lr,
            detail,
        },
        other => other,
    }
}
