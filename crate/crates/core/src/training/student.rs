use std::time::Instant;

use super::{adam_for, apply_adam, bind_trainable, divergence, eval_task_loss, make_batches, EarlyStop};
use super::{EpochRecord, RunRecord, Selector, Teacher, TrainConfig};
use crate::error::{Error, Result};
use crate::features::FeatureBatch;
use crate::losses::{centroid_loss, pointwise_kd_loss, student_loss, task_loss, PointwiseKind};
use crate::metrics::compute_metrics;
use crate::models::{Activation, FusionHead, Mlp, Module, TNet};
use crate::ot::ot_loss;
use crate::similarity::{cosine_similarity, cosine_similarity_matrix, reduce_on_tape, reduce_to_anchors};
use crate::similarity::{select_anchors, SimilaritySource};
use crate::synthdata::{Dataset, Modality, Split};
use crate::teacherpool::{PoolOutputs, TeacherPool};
use crate::tensor::{Matrix, Tape, Var};

/// Prevalent-only student: its own backbone, plus T-Net features computed
/// from the same input through frozen copies of the teacher's prevalent
/// backbone and T-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub backbone: Mlp,
    pub fusion: FusionHead,
    pub prevalent_encoder: Mlp,
    pub tnet: TNet,
    pub modality: Modality,
}

impl Student {
    pub fn new(config: &TrainConfig, teacher: &Teacher, rng: &mut impl rand::Rng) -> Result<Self> {
        let a = &config.arch;
        let input = teacher.backbones[0].input_dim();
        let backbone = Mlp::new(
            &[input, a.backbone_hidden, a.feature_dim],
            Activation::Tanh,
            Activation::Tanh,
            rng,
        )?;
        let fusion = FusionHead::new(
            a.fusion,
            &[a.feature_dim, teacher.tnet.output_dim()],
            a.fusion_hidden,
            a.joint_dim,
            config.task.output_dim(),
            rng,
        )?;
        Ok(Self {
            backbone,
            fusion,
            prevalent_encoder: teacher.backbones[0].clone(),
            tnet: teacher.tnet.clone(),
            modality: teacher.direction.modalities().0,
        })
    }

    pub fn hallucinate(&self, raw: &Matrix) -> Result<Matrix> {
        self.tnet.infer(&self.prevalent_encoder.infer(raw)?)
    }

    /// `(joint, predictions)` given precomputed hallucinated features.
    pub fn infer_with(&self, raw: &Matrix, hallucinated: &Matrix) -> Result<(Matrix, Matrix)> {
        let f = self.backbone.infer(raw)?;
        self.fusion.infer(&[&f, hallucinated])
    }

    /// `(joint, predictions)` from the prevalent modality alone.
    pub fn infer(&self, raw: &Matrix) -> Result<(Matrix, Matrix)> {
        self.infer_with(raw, &self.hallucinate(raw)?)
    }

    /// Hash of the parameters that train.
    pub fn trainable_hash(&self) -> String {
        crate::models::hash_matrices(self.backbone.params().into_iter().chain(self.fusion.params()))
    }

    /// Hash of the frozen copies taken from the teacher.
    pub fn frozen_hash(&self) -> String {
        crate::models::hash_matrices(self.prevalent_encoder.params().into_iter().chain(self.tnet.params()))
    }
}

impl Module for Student {
    fn params(&self) -> Vec<&Matrix> {
        let mut p = self.backbone.params();
        p.extend(self.fusion.params());
        p.extend(self.prevalent_encoder.params());
        p.extend(self.tnet.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.backbone.params_mut();
        p.extend(self.fusion.params_mut());
        p.extend(self.prevalent_encoder.params_mut());
        p.extend(self.tnet.params_mut());
        p
    }
}

#[derive(Clone, Debug)]
pub struct StudentRun {
    pub student: Student,
    pub record: RunRecord,
}

const STAGE: &str = "student";

struct BatchLosses {
    task: f64,
    distill: f64,
    cen: f64,
    total: f64,
}

/// Distillation terms `(distill, centroid)` for one batch. Both are zero
/// constants when the selector has nothing to distill.
#[allow(clippy::too_many_arguments)]
fn distill_terms(
    tape: &mut Tape,
    config: &TrainConfig,
    pool: &mut TeacherPool,
    cache: Option<&PoolOutputs>,
    rows: &[usize],
    targets: &Matrix,
    joint: Var,
    preds: Var,
) -> Result<(Var, Var)> {
    let zero = |tape: &mut Tape| tape.constant(Matrix::scalar(0.0));
    let Some(cache) = cache else {
        let z = zero(tape);
        return Ok((z, z));
    };
    let outputs = cache.select_rows(rows);
    let selection = match config.selector {
        Selector::MtPkdot => pool.select_from(&outputs, targets)?,
        _ => pool.select_joint_from(&outputs, targets)?,
    };
    let teacher = &selection.features.values;
    match config.selector {
        Selector::None => unreachable!("no cache without distillation"),
        Selector::Cosine | Selector::Mse => {
            let kind = if config.selector == Selector::Cosine {
                PointwiseKind::Cosine
            } else {
                PointwiseKind::Mse
            };
            let d = pointwise_kd_loss(tape, teacher, joint, kind)?;
            Ok((d, zero(tape)))
        }
        Selector::Kl => {
            let d = if config.task.is_classification() {
                pointwise_kd_loss(tape, &selection.predictions, preds, PointwiseKind::Kl)?
            } else {
                pointwise_kd_loss(tape, teacher, joint, PointwiseKind::Kl)?
            };
            Ok((d, zero(tape)))
        }
        Selector::PkdotSingle | Selector::MtPkdot => {
            let s_teacher = cosine_similarity_matrix(
                &FeatureBatch::new(selection.features.source, teacher.clone()),
                SimilaritySource::Teacher,
            )?;
            let anchors = select_anchors(&s_teacher, config.anchors)?;
            let reduced_teacher = reduce_to_anchors(&s_teacher, &anchors)?;
            let s_student = cosine_similarity(tape, joint)?;
            let (reduced_student, cols) = reduce_on_tape(tape, s_student, &anchors)?;
            let (ot, _) = ot_loss(tape, &reduced_teacher, reduced_student, Some(&cols), &config.sinkhorn)?;
            let cen = centroid_loss(tape, teacher, joint)?;
            Ok((ot, cen))
        }
    }
}

/// Trains a student from the frozen pool with the configured selector and
/// returns the best-validation-metric weights with the run record.
///
/// Selection counts in `pool` are reset at the start and afterwards hold
/// exactly one entry per training batch of this run.
pub fn train_student(pool: &mut TeacherPool, config: &TrainConfig, data: &Dataset) -> Result<StudentRun> {
    train_student_observed(pool, config, data, &mut |_, _| Ok(()))
}

/// [`train_student`], calling `observe` with the freshly initialized student
/// (epoch 0) and again after every training epoch.
pub fn train_student_observed(
    pool: &mut TeacherPool,
    config: &TrainConfig,
    data: &Dataset,
    observe: &mut dyn FnMut(usize, &Student) -> Result<()>,
) -> Result<StudentRun> {
    let clock = Instant::now();
    config.validate_for(data)?;
    if pool.task() != config.task {
        return Err(Error::Config("teacher pool was trained for a different task".into()));
    }
    if pool.feature_dim() != config.arch.joint_dim {
        return Err(Error::Config(format!(
            "teacher representations have dimension {} but the student's joint dimension is {}",
            pool.feature_dim(),
            config.arch.joint_dim
        )));
    }
    if pool.teacher().direction != config.direction {
        return Err(Error::Config(
            "teacher pool was trained for the other distillation direction".into(),
        ));
    }
    let kind = config.task;
    let lr = config.lr.student;
    let mut init = config.init_rng(STAGE);
    let mut shuffle = config.shuffle_rng(STAGE);
    let mut student = Student::new(config, pool.teacher(), &mut init)?;

    let (train, val, test) = (data.view(Split::Train), data.view(Split::Val), data.view(Split::Test));
    let m = student.modality;
    let (x_train, x_val) = (train.modality(m), val.modality(m));
    let h_train = student.hallucinate(x_train)?;
    let h_val = student.hallucinate(x_val)?;
    let cache = match config.selector {
        Selector::None => None,
        _ => Some(pool.outputs(pool.teacher().inputs(&train))?),
    };
    pool.reset_counts();

    let mut adam = adam_for(&[&student.backbone, &student.fusion], STAGE);
    let mut stop = EarlyStop::new(config.patience);
    let mut best = (student.backbone.clone(), student.fusion.clone());
    let mut epochs = Vec::new();
    observe(0, &student)?;
    for epoch in 1..=config.epochs.student {
        let batches = make_batches(train.len(), config.batch_size, &mut shuffle);
        let mut sums = BatchLosses {
            task: 0.0,
            distill: 0.0,
            cen: 0.0,
            total: 0.0,
        };
        for rows in &batches {
            let mut step = || -> Result<BatchLosses> {
                let mut tape = Tape::new();
                let vars = bind_trainable(&mut tape, &[&student.backbone, &student.fusion]);
                let x = tape.constant(x_train.select_rows(rows));
                let h = tape.constant(h_train.select_rows(rows));
                let f = student.backbone.forward(&mut tape, &vars[0], x)?;
                let (joint, preds) = student.fusion.forward(&mut tape, &vars[1], &[f, h])?;
                let targets = train.targets.select_rows(rows);
                let task = task_loss(&mut tape, preds, &targets, kind)?;
                let (distill, cen) =
                    distill_terms(&mut tape, config, pool, cache.as_ref(), rows, &targets, joint, preds)?;
                let total = student_loss(&mut tape, task, distill, cen, &config.weights)?;
                let out = BatchLosses {
                    task: tape.scalar(task)?,
                    distill: tape.scalar(distill)?,
                    cen: tape.scalar(cen)?,
                    total: tape.scalar(total)?,
                };
                if !out.total.is_finite() {
                    return Err(Error::NonFinite("student objective".into()));
                }
                let grads = tape.backward(total)?;
                apply_adam(
                    &mut [&mut student.backbone, &mut student.fusion],
                    &vars,
                    &grads,
                    &mut adam,
                    lr,
                )?;
                Ok(out)
            };
            let b = step().map_err(|e| divergence(STAGE, epoch, lr, e))?;
            sums.task += b.task;
            sums.distill += b.distill;
            sums.cen += b.cen;
            sums.total += b.total;
        }
        let nb = batches.len() as f64;
        let distills = config.selector != Selector::None;
        epochs.push(EpochRecord {
            epoch,
            split: Split::Train,
            task_loss: sums.task / nb,
            ot_loss: distills.then_some(sums.distill / nb),
            cen_loss: matches!(config.selector, Selector::PkdotSingle | Selector::MtPkdot).then_some(sums.cen / nb),
            total: Some(sums.total / nb),
            metric: None,
        });
        observe(epoch, &student)?;
        let (_, val_preds) = student.infer_with(x_val, &h_val)?;
        let val_metric = compute_metrics(&val_preds, &val.targets, kind)?.value();
        epochs.push(EpochRecord {
            epoch,
            split: Split::Val,
            task_loss: eval_task_loss(&val_preds, &val.targets, kind)?,
            ot_loss: None,
            cen_loss: None,
            total: None,
            metric: Some(val_metric),
        });
        if !val_metric.is_finite() {
            return Err(Error::Divergence {
                stage: STAGE,
                epoch,
                lr,
                detail: "validation metric is not finite".into(),
            });
        }
        if stop.observe(epoch, val_metric) {
            best = (student.backbone.clone(), student.fusion.clone());
        }
        if stop.should_stop() {
            break;
        }
    }
    let stopped_early = epochs.last().is_some_and(|r| r.epoch < config.epochs.student);
    (student.backbone, student.fusion) = best;
    let (_, test_preds) = student.infer(test.modality(m))?;
    let record = RunRecord {
        config_hash: config.hash(),
        selector: config.selector,
        seed: config.seed,
        epochs,
        best_epoch: stop.best_epoch(),
        best_val_metric: stop.best(),
        stopped_early,
        selection: (config.selector != Selector::None).then(|| pool.histogram()),
        test: compute_metrics(&test_preds, &test.targets, kind)?,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
    };
    Ok(StudentRun { student, record })
}
