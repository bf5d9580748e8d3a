use serde::{Deserialize, Serialize};

use super::{adam_for, apply_adam, bind_trainable, divergence, make_batches, EarlyStop, Teacher, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{alignment_loss, task_loss, TaskKind};
use crate::models::{Activation, EncoderDecoder, Mlp, Module};
use crate::synthdata::{Dataset, Split};
use crate::teacherpool::{AlignedTeacher, TeacherPool};
use crate::tensor::{Matrix, Tape, Var};

use super::teacher::TeacherFeatures;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    /// Aligned backbone indices, in pool order.
    pub backbones: Vec<usize>,
    /// Mean per-sample cosine between adapter output and the joint
    /// representation on the training split, before and after alignment.
    pub pre_cosine: Vec<f64>,
    pub post_cosine: Vec<f64>,
    /// Alignment loss on the training split, before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Per-epoch training alignment loss (batch mean).
    pub train_align_loss: Vec<f64>,
    /// Per-epoch validation objective (alignment plus head losses).
    pub val_objective: Vec<f64>,
    pub best_epoch: usize,
}

const STAGE: &str = "align";

fn row_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean over rows of `cos(a_i, b_i)`.
pub fn mean_row_cosine(a: &Matrix, b: &Matrix) -> f64 {
    (0..a.rows()).map(|i| row_cosine(a.row(i), b.row(i))).sum::<f64>() / a.rows() as f64
}

fn cosines(aligned: &[AlignedTeacher], tf: &TeacherFeatures) -> Result<Vec<f64>> {
    aligned
        .iter()
        .map(|a| Ok(mean_row_cosine(&a.adapter.infer(&tf.backbone[a.backbone])?, &tf.joint)))
        .collect()
}

/// Alignment loss plus head task losses for fixed inputs.
fn objective(
    tape: &mut Tape,
    aligned: &[AlignedTeacher],
    vars: &[Vec<Var>],
    tf: &TeacherFeatures,
    targets: &Matrix,
    kind: TaskKind,
) -> Result<(Var, Var)> {
    let mut adapted = Vec::with_capacity(aligned.len());
    let mut head_losses = Vec::with_capacity(aligned.len());
    for (a, v) in aligned.iter().zip(vars) {
        let split = a.adapter.param_count();
        let x = tape.constant(tf.backbone[a.backbone].clone());
        let z = a.adapter.forward(tape, &v[..split], x)?;
        let det = tape.detach(z);
        let preds = a.head.forward(tape, &v[split..], det)?;
        head_losses.push(task_loss(tape, preds, targets, kind)?);
        adapted.push(z);
    }
    let align = alignment_loss(tape, &adapted, &tf.joint)?;
    let mut total = align;
    for h in head_losses {
        total = tape.add(total, h)?;
    }
    Ok((align, total))
}

fn eval_objective(
    aligned: &[AlignedTeacher],
    tf: &TeacherFeatures,
    targets: &Matrix,
    kind: TaskKind,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = aligned.iter().map(|a| a.bind(&mut tape, false)).collect();
    let (align, total) = objective(&mut tape, aligned, &vars, tf, targets, kind)?;
    Ok((tape.scalar(align)?, tape.scalar(total)?))
}

/// Trains one modality adapter (and its scoring head) per configured
/// backbone against the frozen joint representation, and returns the pool.
pub fn align_teachers(teacher: Teacher, config: &TrainConfig, data: &Dataset) -> Result<(TeacherPool, AlignReport)> {
    config.validate_for(data)?;
    let kind = config.task;
    let a = &config.arch;
    let mut init = config.init_rng(STAGE);
    let mut shuffle = config.shuffle_rng(STAGE);
    let (train, val) = (data.view(Split::Train), data.view(Split::Val));
    let tr = teacher.features(teacher.inputs(&train))?;
    let va = teacher.features(teacher.inputs(&val))?;
    let joint = teacher.fusion.joint_dim();

    let mut aligned = config
        .aligned_backbones
        .iter()
        .map(|&i| {
            Ok(AlignedTeacher {
                backbone: i,
                adapter: EncoderDecoder::new(
                    teacher.backbones[i].output_dim(),
                    a.adapter_bottleneck,
                    joint,
                    &mut init,
                )?,
                head: Mlp::new(
                    &[joint, kind.output_dim()],
                    Activation::Identity,
                    Activation::Identity,
                    &mut init,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = AlignReport {
        backbones: config.aligned_backbones.clone(),
        pre_cosine: cosines(&aligned, &tr)?,
        post_cosine: Vec::new(),
        initial_loss: 0.0,
        final_loss: 0.0,
        train_align_loss: Vec::new(),
        val_objective: Vec::new(),
        best_epoch: 0,
    };
    if aligned.is_empty() {
        return Ok((TeacherPool::new(teacher, aligned, kind)?, report));
    }
    report.initial_loss = eval_objective(&aligned, &tr, &train.targets, kind)?.0;

    let lr = config.lr.align;
    let mut adam = {
        let mods: Vec<&dyn Module> = aligned.iter().map(|t| t as &dyn Module).collect();
        adam_for(&mods, STAGE)
    };
    let mut stop = EarlyStop::new(config.patience);
    let mut best = aligned.clone();
    stop.observe(0, -eval_objective(&aligned, &va, &val.targets, kind)?.1);
    for epoch in 1..=config.epochs.align {
        let batches = make_batches(train.len(), config.batch_size, &mut shuffle);
        let mut align_sum = 0.0;
        for rows in &batches {
            let batch = tr.select_rows(rows);
            let targets = train.targets.select_rows(rows);
            let mut step = || -> Result<f64> {
                let mut tape = Tape::new();
                let vars = {
                    let mods: Vec<&dyn Module> = aligned.iter().map(|t| t as &dyn Module).collect();
                    bind_trainable(&mut tape, &mods)
                };
                let (align, total) = objective(&mut tape, &aligned, &vars, &batch, &targets, kind)?;
                let value = tape.scalar(total)?;
                if !value.is_finite() {
                    return Err(Error::NonFinite("alignment objective".into()));
                }
                let align_value = tape.scalar(align)?;
                let grads = tape.backward(total)?;
                let mut mods: Vec<&mut dyn Module> = aligned.iter_mut().map(|t| t as &mut dyn Module).collect();
                apply_adam(&mut mods, &vars, &grads, &mut adam, lr)?;
                Ok(align_value)
            };
            align_sum += step().map_err(|e| divergence(STAGE, epoch, lr, e))?;
        }
        report.train_align_loss.push(align_sum / batches.len() as f64);
        let val_total = eval_objective(&aligned, &va, &val.targets, kind)?.1;
        report.val_objective.push(val_total);
        if !val_total.is_finite() {
            return Err(Error::Divergence {
                stage: STAGE,
                epoch,
                lr,
                detail: "validation objective is not finite".into(),
            });
        }
        if stop.observe(epoch, -val_total) {
            best = aligned.clone();
        }
        if stop.should_stop() {
            break;
        }
    }
    aligned = best;
    report.best_epoch = stop.best_epoch();
    report.final_loss = eval_objective(&aligned, &tr, &train.targets, kind)?.0;
    report.post_cosine = cosines(&aligned, &tr)?;
    Ok((TeacherPool::new(teacher, aligned, kind)?, report))
}
