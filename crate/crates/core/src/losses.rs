//! Scalar training objectives, all recorded on a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

/// Floor on the CCC denominator so constant, equal-mean inputs stay finite.
pub const CCC_STABILIZER: f64 = 1e-8;

/// Weights of the student objective `α·task + β·ot + γ·centroid`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {w:?}"
            )));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// `outputs` continuous targets, scored by CCC.
    Regression {
        outputs: usize,
    },
    Classification {
        num_classes: usize,
    },
}

impl TaskKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskKind::Classification { num_classes } if num_classes < 2 => {
                Err(Error::Config("classification needs at least 2 classes".into()))
            }
            TaskKind::Regression { outputs: 0 } => Err(Error::Config("regression needs outputs".into())),
            _ => Ok(()),
        }
    }

    /// Width of a prediction head for this task.
    pub fn output_dim(&self) -> usize {
        match *self {
            TaskKind::Regression { outputs } => outputs,
            TaskKind::Classification { num_classes } => num_classes,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

/// Sum over backbones of the batch-mean cosine distance to the joint
/// representation. The joint side is detached.
pub fn alignment_loss(tape: &mut Tape, adapted: &[Var], joint: &Matrix) -> Result<Var> {
    if adapted.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let j = tape.constant(joint.clone());
    let mut total: Option<Var> = None;
    for &f in adapted {
        if tape.value(f).shape() != joint.shape() {
            return Err(Error::Dimension {
                op: "alignment_loss",
                left: tape.value(f).shape(),
                right: joint.shape(),
            });
        }
        let term = cosine_distance(tape, f, j)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one backbone"))
}

/// Batch mean of `1 − cos(a_i, b_i)`.
fn cosine_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let prod = tape.mul(a, b)?;
    let dots = tape.sum_cols(prod);
    let na = tape.rowwise_l2norm(a)?;
    let nb = tape.rowwise_l2norm(b)?;
    let denom = tape.mul(na, nb)?;
    let cos = tape.div(dots, denom)?;
    let mean_cos = tape.mean(cos);
    let neg = tape.scale(mean_cos, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Class indices from a `b×1` target column.
pub fn class_indices(targets: &Matrix, num_classes: usize) -> Result<Vec<usize>> {
    if targets.cols() != 1 {
        return Err(Error::contract(format!(
            "class targets must be b×1, got {}x{}",
            targets.rows(),
            targets.cols()
        )));
    }
    targets
        .as_slice()
        .iter()
        .map(|&t| {
            let c = t as usize;
            if t < 0.0 || t.fract() != 0.0 || c >= num_classes {
                Err(Error::contract(format!("invalid class label {t}")))
            } else {
                Ok(c)
            }
        })
        .collect()
}

fn one_hot(labels: &[usize], num_classes: usize) -> Matrix {
    Matrix::from_fn(labels.len(), num_classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 })
}

/// `1 − CCC` averaged over output columns (regression) or mean cross-entropy
/// over log-softmax of logits (classification).
pub fn task_loss(tape: &mut Tape, predictions: Var, targets: &Matrix, kind: TaskKind) -> Result<Var> {
    let p = tape.value(predictions);
    match kind {
        TaskKind::Regression { .. } => {
            if p.shape() != targets.shape() {
                return Err(Error::Dimension {
                    op: "task_loss",
                    left: p.shape(),
                    right: targets.shape(),
                });
            }
            if p.rows() < 2 {
                return Err(Error::contract("CCC needs at least 2 samples"));
            }
            let ccc = ccc_on_tape(tape, predictions, targets)?;
            let m = tape.mean(ccc);
            let neg = tape.scale(m, -1.0);
            Ok(tape.add_scalar(neg, 1.0))
        }
        TaskKind::Classification { num_classes } => {
            if p.cols() != num_classes {
                return Err(Error::Dimension {
                    op: "task_loss",
                    left: p.shape(),
                    right: (p.rows(), num_classes),
                });
            }
            if targets.rows() != p.rows() {
                return Err(Error::Dimension {
                    op: "task_loss",
                    left: p.shape(),
                    right: targets.shape(),
                });
            }
            let labels = class_indices(targets, num_classes)?;
            let y = tape.constant(one_hot(&labels, num_classes));
            let logp = tape.log_softmax_rows(predictions);
            let picked = tape.mul(y, logp)?;
            let per_sample = tape.sum_cols(picked);
            let m = tape.mean(per_sample);
            Ok(tape.scale(m, -1.0))
        }
    }
}

/// Per-column CCC as a `1×d` row.
fn ccc_on_tape(tape: &mut Tape, predictions: Var, targets: &Matrix) -> Result<Var> {
    let t = tape.constant(targets.clone());
    let mp = tape.mean_rows(predictions);
    let mt = tape.mean_rows(t);
    let pc = tape.sub(predictions, mp)?;
    let tc = tape.sub(t, mt)?;
    let pp = tape.mul(pc, pc)?;
    let vp = tape.mean_rows(pp);
    let tt = tape.mul(tc, tc)?;
    let vt = tape.mean_rows(tt);
    let pt = tape.mul(pc, tc)?;
    let cov = tape.mean_rows(pt);
    let num = tape.scale(cov, 2.0);
    let dm = tape.sub(mp, mt)?;
    let dm2 = tape.mul(dm, dm)?;
    let v = tape.add(vp, vt)?;
    let den = tape.add(v, dm2)?;
    let den = tape.clamp_min(den, CCC_STABILIZER);
    tape.div(num, den)
}

/// Squared distance between the batch means of teacher (detached) and student.
pub fn centroid_loss(tape: &mut Tape, teacher: &Matrix, student: Var) -> Result<Var> {
    let s = tape.value(student);
    if s.shape() != teacher.shape() {
        return Err(Error::Dimension {
            op: "centroid_loss",
            left: teacher.shape(),
            right: s.shape(),
        });
    }
    let t = tape.constant(teacher.column_means());
    let ms = tape.mean_rows(student);
    let d = tape.sub(t, ms)?;
    let d2 = tape.mul(d, d)?;
    Ok(tape.sum(d2))
}

/// `α·task + β·ot + γ·centroid`.
pub fn student_loss(tape: &mut Tape, task: Var, ot: Var, cen: Var, w: &LossWeights) -> Result<Var> {
    for (name, v) in [("task", task), ("ot", ot), ("centroid", cen)] {
        let x = tape.scalar(v)?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    let a = tape.scale(task, w.alpha);
    let b = tape.scale(ot, w.beta);
    let c = tape.scale(cen, w.gamma);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Point-to-point distillation losses used by the baseline methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointwiseKind {
    /// Batch mean of `1 − cos(teacher_i, student_i)`.
    Cosine,
    /// Mean squared difference.
    Mse,
    /// Batch mean of `KL(softmax(teacher_i) ‖ softmax(student_i))`.
    Kl,
}

pub fn pointwise_kd_loss(tape: &mut Tape, teacher: &Matrix, student: Var, kind: PointwiseKind) -> Result<Var> {
    let s = tape.value(student);
    if s.shape() != teacher.shape() {
        return Err(Error::Dimension {
            op: "pointwise_kd_loss",
            left: teacher.shape(),
            right: s.shape(),
        });
    }
    let t = tape.constant(teacher.clone());
    match kind {
        PointwiseKind::Cosine => cosine_distance(tape, student, t),
        PointwiseKind::Mse => {
            let d = tape.sub(t, student)?;
            let d2 = tape.mul(d, d)?;
            Ok(tape.mean(d2))
        }
        PointwiseKind::Kl => {
            let logp = tape.log_softmax_rows(t);
            let p = tape.softmax_rows(t);
            let logq = tape.log_softmax_rows(student);
            let diff = tape.sub(logp, logq)?;
            let terms = tape.mul(p, diff)?;
            let per_sample = tape.sum_cols(terms);
            Ok(tape.mean(per_sample))
        }
    }
}
