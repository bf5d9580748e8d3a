//! Frozen pool of aligned backbone teachers plus the joint teacher, and the
//! per-batch choice of which one the student learns from.
//!
//! Teacher ids follow pool order: aligned teachers `0..n`, then the joint
//! teacher at `n`.

use log::warn;

use crate::error::{Error, Result};
use crate::features::{FeatureBatch, FeatureSource};
use crate::losses::TaskKind;
use crate::models::{hash_matrices, Mlp, ModalityAdapter, Module};
use crate::tensor::Matrix;
use crate::training::{eval_task_loss, SelectionHistogram, Teacher};

/// An adapter over one teacher backbone plus its prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTeacher {
    /// Index into the teacher's backbones.
    pub backbone: usize,
    pub adapter: ModalityAdapter,
    /// Linear head on the adapter output, used to score the teacher.
    pub head: Mlp,
}

impl Module for AlignedTeacher {
    fn params(&self) -> Vec<&Matrix> {
        let mut p = self.adapter.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.adapter.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Representations and predictions of every pool member for the same rows.
#[derive(Clone, Debug)]
pub struct PoolOutputs {
    pub features: Vec<FeatureBatch>,
    pub predictions: Vec<Matrix>,
}

impl PoolOutputs {
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            features: self
                .features
                .iter()
                .map(|f| FeatureBatch::new(f.source, f.values.select_rows(rows)))
                .collect(),
            predictions: self.predictions.iter().map(|p| p.select_rows(rows)).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.features.first().map_or(0, FeatureBatch::batch_size)
    }
}

/// Outcome of one selection.
#[derive(Clone, Debug)]
pub struct Selection {
    pub teacher: usize,
    pub features: FeatureBatch,
    pub predictions: Matrix,
    /// Task loss of every teacher on the batch (non-finite when excluded).
    pub losses: Vec<f64>,
}

/// One logged selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionEvent {
    pub teacher: usize,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TeacherPool {
    teacher: Teacher,
    aligned: Vec<AlignedTeacher>,
    task: TaskKind,
    counts: Vec<u64>,
    log: Vec<SelectionEvent>,
}

impl TeacherPool {
    pub fn new(teacher: Teacher, aligned: Vec<AlignedTeacher>, task: TaskKind) -> Result<Self> {
        let joint = teacher.fusion.joint_dim();
        for (i, a) in aligned.iter().enumerate() {
            let Some(bb) = teacher.backbones.get(a.backbone) else {
                return Err(Error::Config(format!(
                    "aligned teacher {i} refers to missing backbone {}",
                    a.backbone
                )));
            };
            if a.adapter.input_dim() != bb.output_dim() || a.adapter.output_dim() != joint {
                return Err(Error::Config(format!(
                    "aligned teacher {i}: adapter maps {} -> {}, expected {} -> {joint}",
                    a.adapter.input_dim(),
                    a.adapter.output_dim(),
                    bb.output_dim()
                )));
            }
            if a.head.input_dim() != joint || a.head.output_dim() != task.output_dim() {
                return Err(Error::Config(format!("aligned teacher {i}: head has the wrong shape")));
            }
        }
        if teacher.fusion.output_dim() != task.output_dim() {
            return Err(Error::Config("joint teacher head does not match the task".into()));
        }
        let n = aligned.len() + 1;
        Ok(Self {
            teacher,
            aligned,
            task,
            counts: vec![0; n],
            log: Vec::new(),
        })
    }

    pub fn teacher(&self) -> &Teacher {
        &self.teacher
    }

    pub fn aligned(&self) -> &[AlignedTeacher] {
        &self.aligned
    }

    /// Mutable access to aligned teachers, for building perturbed pools.
    pub fn aligned_mut(&mut self) -> &mut [AlignedTeacher] {
        &mut self.aligned
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn len(&self) -> usize {
        self.aligned.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn joint_id(&self) -> usize {
        self.aligned.len()
    }

    /// Dimension of every pool representation.
    pub fn feature_dim(&self) -> usize {
        self.teacher.fusion.joint_dim()
    }

    pub fn labels(&self) -> Vec<String> {
        self.aligned
            .iter()
            .map(|a| FeatureSource::Backbone(a.backbone).to_string())
            .chain([FeatureSource::Joint.to_string()])
            .collect()
    }

    /// Every member's representation and predictions for raw
    /// `[prevalent, privileged]` inputs.
    pub fn outputs(&self, inputs: [&Matrix; 2]) -> Result<PoolOutputs> {
        let tf = self.teacher.features(inputs)?;
        let mut features = Vec::with_capacity(self.len());
        let mut predictions = Vec::with_capacity(self.len());
        for a in &self.aligned {
            let z = a.adapter.infer(&tf.backbone[a.backbone])?;
            predictions.push(a.head.infer(&z)?);
            features.push(FeatureBatch::new(FeatureSource::Backbone(a.backbone), z));
        }
        features.push(FeatureBatch::new(FeatureSource::Joint, tf.joint));
        predictions.push(tf.predictions);
        Ok(PoolOutputs { features, predictions })
    }

    /// Task loss of each member on a batch.
    pub fn losses(&self, outputs: &PoolOutputs, targets: &Matrix) -> Result<Vec<f64>> {
        outputs
            .predictions
            .iter()
            .map(|p| match eval_task_loss(p, targets, self.task) {
                Ok(l) => Ok(l),
                Err(Error::NonFinite(_)) => Ok(f64::NAN),
                Err(e) => Err(e),
            })
            .collect()
    }

    /// Picks the member with the lowest batch task loss from precomputed
    /// outputs. Ties go to the joint teacher, then to the lower id.
    pub fn select_from(&mut self, outputs: &PoolOutputs, targets: &Matrix) -> Result<Selection> {
        if outputs.batch_size() == 0 {
            return Err(Error::contract("teacher selection on an empty batch"));
        }
        let losses = self.losses(outputs, targets)?;
        let teacher = argmin_prefer_last(&losses)
            .ok_or_else(|| Error::NonFinite(format!("task loss of every teacher ({losses:?})")))?;
        for (i, l) in losses.iter().enumerate() {
            if !l.is_finite() {
                warn!("teacher {i} has non-finite task loss {l}; excluded for this batch");
            }
        }
        Ok(self.record(outputs, teacher, losses))
    }

    /// Always the joint teacher (single-teacher methods); still logged.
    pub fn select_joint_from(&mut self, outputs: &PoolOutputs, targets: &Matrix) -> Result<Selection> {
        if outputs.batch_size() == 0 {
            return Err(Error::contract("teacher selection on an empty batch"));
        }
        let losses = self.losses(outputs, targets)?;
        let id = self.joint_id();
        Ok(self.record(outputs, id, losses))
    }

    /// Computes every member's outputs on the batch and selects.
    pub fn select_teacher(&mut self, inputs: [&Matrix; 2], targets: &Matrix) -> Result<(FeatureBatch, usize)> {
        let outputs = self.outputs(inputs)?;
        let s = self.select_from(&outputs, targets)?;
        Ok((s.features, s.teacher))
    }

    fn record(&mut self, outputs: &PoolOutputs, teacher: usize, losses: Vec<f64>) -> Selection {
        self.counts[teacher] += 1;
        self.log.push(SelectionEvent {
            teacher,
            losses: losses.clone(),
        });
        Selection {
            teacher,
            features: outputs.features[teacher].clone(),
            predictions: outputs.predictions[teacher].clone(),
            losses,
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn batches(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn log(&self) -> &[SelectionEvent] {
        &self.log
    }

    pub fn reset_counts(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.log.clear();
    }

    /// Share of batches per member, in percent.
    pub fn percentages(&self) -> Vec<f64> {
        let total = self.batches();
        self.counts
            .iter()
            .map(|&c| {
                if total == 0 {
                    0.0
                } else {
                    100.0 * c as f64 / total as f64
                }
            })
            .collect()
    }

    pub fn histogram(&self) -> SelectionHistogram {
        SelectionHistogram {
            teachers: self.labels(),
            counts: self.counts.clone(),
            percentages: self.percentages(),
        }
    }

    /// Hash of the frozen multimodal teacher.
    pub fn teacher_hash(&self) -> String {
        self.teacher.param_hash()
    }

    /// Hash of adapters and heads.
    pub fn aligned_hash(&self) -> String {
        hash_matrices(self.aligned.iter().flat_map(|a| a.params()))
    }
}

impl Module for TeacherPool {
    fn params(&self) -> Vec<&Matrix> {
        let mut p = self.teacher.params();
        p.extend(self.aligned.iter().flat_map(|a| a.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.teacher.params_mut();
        p.extend(self.aligned.iter_mut().flat_map(|a| a.params_mut()));
        p
    }
}

/// Index of the smallest finite value. The last index wins ties against any
/// earlier one; among the others, the first occurrence wins.
pub fn argmin_prefer_last(losses: &[f64]) -> Option<usize> {
    let last = losses.len().checked_sub(1)?;
    let mut best = losses[last].is_finite().then_some(last);
    for (i, &l) in losses[..last].iter().enumerate() {
        if !l.is_finite() {
            continue;
        }
        match best {
            Some(b) if losses[b] <= l => {}
            _ => best = Some(i),
        }
    }
    best
}
