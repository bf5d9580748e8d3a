use serde::{Deserialize, Serialize};

use super::{adam_for, apply_adam, bind_trainable, divergence, eval_task_loss, make_batches, EarlyStop, EpochRecord};
use super::{Direction, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{pointwise_kd_loss, task_loss, PointwiseKind};
use crate::metrics::{compute_metrics, MetricReport};
use crate::models::{Activation, EncoderDecoder, FusionHead, Mlp, Module, TNet};
use crate::synthdata::{Dataset, Split, SplitView};
use crate::tensor::{Matrix, Tape};

/// Multimodal teacher: backbone 0 reads the prevalent modality, backbone 1
/// the privileged one.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub backbones: Vec<Mlp>,
    pub fusion: FusionHead,
    /// Prevalent backbone features to privileged backbone features.
    pub tnet: TNet,
    pub direction: Direction,
}

/// Per-sample outputs of a frozen teacher.
#[derive(Clone, Debug)]
pub struct TeacherFeatures {
    pub backbone: Vec<Matrix>,
    pub joint: Matrix,
    pub predictions: Matrix,
}

impl TeacherFeatures {
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            backbone: self.backbone.iter().map(|m| m.select_rows(rows)).collect(),
            joint: self.joint.select_rows(rows),
            predictions: self.predictions.select_rows(rows),
        }
    }
}

impl Teacher {
    /// Freshly initialized teacher for inputs of widths `dims = [prevalent, privileged]`.
    pub fn new(config: &TrainConfig, dims: [usize; 2], rng: &mut impl rand::Rng) -> Result<Self> {
        let a = &config.arch;
        let backbones = dims
            .iter()
            .map(|&d| {
                Mlp::new(
                    &[d, a.backbone_hidden, a.feature_dim],
                    Activation::Tanh,
                    Activation::Tanh,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = FusionHead::new(
            a.fusion,
            &[a.feature_dim, a.feature_dim],
            a.fusion_hidden,
            a.joint_dim,
            config.task.output_dim(),
            rng,
        )?;
        let tnet = EncoderDecoder::new(a.feature_dim, a.tnet_bottleneck, a.feature_dim, rng)?;
        Ok(Self {
            backbones,
            fusion,
            tnet,
            direction: config.direction,
        })
    }

    /// `[prevalent, privileged]` raw inputs of a split.
    pub fn inputs<'a>(&self, view: &'a SplitView) -> [&'a Matrix; 2] {
        let (p, q) = self.direction.modalities();
        [view.modality(p), view.modality(q)]
    }

    pub fn features(&self, inputs: [&Matrix; 2]) -> Result<TeacherFeatures> {
        let backbone = self
            .backbones
            .iter()
            .zip(inputs)
            .map(|(b, x)| b.infer(x))
            .collect::<Result<Vec<_>>>()?;
        let (joint, predictions) = self.fusion.infer(&[&backbone[0], &backbone[1]])?;
        Ok(TeacherFeatures {
            backbone,
            joint,
            predictions,
        })
    }

    /// Privileged-feature stand-ins computed from the prevalent input alone.
    pub fn hallucinate(&self, prevalent: &Matrix) -> Result<Matrix> {
        self.tnet.infer(&self.backbones[0].infer(prevalent)?)
    }
}

impl Module for Teacher {
    fn params(&self) -> Vec<&Matrix> {
        let mut p: Vec<&Matrix> = self.backbones.iter().flat_map(|b| b.params()).collect();
        p.extend(self.fusion.params());
        p.extend(self.tnet.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p: Vec<&mut Matrix> = self.backbones.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.fusion.params_mut());
        p.extend(self.tnet.params_mut());
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub val_loss: f64,
    pub val: MetricReport,
    pub test: MetricReport,
    pub tnet_best_epoch: usize,
    pub tnet_val_mse: f64,
    /// Validation MSE of always predicting the training mean of the
    /// privileged features.
    pub tnet_mean_baseline_mse: f64,
}

const STAGE: &str = "teacher";

/// Trains backbones and fusion on the task, keeps the lowest-validation-loss
/// weights, then fits the T-Net on the resulting frozen features.
pub fn train_teacher(config: &TrainConfig, data: &Dataset) -> Result<(Teacher, TeacherReport)> {
    config.validate_for(data)?;
    let (train, val, test) = (data.view(Split::Train), data.view(Split::Val), data.view(Split::Test));
    let (p, q) = config.direction.modalities();
    let mut init = config.init_rng(STAGE);
    let mut shuffle = config.shuffle_rng(STAGE);
    let mut teacher = Teacher::new(config, [data.modality(p).cols(), data.modality(q).cols()], &mut init)?;
    let lr = config.lr.teacher;
    let kind = config.task;

    let mut adam = {
        let [b0, b1] = [&teacher.backbones[0], &teacher.backbones[1]];
        adam_for(&[b0, b1, &teacher.fusion], STAGE)
    };
    let mut stop = EarlyStop::new(config.patience);
    let mut best = (teacher.backbones.clone(), teacher.fusion.clone());
    let mut epochs = Vec::new();
    let [xp, xq] = teacher.inputs(&train);
    for epoch in 1..=config.epochs.teacher {
        let batches = make_batches(train.len(), config.batch_size, &mut shuffle);
        let mut loss_sum = 0.0;
        for rows in &batches {
            let mut step = || -> Result<f64> {
                let mut tape = Tape::new();
                let vars = {
                    let [b0, b1] = [&teacher.backbones[0], &teacher.backbones[1]];
                    bind_trainable(&mut tape, &[b0, b1, &teacher.fusion])
                };
                let x0 = tape.constant(xp.select_rows(rows));
                let x1 = tape.constant(xq.select_rows(rows));
                let f0 = teacher.backbones[0].forward(&mut tape, &vars[0], x0)?;
                let f1 = teacher.backbones[1].forward(&mut tape, &vars[1], x1)?;
                let (_, preds) = teacher.fusion.forward(&mut tape, &vars[2], &[f0, f1])?;
                let loss = task_loss(&mut tape, preds, &train.targets.select_rows(rows), kind)?;
                let value = tape.scalar(loss)?;
                if !value.is_finite() {
                    return Err(Error::NonFinite("teacher task loss".into()));
                }
                let grads = tape.backward(loss)?;
                let (bb, rest) = teacher.backbones.split_at_mut(1);
                apply_adam(
                    &mut [&mut bb[0], &mut rest[0], &mut teacher.fusion],
                    &vars,
                    &grads,
                    &mut adam,
                    lr,
                )?;
                Ok(value)
            };
            let value = step().map_err(|e| divergence(STAGE, epoch, lr, e))?;
            loss_sum += value;
        }
        let tf = teacher.features(teacher.inputs(&val))?;
        let val_loss = eval_task_loss(&tf.predictions, &val.targets, kind)?;
        let val_metric = compute_metrics(&tf.predictions, &val.targets, kind)?.value();
        let train_loss = loss_sum / batches.len() as f64;
        epochs.push(EpochRecord {
            epoch,
            split: Split::Train,
            task_loss: train_loss,
            ot_loss: None,
            cen_loss: None,
            total: Some(train_loss),
            metric: None,
        });
        epochs.push(EpochRecord {
            epoch,
            split: Split::Val,
            task_loss: val_loss,
            ot_loss: None,
            cen_loss: None,
            total: None,
            metric: Some(val_metric),
        });
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                stage: STAGE,
                epoch,
                lr,
                detail: "validation loss is not finite".into(),
            });
        }
        if stop.observe(epoch, -val_loss) {
            best = (teacher.backbones.clone(), teacher.fusion.clone());
        }
        if stop.should_stop() {
            break;
        }
    }
    (teacher.backbones, teacher.fusion) = best;
    let best_epoch = stop.best_epoch();
    let val_loss = -stop.best();

    let (tnet_best_epoch, tnet_val_mse, tnet_mean_baseline_mse) = fit_tnet(&mut teacher, config, &train, &val)?;

    let vf = teacher.features(teacher.inputs(&val))?;
    let tf = teacher.features(teacher.inputs(&test))?;
    let report = TeacherReport {
        epochs,
        best_epoch,
        val_loss,
        val: compute_metrics(&vf.predictions, &val.targets, kind)?,
        test: compute_metrics(&tf.predictions, &test.targets, kind)?,
        tnet_best_epoch,
        tnet_val_mse,
        tnet_mean_baseline_mse,
    };
    Ok((teacher, report))
}

fn mse(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// Regresses privileged backbone features on prevalent ones with frozen
/// backbones. Returns `(best epoch, val MSE, mean-predictor val MSE)`.
fn fit_tnet(
    teacher: &mut Teacher,
    config: &TrainConfig,
    train: &SplitView,
    val: &SplitView,
) -> Result<(usize, f64, f64)> {
    const STAGE: &str = "tnet";
    let lr = config.lr.teacher;
    let mut shuffle = config.shuffle_rng(STAGE);
    let tr = teacher.features(teacher.inputs(train))?;
    let va = teacher.features(teacher.inputs(val))?;
    let (src, dst) = (&tr.backbone[0], &tr.backbone[1]);

    let mean = dst.column_means();
    let mean_pred = Matrix::from_fn(va.backbone[1].rows(), mean.cols(), |_, j| mean.get(0, j));
    let baseline = mse(&mean_pred, &va.backbone[1]);

    let mut adam = adam_for(&[&teacher.tnet], STAGE);
    let mut stop = EarlyStop::new(config.patience);
    let mut best = teacher.tnet.clone();
    stop.observe(0, -mse(&teacher.tnet.infer(&va.backbone[0])?, &va.backbone[1]));
    for epoch in 1..=config.epochs.teacher {
        for rows in make_batches(src.rows(), config.batch_size, &mut shuffle) {
            let mut step = || -> Result<()> {
                let mut tape = Tape::new();
                let vars = bind_trainable(&mut tape, &[&teacher.tnet]);
                let x = tape.constant(src.select_rows(&rows));
                let out = teacher.tnet.forward(&mut tape, &vars[0], x)?;
                let loss = pointwise_kd_loss(&mut tape, &dst.select_rows(&rows), out, PointwiseKind::Mse)?;
                if !tape.scalar(loss)?.is_finite() {
                    return Err(Error::NonFinite("T-Net regression loss".into()));
                }
                let grads = tape.backward(loss)?;
                apply_adam(&mut [&mut teacher.tnet], &vars, &grads, &mut adam, lr)
            };
            step().map_err(|e| divergence(STAGE, epoch, lr, e))?;
        }
        let val_mse = mse(&teacher.tnet.infer(&va.backbone[0])?, &va.backbone[1]);
        if stop.observe(epoch, -val_mse) {
            best = teacher.tnet.clone();
        }
        if stop.should_stop() {
            break;
        }
    }
    teacher.tnet = best;
    Ok((stop.best_epoch(), -stop.best(), baseline))
}
