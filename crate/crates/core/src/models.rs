//! Small feed-forward building blocks: backbones, fusion heads, modality
//! adapters and the privileged-feature hallucination network.
//!
//! Every component exposes its parameters through [`Module`] in a fixed
//! order. A forward pass first binds those parameters onto a tape (as
//! trainable leaves or constants) and then consumes the resulting `Var`s in
//! the same order.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{FeatureBatch, FeatureSource};
use crate::tensor::{Matrix, Tape, Var};

pub trait Module {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    /// Put every parameter on `tape`, trainable or frozen.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|m| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect()
    }

    /// SHA-256 over shapes and the exact bits of every parameter.
    fn param_hash(&self) -> String {
        hash_matrices(self.params())
    }
}

pub fn hash_matrices<'a>(mats: impl IntoIterator<Item = &'a Matrix>) -> String {
    let mut h = Sha256::new();
    for m in mats {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

/// `y = x·W + b` with `W` stored `in×out` and `b` as `1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Matrix::from_fn(input, output, |_, _| rng.random_range(-bound..bound)),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    fn forward(tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, weight)?;
        tape.add(xw, bias)
    }
}

/// Multi-layer perceptron. `activation` follows every hidden layer,
/// `output_activation` the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
    output_activation: Activation,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`.
    pub fn new(
        sizes: &[usize],
        activation: Activation,
        output_activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self::from_layers(layers, activation, output_activation)
    }

    pub fn from_layers(layers: Vec<Linear>, activation: Activation, output_activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.output_dim()) {
                return Err(Error::Config(format!("layer {i}: bias shape {:?}", l.bias.shape())));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but previous layer emits {}",
                    l.input_dim(),
                    layers[i - 1].output_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            activation,
            output_activation,
        })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Linear::output_dim));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn param_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.input_dim() {
            return Err(Error::Dimension {
                op: "mlp",
                left: tape.value(x).shape(),
                right: (self.input_dim(), self.layers[0].output_dim()),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, pair) in params[..self.param_count()].chunks(2).enumerate() {
            h = Linear::forward(tape, pair[0], pair[1], h)?;
            let act = if i == last {
                self.output_activation
            } else {
                self.activation
            };
            h = act.apply(tape, h);
        }
        Ok(h)
    }

    /// Forward pass on plain values (same arithmetic as [`Mlp::forward`]).
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Run a backbone encoder over raw modality input.
pub fn forward_backbone(encoder: &Mlp, index: usize, raw: &Matrix) -> Result<FeatureBatch> {
    Ok(FeatureBatch::new(FeatureSource::Backbone(index), encoder.infer(raw)?))
}

/// Encoder-decoder pair; shared shape of modality adapters and the T-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderDecoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Projects one backbone's features into the joint space.
pub type ModalityAdapter = EncoderDecoder;
/// Hallucinates privileged-modality features from prevalent ones.
pub type TNet = EncoderDecoder;

impl EncoderDecoder {
    /// `input → bottleneck` (tanh) then `bottleneck → output` (linear).
    pub fn new(input: usize, bottleneck: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::from_parts(
            Mlp::new(&[input, bottleneck], Activation::Tanh, Activation::Tanh, rng)?,
            Mlp::new(&[bottleneck, output], Activation::Tanh, Activation::Identity, rng)?,
        )
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() {
            return Err(Error::Config(format!(
                "encoder emits {} but decoder expects {}",
                encoder.output_dim(),
                decoder.input_dim()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let split = self.encoder.param_count();
        let h = self.encoder.forward(tape, &params[..split], x)?;
        self.decoder.forward(tape, &params[split..], h)
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.decoder.infer(&self.encoder.infer(x)?)
    }
}

impl Module for EncoderDecoder {
    fn params(&self) -> Vec<&Matrix> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }
}

/// Map backbone features into the joint space.
pub fn adapt(adapter: &ModalityAdapter, features: &FeatureBatch) -> Result<FeatureBatch> {
    Ok(FeatureBatch::new(features.source, adapter.infer(&features.values)?))
}

/// Stand-in privileged features from prevalent ones (frozen T-Net).
pub fn hallucinate(tnet: &TNet, prevalent: &FeatureBatch) -> Result<FeatureBatch> {
    Ok(FeatureBatch::new(prevalent.source, tnet.infer(&prevalent.values)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Concatenate modality features, then project.
    Concat,
    /// Project each modality, then mix with sigmoid gates computed from the
    /// concatenation.
    Gated,
}

/// Fusion network producing the joint representation and task predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    kind: FusionKind,
    input_dims: Vec<usize>,
    projections: Vec<Mlp>,
    gate: Option<Linear>,
    predictor: Mlp,
}

impl FusionHead {
    /// Projection `Σdims → hidden → joint` (or per modality `dim → joint` when
    /// gated), linear predictor `joint → outputs`.
    pub fn new(
        kind: FusionKind,
        input_dims: &[usize],
        hidden: usize,
        joint_dim: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dims.is_empty() {
            return Err(Error::Config("fusion needs at least one modality".into()));
        }
        let total: usize = input_dims.iter().sum();
        let (projections, gate) = match kind {
            FusionKind::Concat => (
                vec![Mlp::new(
                    &[total, hidden, joint_dim],
                    Activation::Tanh,
                    Activation::Tanh,
                    rng,
                )?],
                None,
            ),
            FusionKind::Gated => (
                input_dims
                    .iter()
                    .map(|&d| Mlp::new(&[d, joint_dim], Activation::Tanh, Activation::Tanh, rng))
                    .collect::<Result<Vec<_>>>()?,
                Some(Linear::init(total, input_dims.len(), rng)),
            ),
        };
        let predictor = Mlp::new(&[joint_dim, outputs], Activation::Identity, Activation::Identity, rng)?;
        Self::from_parts(kind, input_dims.to_vec(), projections, gate, predictor)
    }

    pub fn from_parts(
        kind: FusionKind,
        input_dims: Vec<usize>,
        projections: Vec<Mlp>,
        gate: Option<Linear>,
        predictor: Mlp,
    ) -> Result<Self> {
        let total: usize = input_dims.iter().sum();
        let joint = predictor.input_dim();
        match kind {
            FusionKind::Concat => {
                if projections.len() != 1 || projections[0].input_dim() != total || gate.is_some() {
                    return Err(Error::Config(format!(
                        "concat fusion needs one projection from {total} inputs"
                    )));
                }
            }
            FusionKind::Gated => {
                let ok = projections.len() == input_dims.len()
                    && projections.iter().zip(&input_dims).all(|(p, &d)| p.input_dim() == d)
                    && gate
                        .as_ref()
                        .is_some_and(|g| g.input_dim() == total && g.output_dim() == input_dims.len());
                if !ok {
                    return Err(Error::Config(
                        "gated fusion needs one projection per modality and a gate".into(),
                    ));
                }
            }
        }
        if projections.iter().any(|p| p.output_dim() != joint) {
            return Err(Error::Config("projection width must equal the joint dimension".into()));
        }
        Ok(Self {
            kind,
            input_dims,
            projections,
            gate,
            predictor,
        })
    }

    pub fn kind(&self) -> FusionKind {
        self.kind
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn joint_dim(&self) -> usize {
        self.predictor.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.predictor.output_dim()
    }

    pub fn predictor(&self) -> &Mlp {
        &self.predictor
    }

    /// Joint representation and predictions for one batch.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], features: &[Var]) -> Result<(Var, Var)> {
        if features.len() != self.input_dims.len() {
            return Err(Error::contract(format!(
                "fusion expects {} modalities, got {}",
                self.input_dims.len(),
                features.len()
            )));
        }
        let b = tape.value(features[0]).rows();
        for (&f, &d) in features.iter().zip(&self.input_dims) {
            let shape = tape.value(f).shape();
            if shape != (b, d) {
                return Err(Error::Dimension {
                    op: "fuse",
                    left: shape,
                    right: (b, d),
                });
            }
        }
        let mut offset = 0;
        let mut take = |n: usize| {
            let s = &params[offset..offset + n];
            offset += n;
            s
        };
        let joint = match self.kind {
            FusionKind::Concat => {
                let x = if features.len() == 1 {
                    features[0]
                } else {
                    tape.concat_cols(features)?
                };
                self.projections[0].forward(tape, take(self.projections[0].param_count()), x)?
            }
            FusionKind::Gated => {
                let projected = self
                    .projections
                    .iter()
                    .zip(features)
                    .map(|(p, &f)| {
                        let ps = take(p.param_count());
                        p.forward(tape, ps, f)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let gp = take(2);
                let x = if features.len() == 1 {
                    features[0]
                } else {
                    tape.concat_cols(features)?
                };
                let logits = Linear::forward(tape, gp[0], gp[1], x)?;
                let gates = tape.sigmoid(logits);
                let mut acc: Option<Var> = None;
                for (i, p) in projected.into_iter().enumerate() {
                    let g = tape.gather_cols(gates, &[i])?;
                    let term = tape.mul(g, p)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term)?,
                        None => term,
                    });
                }
                acc.expect("at least one modality")
            }
        };
        let preds = self
            .predictor
            .forward(tape, take(self.predictor.param_count()), joint)?;
        Ok((joint, preds))
    }

    pub fn infer(&self, features: &[&Matrix]) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let f: Vec<Var> = features.iter().map(|m| tape.constant((*m).clone())).collect();
        let (j, y) = self.forward(&mut tape, &p, &f)?;
        Ok((tape.value(j).clone(), tape.value(y).clone()))
    }
}

impl Module for FusionHead {
    fn params(&self) -> Vec<&Matrix> {
        let mut p: Vec<&Matrix> = self.projections.iter().flat_map(|m| m.params()).collect();
        if let Some(g) = &self.gate {
            p.extend([&g.weight, &g.bias]);
        }
        p.extend(self.predictor.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p: Vec<&mut Matrix> = self.projections.iter_mut().flat_map(|m| m.params_mut()).collect();
        if let Some(g) = &mut self.gate {
            p.extend([&mut g.weight, &mut g.bias]);
        }
        p.extend(self.predictor.params_mut());
        p
    }
}

/// Fuse a set of feature batches into `(joint, predictions)`.
pub fn fuse(features: &[FeatureBatch], head: &FusionHead) -> Result<(FeatureBatch, Matrix)> {
    if let Some(f) = features.iter().find(|f| f.batch_size() != features[0].batch_size()) {
        return Err(Error::Dimension {
            op: "fuse",
            left: features[0].values.shape(),
            right: f.values.shape(),
        });
    }
    let mats: Vec<&Matrix> = features.iter().map(|f| &f.values).collect();
    let (joint, preds) = head.infer(&mats)?;
    Ok((FeatureBatch::new(FeatureSource::Joint, joint), preds))
}
