//! Model spec files and the small executable networks built from them.
//!
//! A spec is a JSON document:
//!
//! ```json
//! {
//!   "input": { "channels": 4, "spatial": 8 },
//!   "layers": [
//!     { "kind": "dsc_block", "c_in": 4, "c_out": 8, "kernel": 3, "cg": 2, "co": "50%" }
//!   ],
//!   "head": { "pool": "global-average", "classes": 4 }
//! }
//! ```
//!
//! `co` takes a percentage string, a fraction (`0.5`) or an integer channel
//! count. `activation` defaults to `"relu"`; `bias` defaults to `true`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::Deserialize;

use crate::cost::{LayerKind, LayerSpec};
use crate::cycle::{Overlap, SccConfig};
use crate::error::{Error, Result};
use crate::kernel::{scc_backward, scc_forward, SccWeights};
use crate::reference::{grouped_conv_backward, grouped_conv_forward, ConvSpec, ConvWeights};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum OverlapField {
    Channels(u64),
    Ratio(f64),
    Text(String),
}

impl OverlapField {
    fn resolve(&self) -> Result<Overlap> {
        match self {
            OverlapField::Channels(ch) => Ok(Overlap::Channels(*ch as usize)),
            OverlapField::Ratio(r) => Ok(Overlap::Ratio(*r)),
            OverlapField::Text(s) => s.parse(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct InputRecord {
    pub channels: usize,
    pub spatial: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default)]
    pub kernel: Option<usize>,
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub cg: Option<usize>,
    #[serde(default)]
    co: Option<OverlapField>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub bias: Option<bool>,
}

impl LayerRecord {
    pub fn overlap(&self) -> Result<Overlap> {
        self.co
            .as_ref()
            .map_or(Ok(Overlap::Channels(0)), OverlapField::resolve)
    }

    fn has_bias(&self) -> bool {
        self.bias.unwrap_or(true)
    }

    /// Cost-model view of this layer on a square input of extent `spatial`.
    pub fn layer_spec(&self, spatial: usize) -> Result<LayerSpec> {
        let mut spec = LayerSpec::new(self.kind, self.c_in, self.c_out, spatial)
            .with_groups(self.cg.unwrap_or(1))
            .with_overlap(self.overlap()?)
            .with_bias(self.has_bias());
        if let Some(k) = self.kernel {
            spec = spec.with_kernel(k);
        }
        if let Some(s) = self.stride {
            spec = spec.with_stride(s);
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum Pool {
    #[serde(rename = "global-average")]
    GlobalAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct HeadRecord {
    pub pool: Pool,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpecFile {
    #[serde(default)]
    pub input: Option<InputRecord>,
    pub layers: Vec<LayerRecord>,
    pub head: HeadRecord,
}

impl ModelSpecFile {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: ModelSpecFile = serde_json::from_str(text).map_err(|e| Error::Spec {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn spec_error(message: String) -> Error {
        Error::Spec {
            line: 0,
            column: 0,
            message,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Self::spec_error("model has no layers".into()));
        }
        if self.head.classes < 2 {
            return Err(Self::spec_error(format!(
                "head needs at least 2 classes, got {}",
                self.head.classes
            )));
        }
        if let Some(input) = self.input {
            if input.channels != self.layers[0].c_in {
                return Err(Self::spec_error(format!(
                    "input has {} channels but first layer expects {}",
                    input.channels, self.layers[0].c_in
                )));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].c_out != pair[1].c_in {
                return Err(Self::spec_error(format!(
                    "layer {i} emits {} channels but layer {} expects {}",
                    pair[0].c_out,
                    i + 1,
                    pair[1].c_in
                )));
            }
        }
        let mut spatial = self.input.map_or(8, |i| i.spatial);
        for layer in &self.layers {
            spatial = layer.layer_spec(spatial)?.output_spatial()?;
        }
        Ok(())
    }

    /// Per-layer cost specs, propagating the spatial extent through strides.
    pub fn layer_specs(&self, spatial: usize) -> Result<Vec<LayerSpec>> {
        let mut extent = spatial;
        self.layers
            .iter()
            .map(|layer| {
                let spec = layer.layer_spec(extent)?;
                extent = spec.output_spatial()?;
                Ok(spec)
            })
            .collect()
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].c_in
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.c_out)
    }
}

/// One differentiable step of a network body.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Conv {
        spec: ConvSpec,
        weights: ConvWeights,
    },
    Scc {
        cfg: SccConfig,
        weights: SccWeights,
    },
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
enum StageGrad {
    Conv {
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
    },
    Scc {
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
    },
    Relu,
}

/// Global-average pool followed by a dense layer. Weight is `[class][feature]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    pub classes: usize,
    pub features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    stages: Vec<StageGrad>,
    head_weight: Vec<f64>,
    head_bias: Vec<f64>,
}

/// Mean softmax cross-entropy over a batch, with the number of samples
/// whose arg-max logit matches the label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    stages: Vec<Stage>,
    head: DenseHead,
}

fn push_layer<R: Rng + ?Sized>(
    stages: &mut Vec<Stage>,
    layer: &LayerRecord,
    rng: &mut R,
) -> Result<()> {
    let bias = layer.has_bias();
    let kernel = layer.kernel.unwrap_or(match layer.kind {
        LayerKind::Standard | LayerKind::Depthwise | LayerKind::DscBlock => 3,
        _ => 1,
    });
    let stride = layer.stride.unwrap_or(1);
    let cg = layer.cg.unwrap_or(1);
    fn conv<R: Rng + ?Sized>(stages: &mut Vec<Stage>, spec: ConvSpec, bias: bool, rng: &mut R) {
        let weights = ConvWeights::init(&spec, bias, rng);
        stages.push(Stage::Conv { spec, weights });
    }
    match layer.kind {
        LayerKind::Standard => {
            let spec = ConvSpec::new(layer.c_in, layer.c_out, kernel, stride, kernel / 2, 1)?;
            conv(stages, spec, bias, rng);
        }
        LayerKind::Depthwise => conv(
            stages,
            ConvSpec::depthwise(layer.c_in, kernel, stride)?,
            bias,
            rng,
        ),
        LayerKind::Pointwise => conv(
            stages,
            ConvSpec::pointwise(layer.c_in, layer.c_out, 1)?,
            bias,
            rng,
        ),
        LayerKind::GroupPointwise => conv(
            stages,
            ConvSpec::pointwise(layer.c_in, layer.c_out, cg)?,
            bias,
            rng,
        ),
        LayerKind::Scc | LayerKind::DscBlock => {
            if layer.kind == LayerKind::DscBlock {
                conv(
                    stages,
                    ConvSpec::depthwise(layer.c_in, kernel, stride)?,
                    bias,
                    rng,
                );
            }
            let cfg = SccConfig::new(layer.c_in, layer.c_out, cg, layer.overlap()?, bias)?;
            let weights = SccWeights::init(&cfg, rng);
            stages.push(Stage::Scc { cfg, weights });
        }
    }
    if layer.activation == Activation::Relu {
        stages.push(Stage::Relu);
    }
    Ok(())
}

/// Expands a spec into stages with freshly initialized weights.
pub fn build_network<R: Rng + ?Sized>(spec: &ModelSpecFile, rng: &mut R) -> Result<Network> {
    spec.validate()?;
    let mut stages = Vec::new();
    for layer in &spec.layers {
        push_layer(&mut stages, layer, rng)?;
    }
    let features = spec.feature_channels();
    let classes = spec.head.classes;
    let bound = (1.0 / features as f64).sqrt();
    let head = DenseHead {
        classes,
        features,
        weight: (0..classes * features)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
        bias: vec![0.0; classes],
    };
    Ok(Network { stages, head })
}

fn relu(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

impl Network {
    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage] {
        &mut self.stages
    }

    pub fn head(&self) -> &DenseHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut DenseHead {
        &mut self.head
    }

    pub fn classes(&self) -> usize {
        self.head.classes
    }

    fn body(&self, input: &Tensor4) -> Result<Vec<Tensor4>> {
        let mut acts = Vec::with_capacity(self.stages.len() + 1);
        acts.push(input.clone());
        for stage in &self.stages {
            let x = acts.last().unwrap();
            let y = match stage {
                Stage::Conv { spec, weights } => grouped_conv_forward(x, weights, spec)?,
                Stage::Scc { cfg, weights } => scc_forward(x, weights, cfg)?,
                Stage::Relu => relu(x),
            };
            acts.push(y);
        }
        Ok(acts)
    }

    fn pool(features: &Tensor4) -> Vec<f64> {
        let area = features.plane_len() as f64;
        (0..features.n())
            .flat_map(|b| (0..features.c()).map(move |c| (b, c)))
            .map(|(b, c)| features.plane(b, c).iter().sum::<f64>() / area)
            .collect()
    }

    fn dense(&self, pooled: &[f64], n: usize) -> Vec<f64> {
        let (classes, feats) = (self.head.classes, self.head.features);
        let mut logits = Vec::with_capacity(n * classes);
        for b in 0..n {
            let row = &pooled[b * feats..(b + 1) * feats];
            for k in 0..classes {
                let w = &self.head.weight[k * feats..(k + 1) * feats];
                let dot: f64 = w.iter().zip(row).map(|(a, x)| a * x).sum();
                logits.push(self.head.bias[k] + dot);
            }
        }
        logits
    }

    /// Logits, row-major `[sample][class]`.
    pub fn forward(&self, input: &Tensor4) -> Result<Vec<f64>> {
        let acts = self.body(input)?;
        let features = acts.last().unwrap();
        self.check_features(features)?;
        Ok(self.dense(&Self::pool(features), input.n()))
    }

    fn check_features(&self, features: &Tensor4) -> Result<()> {
        if features.c() != self.head.features {
            return Err(Error::shape(format!(
                "body emits {} channels, head expects {}",
                features.c(),
                self.head.features
            )));
        }
        Ok(())
    }

    fn check_labels(&self, input: &Tensor4, labels: &[usize]) -> Result<()> {
        if labels.len() != input.n() {
            return Err(Error::shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                input.n()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.head.classes) {
            return Err(Error::argument(format!(
                "label {bad} out of range for {} classes",
                self.head.classes
            )));
        }
        Ok(())
    }

    /// Loss without gradients.
    pub fn evaluate(&self, input: &Tensor4, labels: &[usize]) -> Result<BatchLoss> {
        self.check_labels(input, labels)?;
        let logits = self.forward(input)?;
        let (loss, correct, _) = softmax_cross_entropy(&logits, labels, self.head.classes);
        Ok(BatchLoss { loss, correct })
    }

    pub fn loss_and_grads(
        &self,
        input: &Tensor4,
        labels: &[usize],
    ) -> Result<(BatchLoss, NetworkGrads)> {
        self.check_labels(input, labels)?;
        let n = input.n();
        let acts = self.body(input)?;
        let features = acts.last().unwrap();
        self.check_features(features)?;
        let pooled = Self::pool(features);
        let logits = self.dense(&pooled, n);
        let (classes, feats) = (self.head.classes, self.head.features);
        let (loss, correct, dlogits) = softmax_cross_entropy(&logits, labels, classes);

        let mut head_weight = vec![0.0; classes * feats];
        let mut head_bias = vec![0.0; classes];
        let mut dpooled = vec![0.0; n * feats];
        for b in 0..n {
            for k in 0..classes {
                let d = dlogits[b * classes + k];
                head_bias[k] += d;
                for f in 0..feats {
                    head_weight[k * feats + f] += d * pooled[b * feats + f];
                    dpooled[b * feats + f] += d * self.head.weight[k * feats + f];
                }
            }
        }
        let area = features.plane_len() as f64;
        let mut grad = Tensor4::from_fn(n, feats, features.h(), features.w(), |b, c, _, _| {
            dpooled[b * feats + c] / area
        })?;

        let mut stage_grads = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate().rev() {
            let x = &acts[i];
            let g = match stage {
                Stage::Conv { spec, weights } => {
                    let g = grouped_conv_backward(&grad, x, weights, spec)?;
                    grad = g.grad_input;
                    StageGrad::Conv {
                        weight: g.grad_weight,
                        bias: g.grad_bias,
                    }
                }
                Stage::Scc { cfg, weights } => {
                    let g = scc_backward(&grad, x, weights, cfg)?;
                    grad = g.grad_input;
                    StageGrad::Scc {
                        weight: g.grad_weight,
                        bias: g.grad_bias,
                    }
                }
                Stage::Relu => {
                    let out = &acts[i + 1];
                    for (d, &y) in grad.data_mut().iter_mut().zip(out.data()) {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    StageGrad::Relu
                }
            };
            stage_grads.push(g);
        }
        stage_grads.reverse();
        Ok((
            BatchLoss { loss, correct },
            NetworkGrads {
                stages: stage_grads,
                head_weight,
                head_bias,
            },
        ))
    }

    /// Plain gradient-descent update `p -= lr * grad`.
    pub fn apply_sgd(&mut self, grads: &NetworkGrads, lr: f64) {
        fn step(params: &mut [f64], grad: &[f64], lr: f64) {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        for (stage, grad) in self.stages.iter_mut().zip(&grads.stages) {
            match (stage, grad) {
                (Stage::Conv { weights, .. }, StageGrad::Conv { weight, bias }) => {
                    step(&mut weights.weight, weight, lr);
                    if let (Some(p), Some(g)) = (weights.bias.as_mut(), bias) {
                        step(p, g, lr);
                    }
                }
                (Stage::Scc { weights, .. }, StageGrad::Scc { weight, bias }) => {
                    step(weights.weight_mut(), weight, lr);
                    if let (Some(p), Some(g)) = (weights.bias_mut(), bias) {
                        step(p, g, lr);
                    }
                }
                (Stage::Relu, StageGrad::Relu) => {}
                _ => unreachable!("gradient layout follows the stage list"),
            }
        }
        step(&mut self.head.weight, &grads.head_weight, lr);
        step(&mut self.head.bias, &grads.head_bias, lr);
    }
}

/// Returns `(mean loss, correct count, d loss / d logits)`.
fn softmax_cross_entropy(
    logits: &[f64],
    labels: &[usize],
    classes: usize,
) -> (f64, usize, Vec<f64>) {
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut correct = 0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        total += sum.ln() + max - row[label];
        let predicted = row
            .iter()
            .enumerate()
            .fold(0, |best, (k, &z)| if z > row[best] { k } else { best });
        if predicted == label {
            correct += 1;
        }
        for k in 0..classes {
            let p = exp[k] / sum;
            let target = if k == label { 1.0 } else { 0.0 };
            grad[b * classes + k] = (p - target) / n as f64;
        }
    }
    (total / n as f64, correct, grad)
}
