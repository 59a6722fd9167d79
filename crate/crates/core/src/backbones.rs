//! MLP, STNN and CNN backbones.
//!
//! Every backbone maps a batch `m×C×T` to class probabilities `m×K` and
//! exposes the last hidden layer as the feature vector used by the center
//! loss.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objectives::{self, ClassCenters, Reduction};
use crate::tape::{GradTape, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BackboneKind {
    Mlp,
    Stnn,
    Cnn,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Mlp => "MLP",
            BackboneKind::Stnn => "STNN",
            BackboneKind::Cnn => "CNN",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MLP" => Ok(BackboneKind::Mlp),
            "STNN" => Ok(BackboneKind::Stnn),
            "CNN" => Ok(BackboneKind::Cnn),
            other => Err(Error::Config(format!("unknown backbone `{other}` (MLP|STNN|CNN)"))),
        }
    }
}

/// Architecture description. Hidden widths default to the ERP layout:
/// MLP 300 hidden units, STNN 16 spatial × 64 temporal filters, CNN
/// 16/32/64/128 temporal filters followed by a 256-filter spatial
/// convolution spanning all channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: BackboneKind,
    pub channels: usize,
    pub time_len: usize,
    pub n_classes: usize,
    pub mlp_hidden: usize,
    pub stnn_spatial: usize,
    pub stnn_temporal: usize,
    pub cnn_filters: [usize; 4],
    pub cnn_first_kernel: usize,
    pub cnn_kernel: usize,
    pub cnn_spatial: usize,
}

impl ModelSpec {
    pub fn new(kind: BackboneKind, channels: usize, time_len: usize, n_classes: usize) -> Self {
        ModelSpec {
            kind,
            channels,
            time_len,
            n_classes,
            mlp_hidden: 300,
            stnn_spatial: 16,
            stnn_temporal: 64,
            cnn_filters: [16, 32, 64, 128],
            cnn_first_kernel: 16,
            cnn_kernel: 3,
            cnn_spatial: 256,
        }
    }

    /// The parameter blocks (name, shape) in storage order, plus the
    /// feature width. Fails if any derived dimension is not positive.
    pub fn layout(&self) -> Result<(Vec<(String, Vec<usize>)>, usize)> {
        let fail = |layer: &str, detail: String| Error::Construction {
            layer: layer.to_string(),
            detail,
        };
        for (name, v) in [
            ("input.channels", self.channels),
            ("input.time_len", self.time_len),
        ] {
            if v == 0 {
                return Err(fail(name, "must be positive".into()));
            }
        }
        if self.n_classes < 2 {
            return Err(fail("output", format!("need at least 2 classes, got {}", self.n_classes)));
        }
        let (c, t, k) = (self.channels, self.time_len, self.n_classes);
        let mut blocks: Vec<(String, Vec<usize>)> = Vec::new();
        let feat = match self.kind {
            BackboneKind::Mlp => {
                let h = self.mlp_hidden;
                if h == 0 {
                    return Err(fail("hidden", "width must be positive".into()));
                }
                blocks.push(("hidden.weight".into(), vec![c * t, h]));
                blocks.push(("hidden.bias".into(), vec![h]));
                h
            }
            BackboneKind::Stnn => {
                let (s, f) = (self.stnn_spatial, self.stnn_temporal);
                if s == 0 || f == 0 {
                    return Err(fail("spatial/temporal", "filter counts must be positive".into()));
                }
                blocks.push(("spatial.weight".into(), vec![s, c]));
                blocks.push(("spatial.bias".into(), vec![s]));
                blocks.push(("temporal.weight".into(), vec![t, f]));
                blocks.push(("temporal.bias".into(), vec![f]));
                s * f
            }
            BackboneKind::Cnn => {
                let mut width = t;
                let mut c_in = 1;
                for (i, &filters) in self.cnn_filters.iter().enumerate() {
                    let name = format!("conv{}", i + 1);
                    let kw = if i == 0 { self.cnn_first_kernel } else { self.cnn_kernel };
                    if filters == 0 || kw == 0 {
                        return Err(fail(&name, "filter count and kernel width must be positive".into()));
                    }
                    if kw > width {
                        return Err(fail(&name, format!("kernel width {kw} exceeds input width {width}")));
                    }
                    width = width - kw + 1;
                    blocks.push((format!("{name}.weight"), vec![filters, c_in, 1, kw]));
                    blocks.push((format!("{name}.bias"), vec![filters]));
                    c_in = filters;
                    if i < 3 {
                        if width < 2 {
                            return Err(fail(
                                &format!("pool{}", i + 1),
                                format!("input width {width} is below the pool width 2"),
                            ));
                        }
                        width /= 2;
                    }
                }
                if self.cnn_spatial == 0 {
                    return Err(fail("conv5", "filter count must be positive".into()));
                }
                blocks.push(("conv5.weight".into(), vec![self.cnn_spatial, c_in, c, 1]));
                blocks.push(("conv5.bias".into(), vec![self.cnn_spatial]));
                self.cnn_spatial * width
            }
        };
        blocks.push(("output.weight".into(), vec![feat, k]));
        blocks.push(("output.bias".into(), vec![k]));
        Ok((blocks, feat))
    }

    pub fn feature_width(&self) -> Result<usize> {
        self.layout().map(|(_, n)| n)
    }
}

/// Named parameter tensors for a [`ModelSpec`], in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    feature_width: usize,
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// Softmax outputs, `m×K`.
    pub probs: Tensor,
    /// Last hidden layer, `m×n`.
    pub features: Tensor,
}

impl ForwardResult {
    pub fn feature_width(&self) -> usize {
        self.features.shape()[1]
    }

    /// Argmax per row; ties go to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

pub(crate) fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// A forward pass together with its tape.
pub struct Recording {
    pub tape: GradTape,
    pub params: Vec<NodeId>,
    pub probs: NodeId,
    pub features: NodeId,
    /// Named hidden activations in forward order.
    pub activations: Vec<(String, NodeId)>,
}

/// Loss value, per-block gradients, and the forward outputs they came from.
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub forward: ForwardResult,
}

const EVAL_CHUNK: usize = 128;

/// Initializes weights uniformly in `±sqrt(6 / fan_in)` and biases at zero.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    let (layout, feature_width) = spec.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in = fan_in(&name, &shape);
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data)?
        };
        names.push(name);
        tensors.push(tensor);
    }
    Ok(ModelParams {
        spec: spec.clone(),
        names,
        tensors,
        feature_width,
    })
}

fn fan_in(name: &str, shape: &[usize]) -> usize {
    match (name, shape) {
        // Stored as (filters × channels); each filter sums over channels.
        ("spatial.weight", [_, c]) => *c,
        (_, [d_in, _]) => *d_in,
        (_, [_, c_in, kh, kw]) => c_in * kh * kw,
        _ => shape.iter().product(),
    }
}

impl ModelParams {
    /// Reassembles parameters from stored tensors, validating every shape
    /// against the spec's layout.
    pub fn from_parts(spec: ModelSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let (layout, feature_width) = spec.layout()?;
        if layout.len() != tensors.len() {
            return Err(Error::Format(format!(
                "spec expects {} parameter blocks, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "block {name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams {
            spec,
            names: layout.into_iter().map(|(n, _)| n).collect(),
            tensors,
            feature_width,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Same architecture with different values.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        ModelParams::from_parts(self.spec.clone(), tensors)
    }

    pub fn checksum(&self) -> u64 {
        self.tensors
            .iter()
            .fold(0u64, |h, t| h.rotate_left(7) ^ t.checksum())
    }

    /// Fresh zero-initialized centers matching this model.
    pub fn zero_centers(&self) -> ClassCenters {
        ClassCenters::zeros(self.n_classes(), self.feature_width)
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        match *x.shape() {
            [m, c, t] if c == self.spec.channels && t == self.spec.time_len => Ok(m),
            _ => Err(Error::shape(
                "forward",
                format!(
                    "expected m×{}×{} input, got {:?}",
                    self.spec.channels,
                    self.spec.time_len,
                    x.shape()
                ),
            )),
        }
    }

    /// Forward pass recorded on a fresh tape.
    pub fn forward_recorded(&self, x: &Tensor) -> Result<Recording> {
        let m = self.check_input(x)?;
        let spec = &self.spec;
        let (c, t) = (spec.channels, spec.time_len);
        let mut tape = GradTape::new();
        let params: Vec<NodeId> = self.tensors.iter().map(|p| tape.param(p.clone())).collect();
        let input = tape.input(x.clone());
        let mut activations = Vec::new();
        let features = match spec.kind {
            BackboneKind::Mlp => {
                let flat = tape.reshape(input, &[m, c * t])?;
                let hidden = tape.linear(flat, params[0], params[1])?;
                tape.relu(hidden)
            }
            BackboneKind::Stnn => {
                let (s, f) = (spec.stnn_spatial, spec.stnn_temporal);
                // (s×C)·(C×T) per sample, expressed as an s-filter C×1 convolution.
                let x4 = tape.reshape(input, &[m, 1, c, t])?;
                let kernel = tape.reshape(params[0], &[s, 1, c, 1])?;
                let spatial = tape.conv2d(x4, kernel, Some(params[1]))?;
                activations.push(("spatial".to_string(), spatial));
                // (s×T)·(T×f) per sample.
                let rows = tape.reshape(spatial, &[m * s, t])?;
                let temporal = tape.linear(rows, params[2], params[3])?;
                tape.reshape(temporal, &[m, s * f])?
            }
            BackboneKind::Cnn => {
                let mut h = tape.reshape(input, &[m, 1, c, t])?;
                for layer in 0..4 {
                    let conv = tape.conv2d(h, params[2 * layer], Some(params[2 * layer + 1]))?;
                    h = tape.relu(conv);
                    activations.push((format!("conv{}", layer + 1), h));
                    if layer < 3 {
                        h = tape.maxpool(h)?;
                        activations.push((format!("pool{}", layer + 1), h));
                    }
                }
                let conv = tape.conv2d(h, params[8], Some(params[9]))?;
                let h = tape.relu(conv);
                activations.push(("conv5".to_string(), h));
                tape.reshape(h, &[m, self.feature_width])?
            }
        };
        activations.push(("features".to_string(), features));
        let n = params.len();
        let logits = tape.linear(features, params[n - 2], params[n - 1])?;
        let probs = tape.softmax(logits)?;
        Ok(Recording {
            tape,
            params,
            probs,
            features,
            activations,
        })
    }

    /// Shapes of the named hidden activations for input `x`.
    pub fn activation_shapes(&self, x: &Tensor) -> Result<Vec<(String, Vec<usize>)>> {
        let rec = self.forward_recorded(x)?;
        Ok(rec
            .activations
            .iter()
            .map(|(name, id)| (name.clone(), rec.tape.value(*id).shape().to_vec()))
            .collect())
    }

    /// Forward pass without keeping the tape; large batches are processed in
    /// chunks.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardResult> {
        let m = self.check_input(x)?;
        let mut probs = Vec::new();
        let mut features = Vec::new();
        let mut start = 0;
        while start < m {
            let end = (start + EVAL_CHUNK).min(m);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = if start == 0 && end == m { x.clone() } else { x.select_rows(&idx) };
            let rec = self.forward_recorded(&chunk)?;
            probs.push(rec.tape.value(rec.probs).clone());
            features.push(rec.tape.value(rec.features).clone());
            start = end;
        }
        Ok(ForwardResult {
            probs: Tensor::concat_rows(&probs.iter().collect::<Vec<_>>())?,
            features: Tensor::concat_rows(&features.iter().collect::<Vec<_>>())?,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward(x)?.predictions())
    }

    /// Joint loss on a labeled batch and its gradient for every parameter
    /// block.
    pub fn loss_and_grad(
        &self,
        x: &Tensor,
        labels: &[usize],
        centers: &ClassCenters,
        reduction: Reduction,
    ) -> Result<LossGrad> {
        if centers.width() != self.feature_width || centers.n_classes() != self.n_classes() {
            return Err(Error::shape(
                "loss_and_grad",
                format!(
                    "centers {:?} do not match model ({} classes, feature width {})",
                    centers.tensor().shape(),
                    self.n_classes(),
                    self.feature_width
                ),
            ));
        }
        let rec = self.forward_recorded(x)?;
        let mut tape = rec.tape;
        let loss = objectives::record_joint_loss(&mut tape, rec.probs, rec.features, labels, centers, reduction)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence(format!("joint loss is {value}")));
        }
        let mut grads = tape.backward(loss)?;
        let grads = rec
            .params
            .iter()
            .zip(&self.tensors)
            .map(|(&id, p)| grads.take_or_zeros(id, p.shape()))
            .collect();
        Ok(LossGrad {
            loss: value,
            grads,
            forward: ForwardResult {
                probs: tape.value(rec.probs).clone(),
                features: tape.value(rec.features).clone(),
            },
        })
    }
}
