//! Minimal dense-tensor network engine.
//!
//! Supports dense, 2-d convolution (stride 1), leaky-ReLU/ReLU, max-pool and
//! flatten layers with cross-entropy, squared-error, or raw-sum losses. The
//! batch loss is always the mean of the per-sample losses.

mod engine;
pub mod scalar;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use scalar::{Dual, Scalar};

/// Row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, different shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default)]
        padding: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    /// Plain ReLU. Its zero-gradient regions require a noise cap on the
    /// optimal noise defenses.
    Relu,
    MaxPool {
        kernel: usize,
    },
    Flatten,
}

fn default_true() -> bool {
    true
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::LeakyRelu { .. } => "leaky-relu",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "max-pool",
            Layer::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Softmax cross-entropy against integer class labels.
    CrossEntropy,
    /// `½‖out − t‖²` against real targets (or one-hot class labels).
    SquaredError,
    /// The sum of the network outputs, used as-is.
    Sum,
}

/// Serializable network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Per-sample input shape, e.g. `[784]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub loss: LossKind,
}

/// A contiguous run of parameters belonging to one layer tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSegment {
    /// e.g. `"0.weight"`, `"3.bias"`.
    pub name: String,
    pub layer: usize,
    pub start: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

/// A validated [`ModelSpec`] with resolved shapes and parameter layout.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output.
    shapes: Vec<Vec<usize>>,
    /// Parameter offset of each layer (weights first, then bias).
    offsets: Vec<usize>,
    segments: Arc<[ParamSegment]>,
    param_count: usize,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
            return Err(Error::config(format!(
                "input shape must have positive extents, got {:?}",
                spec.input_shape
            )));
        }
        let mut shapes = vec![spec.input_shape.clone()];
        let mut offsets = Vec::with_capacity(spec.layers.len());
        let mut segments = Vec::new();
        let mut next = 0usize;
        for (i, layer) in spec.layers.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            offsets.push(next);
            let bad = |msg: String| Error::config(format!("layer {i} ({}): {msg}", layer.kind()));
            let out = match *layer {
                Layer::Dense {
                    inputs,
                    outputs,
                    bias,
                } => {
                    if cur.len() != 1 || cur[0] != inputs {
                        return Err(bad(format!("expects flat input of {inputs}, got {cur:?}")));
                    }
                    if outputs == 0 {
                        return Err(bad("outputs must be positive".into()));
                    }
                    segments.push(ParamSegment {
                        name: format!("{i}.weight"),
                        layer: i,
                        start: next,
                        len: inputs * outputs,
                        shape: vec![outputs, inputs],
                    });
                    next += inputs * outputs;
                    if bias {
                        segments.push(ParamSegment {
                            name: format!("{i}.bias"),
                            layer: i,
                            start: next,
                            len: outputs,
                            shape: vec![outputs],
                        });
                        next += outputs;
                    }
                    vec![outputs]
                }
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => {
                    if cur.len() != 3 || cur[0] != in_channels {
                        return Err(bad(format!(
                            "expects [{in_channels}, h, w] input, got {cur:?}"
                        )));
                    }
                    if out_channels == 0 || kernel == 0 {
                        return Err(bad("channels and kernel must be positive".into()));
                    }
                    let (h, w) = (cur[1] + 2 * padding, cur[2] + 2 * padding);
                    if h < kernel || w < kernel {
                        return Err(bad(format!("kernel {kernel} larger than padded input")));
                    }
                    let wlen = out_channels * in_channels * kernel * kernel;
                    segments.push(ParamSegment {
                        name: format!("{i}.weight"),
                        layer: i,
                        start: next,
                        len: wlen,
                        shape: vec![out_channels, in_channels, kernel, kernel],
                    });
                    next += wlen;
                    segments.push(ParamSegment {
                        name: format!("{i}.bias"),
                        layer: i,
                        start: next,
                        len: out_channels,
                        shape: vec![out_channels],
                    });
                    next += out_channels;
                    vec![out_channels, h - kernel + 1, w - kernel + 1]
                }
                Layer::LeakyRelu { slope } => {
                    if !(slope > 0.0 && slope.is_finite()) {
                        return Err(bad(format!("slope must be positive, got {slope}")));
                    }
                    cur
                }
                Layer::Relu => cur,
                Layer::MaxPool { kernel } => {
                    if cur.len() != 3 {
                        return Err(bad(format!("expects [c, h, w] input, got {cur:?}")));
                    }
                    if kernel == 0 || cur[1] < kernel || cur[2] < kernel {
                        return Err(bad(format!("kernel {kernel} does not fit {cur:?}")));
                    }
                    vec![cur[0], cur[1] / kernel, cur[2] / kernel]
                }
                Layer::Flatten => vec![cur.iter().product()],
            };
            shapes.push(out);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 {
            return Err(Error::config(format!(
                "network output must be flat, got {out:?}"
            )));
        }
        Ok(Self {
            spec,
            shapes,
            offsets,
            segments: segments.into(),
            param_count: next,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Number of parameters `d`.
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Number of scalars in one input sample.
    pub fn sample_dim(&self) -> usize {
        self.spec.input_shape.iter().product()
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn segments(&self) -> &[ParamSegment] {
        &self.segments
    }

    pub fn has_relu(&self) -> bool {
        self.spec.layers.iter().any(|l| matches!(l, Layer::Relu))
    }

    /// Default initialization: `U(−1/√fan_in, 1/√fan_in)` for every tensor.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.param_count];
        for seg in self.segments.iter() {
            let fan_in = match self.spec.layers[seg.layer] {
                Layer::Dense { inputs, .. } => inputs,
                Layer::Conv2d {
                    in_channels,
                    kernel,
                    ..
                } => in_channels * kernel * kernel,
                _ => 1,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[seg.start..seg.start + seg.len] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        ParamVector {
            values,
            segments: self.segments.clone(),
        }
    }

    pub fn params(&self, values: Vec<f64>) -> Result<ParamVector> {
        if values.len() != self.param_count {
            return Err(Error::shape(format!(
                "model has {} parameters but {} values were given",
                self.param_count,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("parameter {i} is not finite")));
        }
        Ok(ParamVector {
            values,
            segments: self.segments.clone(),
        })
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        let sample = &self.spec.input_shape;
        if batch.inputs.shape()[1..] != sample[..] {
            return Err(Error::shape(format!(
                "batch samples have shape {:?}, model expects {sample:?}",
                &batch.inputs.shape()[1..]
            )));
        }
        let classes = self.output_dim();
        match (&batch.labels, self.spec.loss) {
            (Labels::Classes(c), _) => {
                if let Some(&bad) = c.iter().find(|&&c| c >= classes) {
                    return Err(Error::config(format!(
                        "label {bad} out of range for {classes} outputs"
                    )));
                }
                if self.spec.loss == LossKind::Sum {
                    return Err(Error::config("the sum loss takes no labels"));
                }
            }
            (Labels::Targets(t), LossKind::SquaredError) => {
                if t.shape() != [batch.size(), classes] {
                    return Err(Error::shape(format!(
                        "targets have shape {:?}, expected [{}, {classes}]",
                        t.shape(),
                        batch.size()
                    )));
                }
            }
            (Labels::Targets(_), _) => {
                return Err(Error::config(
                    "real-valued targets need the squared-error loss",
                ));
            }
            (Labels::None, LossKind::Sum) => {}
            (Labels::None, _) => return Err(Error::config("this loss needs labels")),
        }
        Ok(())
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::shape(format!(
                "model has {} parameters but the vector has {}",
                self.param_count,
                params.len()
            )));
        }
        Ok(())
    }

    /// Mean batch loss `L(x, Θ)`.
    pub fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let pass = self.run::<f64>(
            &params.values,
            batch.inputs.data(),
            &batch.labels,
            batch.size(),
            false,
            false,
        )?;
        Ok(pass.loss)
    }

    /// `g(x) = ∇_Θ L(x, Θ)`.
    pub fn param_gradient(&self, params: &ParamVector, batch: &Batch) -> Result<GradVector> {
        self.loss_and_param_gradient(params, batch).map(|(_, g)| g)
    }

    pub fn loss_and_param_gradient(
        &self,
        params: &ParamVector,
        batch: &Batch,
    ) -> Result<(f64, GradVector)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let pass = self.run::<f64>(
            &params.values,
            batch.inputs.data(),
            &batch.labels,
            batch.size(),
            true,
            false,
        )?;
        Ok((pass.loss, GradVector::new(pass.param_grad)))
    }

    /// `∇_x L(x, Θ)` with the shape of the batch inputs.
    pub fn input_gradient(&self, params: &ParamVector, batch: &Batch) -> Result<Tensor> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let pass = self.run::<f64>(
            &params.values,
            batch.inputs.data(),
            &batch.labels,
            batch.size(),
            false,
            true,
        )?;
        Tensor::new(batch.inputs.shape().to_vec(), pass.input_grad)
    }

    /// Runs the generic engine over any scalar type. Inputs and parameters
    /// must already be lifted into `T`; the caller is responsible for shape
    /// checks (see [`Model::check_batch`]).
    pub fn evaluate<T: Scalar>(
        &self,
        params: &[T],
        inputs: &[T],
        labels: &Labels,
        batch_size: usize,
        param_grad: bool,
        input_grad: bool,
    ) -> Result<Evaluation<T>> {
        if params.len() != self.param_count || inputs.len() != batch_size * self.sample_dim() {
            return Err(Error::shape("parameter or input length mismatch"));
        }
        self.run(params, inputs, labels, batch_size, param_grad, input_grad)
    }
}

/// Output of one engine pass. Gradient vectors are empty when not requested.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub loss: T,
    pub param_grad: Vec<T>,
    pub input_grad: Vec<T>,
}

/// Flat parameter vector `Θ ∈ R^d` plus the per-layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    segments: Arc<[ParamSegment]>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[ParamSegment] {
        &self.segments
    }

    /// `(start, len)` of each named tensor.
    pub fn layer_offsets(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.segments
            .iter()
            .map(|s| (s.name.as_str(), s.start, s.len))
    }

    pub fn to_layer_tensors(&self) -> Vec<(String, Tensor)> {
        self.segments
            .iter()
            .map(|s| {
                let data = self.values[s.start..s.start + s.len].to_vec();
                (s.name.clone(), Tensor::new(s.shape.clone(), data).unwrap())
            })
            .collect()
    }

    pub fn from_layer_tensors(model: &Model, tensors: &[(String, Tensor)]) -> Result<Self> {
        let segs = model.segments();
        if tensors.len() != segs.len() {
            return Err(Error::shape(format!(
                "expected {} tensors, got {}",
                segs.len(),
                tensors.len()
            )));
        }
        let mut values = Vec::with_capacity(model.param_count());
        for (seg, (name, t)) in segs.iter().zip(tensors) {
            if *name != seg.name || t.shape() != seg.shape.as_slice() {
                return Err(Error::shape(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    seg.name,
                    seg.shape
                )));
            }
            values.extend_from_slice(t.data());
        }
        model.params(values)
    }
}

/// A flat gradient vector of length `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
}

impl GradVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// Real-valued targets, shape `[b, outputs]`.
    Targets(Tensor),
    /// For losses that need no supervision.
    None,
}

/// A minibatch: inputs of shape `[b, ...]` and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Labels,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Labels) -> Result<Self> {
        if inputs.shape().len() < 2 {
            return Err(Error::shape(format!(
                "batch inputs need a leading batch axis, got {:?}",
                inputs.shape()
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::config("batch inputs contain non-finite values"));
        }
        let b = inputs.shape()[0];
        match &labels {
            Labels::Classes(c) if c.len() != b => {
                return Err(Error::shape(format!("{b} samples but {} labels", c.len())))
            }
            Labels::Targets(t) if t.shape()[0] != b || !t.is_finite() => {
                return Err(Error::shape(
                    "targets must be finite with one row per sample",
                ))
            }
            _ => {}
        }
        Ok(Self { inputs, labels })
    }

    pub fn size(&self) -> usize {
        self.inputs.shape()[0]
    }

    /// Total input dimension `m = b × per-sample dim`.
    pub fn input_dim(&self) -> usize {
        self.inputs.len()
    }

    pub fn sample_dim(&self) -> usize {
        self.inputs.len() / self.size()
    }

    /// Same labels, new inputs of identical shape.
    pub fn with_inputs(&self, data: Vec<f64>) -> Result<Self> {
        Batch::new(
            Tensor::new(self.inputs.shape().to_vec(), data)?,
            self.labels.clone(),
        )
    }

    /// Concatenates batches along the sample axis.
    pub fn concat(parts: &[&Batch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot concatenate zero batches"))?;
        let mut shape = first.inputs.shape().to_vec();
        let mut data = Vec::new();
        let mut classes = Vec::new();
        let mut targets = Vec::new();
        let mut total = 0;
        for p in parts {
            if p.inputs.shape()[1..] != shape[1..] {
                return Err(Error::shape("batches have different sample shapes"));
            }
            total += p.size();
            data.extend_from_slice(p.inputs.data());
            match (&p.labels, &first.labels) {
                (Labels::Classes(c), Labels::Classes(_)) => classes.extend_from_slice(c),
                (Labels::Targets(t), Labels::Targets(_)) => targets.extend_from_slice(t.data()),
                (Labels::None, Labels::None) => {}
                _ => return Err(Error::shape("batches have different label kinds")),
            }
        }
        shape[0] = total;
        let labels = match &first.labels {
            Labels::Classes(_) => Labels::Classes(classes),
            Labels::Targets(t) => Labels::Targets(Tensor::new(vec![total, t.shape()[1]], targets)?),
            Labels::None => Labels::None,
        };
        Batch::new(Tensor::new(shape, data)?, labels)
    }

    /// The `i`-th sample as a batch of one.
    pub fn sample(&self, i: usize) -> Batch {
        let d = self.sample_dim();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = 1;
        let inputs = Tensor::new(shape, self.inputs.data()[i * d..(i + 1) * d].to_vec()).unwrap();
        let labels = match &self.labels {
            Labels::Classes(c) => Labels::Classes(vec![c[i]]),
            Labels::Targets(t) => {
                let k = t.shape()[1];
                Labels::Targets(
                    Tensor::new(vec![1, k], t.data()[i * k..(i + 1) * k].to_vec()).unwrap(),
                )
            }
            Labels::None => Labels::None,
        };
        Batch { inputs, labels }
    }
}
