//! Layer-graph description, parameter storage and the full forward pass.

pub(crate) mod io;

pub use io::{load_model, save_model, save_weights, MANIFEST_VERSION};

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{window_out, Tensor};

pub const DEFAULT_BN_EPS: f64 = 1e-5;

static FORWARD_PASSES: AtomicU64 = AtomicU64::new(0);

/// Number of [`forward_network`] calls made by this process so far.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    #[serde(rename = "linear")]
    Linear {
        in_features: usize,
        out_features: usize,
    },
    #[serde(rename = "conv2d")]
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "batchnorm")]
    BatchNorm { channels: usize, eps: f64 },
    #[serde(rename = "maxpool")]
    MaxPool { kernel: usize, stride: usize },
    #[serde(rename = "avgpool")]
    AvgPool { kernel: usize, stride: usize },
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "residual-begin")]
    ResidualBegin,
    #[serde(rename = "residual-add")]
    ResidualAdd,
    #[serde(rename = "softmax")]
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ResidualBegin => "residual-begin",
            LayerSpec::ResidualAdd => "residual-add",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Named parameter tensors this layer owns, with their shapes.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => vec![
                (
                    "weight",
                    vec![out_channels, in_channels, kernel_h, kernel_w],
                ),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::BatchNorm { channels, .. } => ["mean", "var", "scale", "shift"]
                .into_iter()
                .map(|n| (n, vec![channels]))
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn is_parameterized(&self) -> bool {
        !self.param_shapes().is_empty()
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: String| Error::InvalidModel(format!("{} layer: {why}", self.kind()));
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(bad(format!("expects [{in_features}], got {input:?}")));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => match *input {
                [c, h, w] if c == in_channels => Ok(vec![
                    out_channels,
                    window_out(h, kernel_h, stride, padding).map_err(|e| bad(e.to_string()))?,
                    window_out(w, kernel_w, stride, padding).map_err(|e| bad(e.to_string()))?,
                ]),
                _ => Err(bad(format!("expects [{in_channels},H,W], got {input:?}"))),
            },
            LayerSpec::BatchNorm { channels, eps } => {
                if input.first() != Some(&channels) {
                    return Err(bad(format!("expects {channels} channels, got {input:?}")));
                }
                if !(eps >= 0.0) {
                    return Err(bad(format!("eps must be nonnegative, got {eps}")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
                match *input {
                    [c, h, w] => Ok(vec![
                        c,
                        window_out(h, kernel, stride, 0).map_err(|e| bad(e.to_string()))?,
                        window_out(w, kernel, stride, 0).map_err(|e| bad(e.to_string()))?,
                    ]),
                    _ => Err(bad(format!("expects [C,H,W], got {input:?}"))),
                }
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu
            | LayerSpec::ResidualBegin
            | LayerSpec::ResidualAdd
            | LayerSpec::Softmax => Ok(input.to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Shape after every layer; element 0 is the input shape. Fails on any
    /// structural problem before numeric work starts.
    pub fn propagate_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        if !matches!(self.input_shape.len(), 1 | 3) || self.input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!(
                "input shape must be [D] or [C,H,W] with positive sizes, got {:?}",
                self.input_shape
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidModel("num_classes must be positive".into()));
        }
        let mut shapes = vec![self.input_shape.clone()];
        let mut open_skip: Option<Vec<usize>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().expect("non-empty");
            match layer {
                LayerSpec::ResidualBegin => {
                    if open_skip.is_some() {
                        return Err(Error::InvalidModel(format!(
                            "nested residual-begin at layer {i}"
                        )));
                    }
                    open_skip = Some(cur.clone());
                }
                LayerSpec::ResidualAdd => match open_skip.take() {
                    None => {
                        return Err(Error::InvalidModel(format!(
                            "residual-add without begin at layer {i}"
                        )))
                    }
                    Some(s) if &s != cur => {
                        return Err(Error::InvalidModel(format!(
                            "residual-add at layer {i} joins {s:?} with {cur:?}"
                        )))
                    }
                    Some(_) => {}
                },
                LayerSpec::Softmax if i + 1 != self.layers.len() => {
                    return Err(Error::InvalidModel(
                        "softmax may only be the final layer".into(),
                    ));
                }
                _ => {}
            }
            let next = layer
                .output_shape(cur)
                .map_err(|e| Error::InvalidModel(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        if open_skip.is_some() {
            return Err(Error::InvalidModel("unterminated residual-begin".into()));
        }
        let logits = if self.ends_with_softmax() {
            &shapes[shapes.len() - 2]
        } else {
            &shapes[shapes.len() - 1]
        };
        if logits != &[self.num_classes] {
            return Err(Error::InvalidModel(format!(
                "final pre-softmax shape {logits:?} does not match num_classes {}",
                self.num_classes
            )));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.propagate_shapes().map(|_| ())
    }

    pub fn ends_with_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Softmax))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        mean: Tensor,
        var: Tensor,
        scale: Tensor,
        shift: Tensor,
    },
}

impl LayerParams {
    /// Tensors in the canonical order of [`LayerSpec::param_shapes`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Dense { weight, bias } => vec![weight, bias],
            LayerParams::BatchNorm {
                mean,
                var,
                scale,
                shift,
            } => vec![mean, var, scale, shift],
        }
    }

    pub(crate) fn from_tensors(layer: &LayerSpec, mut tensors: Vec<Tensor>) -> Result<Self> {
        let expected = layer.param_shapes();
        if tensors.len() != expected.len() {
            return Err(Error::InvalidModel(format!(
                "{} layer expects {} parameter tensors, got {}",
                layer.kind(),
                expected.len(),
                tensors.len()
            )));
        }
        Ok(match layer {
            LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => {
                let bias = tensors.pop().expect("len 2");
                let weight = tensors.pop().expect("len 2");
                LayerParams::Dense { weight, bias }
            }
            LayerSpec::BatchNorm { .. } => {
                let shift = tensors.pop().expect("len 4");
                let scale = tensors.pop().expect("len 4");
                let var = tensors.pop().expect("len 4");
                let mean = tensors.pop().expect("len 4");
                LayerParams::BatchNorm {
                    mean,
                    var,
                    scale,
                    shift,
                }
            }
            _ => LayerParams::None,
        })
    }
}

/// Parameters for every layer of a [`ModelSpec`], aligned by layer index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    layers: Vec<LayerParams>,
}

impl ParameterStore {
    pub fn new(spec: &ModelSpec, layers: Vec<LayerParams>) -> Result<Self> {
        let store = Self { layers };
        store.check(spec)?;
        Ok(store)
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerParams {
        &self.layers[i]
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::InvalidModel(format!(
                "parameter store has {} entries for {} layers",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (i, (layer, params)) in spec.layers.iter().zip(&self.layers).enumerate() {
            let expected = layer.param_shapes();
            let actual = params.tensors();
            let ok = expected.len() == actual.len()
                && expected
                    .iter()
                    .zip(&actual)
                    .all(|((_, s), t)| t.shape() == s.as_slice());
            if !ok {
                return Err(Error::InvalidModel(format!(
                    "layer {i} ({}) parameters do not conform to {:?}",
                    layer.kind(),
                    expected
                )));
            }
        }
        Ok(())
    }

    /// Crossbar-mapped weight tensors (linear and conv kernels), by layer.
    pub fn weights(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.layers.iter().enumerate().filter_map(|(i, p)| match p {
            LayerParams::Dense { weight, .. } => Some((i, weight)),
            _ => None,
        })
    }

    /// Copy with every weight tensor replaced by `f(layer, weight)`; biases and
    /// batch-norm constants are carried over untouched.
    pub fn map_weights<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &Tensor) -> Result<Tensor>,
    {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, p)| match p {
                LayerParams::Dense { weight, bias } => {
                    let w = f(i, weight)?;
                    if w.shape() != weight.shape() {
                        return Err(Error::Shape(format!("replacement weight for layer {i}")));
                    }
                    Ok(LayerParams::Dense {
                        weight: w,
                        bias: bias.clone(),
                    })
                }
                other => Ok(other.clone()),
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Copy with every tensor rounded to `f32`, the precision of the weight
    /// files. Saving and reloading the result is lossless.
    pub fn round_to_f32(&self, spec: &ModelSpec) -> Result<Self> {
        let layers = spec
            .layers
            .iter()
            .zip(&self.layers)
            .map(|(l, p)| {
                LayerParams::from_tensors(
                    l,
                    p.tensors().into_iter().map(Tensor::round_to_f32).collect(),
                )
            })
            .collect::<Result<_>>()?;
        Self::new(spec, layers)
    }

    pub fn num_weights(&self) -> usize {
        self.weights().map(|(_, w)| w.numel()).sum()
    }
}

/// Result of [`forward_network`]: the output vector and, on request, the
/// tape needed for input gradients.
#[derive(Debug)]
pub struct ForwardPass<'a> {
    pub output: Tensor,
    pub tape: Option<GradTape<'a>>,
}

/// Tape handles produced by [`record_network`].
#[derive(Clone, Debug)]
pub struct Recorded {
    pub output: Var,
    /// Per layer, parameter handles in [`LayerSpec::param_shapes`] order.
    pub params: Vec<Vec<Var>>,
    /// Per layer, the activation it produced.
    pub layer_outputs: Vec<Var>,
}

/// Records the network onto `tape` starting from `input`. Parameters become
/// tracked variables when `track_params` is set (training), constants
/// otherwise.
pub fn record_network<'a>(
    spec: &ModelSpec,
    params: &'a ParameterStore,
    tape: &mut GradTape<'a>,
    input: Var,
    track_params: bool,
    stop_before_softmax: bool,
) -> Result<Recorded> {
    spec.propagate_shapes()?;
    params.check(spec)?;
    if tape.value(input).shape() != spec.input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "model expects input {:?}, got {:?}",
            spec.input_shape,
            tape.value(input).shape()
        )));
    }
    let mut h = input;
    let mut skip: Option<Var> = None;
    let mut param_vars = Vec::with_capacity(spec.layers.len());
    let mut layer_outputs = Vec::with_capacity(spec.layers.len());
    for (layer, lp) in spec.layers.iter().zip(params.layers()) {
        let vars: Vec<Var> = lp
            .tensors()
            .into_iter()
            .map(|t| {
                if track_params {
                    tape.variable(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        h = match *layer {
            LayerSpec::Linear { .. } => tape.linear(h, vars[0], vars[1])?,
            LayerSpec::Conv2d {
                stride, padding, ..
            } => tape.conv2d(h, vars[0], vars[1], stride, padding)?,
            LayerSpec::Relu => tape.relu(h),
            LayerSpec::BatchNorm { eps, .. } => {
                tape.batchnorm(h, vars[0], vars[1], vars[2], vars[3], eps)?
            }
            LayerSpec::MaxPool { kernel, stride } => tape.maxpool2d(h, kernel, stride)?,
            LayerSpec::AvgPool { kernel, stride } => tape.avgpool2d(h, kernel, stride)?,
            LayerSpec::Flatten => {
                let n = tape.value(h).numel();
                tape.reshape(h, &[n])?
            }
            LayerSpec::ResidualBegin => {
                skip = Some(h);
                h
            }
            LayerSpec::ResidualAdd => {
                let s = skip.take().expect("validated residual pairing");
                tape.add(h, s)?
            }
            LayerSpec::Softmax => {
                if stop_before_softmax {
                    h
                } else {
                    tape.softmax(h)
                }
            }
        };
        param_vars.push(vars);
        layer_outputs.push(h);
    }
    tape.finalize(h);
    Ok(Recorded {
        output: h,
        params: param_vars,
        layer_outputs,
    })
}

/// Runs the network on `x`. With `stop_before_softmax` the trailing softmax,
/// if any, is skipped and the raw logits are returned.
pub fn forward_network<'a>(
    spec: &ModelSpec,
    params: &'a ParameterStore,
    x: &Tensor,
    with_tape: bool,
    stop_before_softmax: bool,
) -> Result<ForwardPass<'a>> {
    FORWARD_PASSES.fetch_add(1, Ordering::Relaxed);
    let mut tape = GradTape::new();
    let input = tape.input(x.clone());
    let out = record_network(spec, params, &mut tape, input, false, stop_before_softmax)?.output;
    let output = tape.value(out).clone();
    Ok(ForwardPass {
        output,
        tape: with_tape.then_some(tape),
    })
}

/// Pre-softmax logits for `x`.
pub fn logits(spec: &ModelSpec, params: &ParameterStore, x: &Tensor) -> Result<Tensor> {
    forward_network(spec, params, x, false, true).map(|f| f.output)
}
