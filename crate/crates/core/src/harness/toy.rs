//! Desk-scale fixture models and a small supervised trainer.
//!
//! The trainer fits a synthetic Gaussian-blob classification set with
//! mini-batch SGD on cross-entropy. Batch-norm statistics are calibrated on
//! the training data before training starts and stay frozen; only weights,
//! biases and the batch-norm scale/shift are learned.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faultlab::RngStream;
use crate::netgraph::{
    forward_network, record_network, LayerParams, LayerSpec, ModelSpec, ParameterStore,
    DEFAULT_BN_EPS,
};
use crate::oneshot::RECOMMENDED_MIN_CLASSES;
use crate::tape::GradTape;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Mlp,
    Cnn,
    ResnetMini,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
            Arch::ResnetMini => "resnet-mini",
        }
    }

    pub fn input_shape(self) -> Vec<usize> {
        match self {
            Arch::Mlp => vec![64],
            Arch::Cnn | Arch::ResnetMini => vec![3, 16, 16],
        }
    }

    pub fn spec(self, num_classes: usize) -> ModelSpec {
        use LayerSpec::*;
        let conv = |cin, cout, stride| Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel_h: 3,
            kernel_w: 3,
            stride,
            padding: 1,
        };
        let bn = |channels| BatchNorm {
            channels,
            eps: DEFAULT_BN_EPS,
        };
        let layers = match self {
            Arch::Mlp => vec![
                Linear {
                    in_features: 64,
                    out_features: 128,
                },
                bn(128),
                ResidualBegin,
                Relu,
                Linear {
                    in_features: 128,
                    out_features: 128,
                },
                bn(128),
                Relu,
                Linear {
                    in_features: 128,
                    out_features: 128,
                },
                bn(128),
                ResidualAdd,
                Linear {
                    in_features: 128,
                    out_features: num_classes,
                },
                Softmax,
            ],
            Arch::Cnn => vec![
                conv(3, 16, 1),
                bn(16),
                Relu,
                MaxPool {
                    kernel: 2,
                    stride: 2,
                },
                conv(16, 32, 2),
                Relu,
                Flatten,
                Linear {
                    in_features: 512,
                    out_features: num_classes,
                },
                Softmax,
            ],
            Arch::ResnetMini => vec![
                conv(3, 16, 1),
                bn(16),
                Relu,
                ResidualBegin,
                conv(16, 16, 1),
                bn(16),
                Relu,
                conv(16, 16, 1),
                bn(16),
                ResidualAdd,
                Relu,
                MaxPool {
                    kernel: 2,
                    stride: 2,
                },
                conv(16, 32, 2),
                Relu,
                Flatten,
                Linear {
                    in_features: 512,
                    out_features: num_classes,
                },
                Softmax,
            ],
        };
        ModelSpec {
            input_shape: self.input_shape(),
            num_classes,
            layers,
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "cnn" => Ok(Arch::Cnn),
            "resnet-mini" => Ok(Arch::ResnetMini),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?}"
            ))),
        }
    }
}

/// He-normal weights and zero biases. Batch norms start as the identity,
/// except the one closing a residual branch, whose scale starts at zero.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> Result<ParameterStore> {
    let closes_branch = |i: usize| matches!(spec.layers.get(i + 1), Some(LayerSpec::ResidualAdd));
    let layers = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| match *layer {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let std = (2.0 / in_features as f64).sqrt();
                LayerParams::Dense {
                    weight: rng
                        .gaussian_tensor(&[out_features, in_features])
                        .map(|v| v * std)
                        .unwrap(),
                    bias: Tensor::zeros(&[out_features]),
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                let std = (2.0 / (in_channels * kernel_h * kernel_w) as f64).sqrt();
                LayerParams::Dense {
                    weight: rng
                        .gaussian_tensor(&[out_channels, in_channels, kernel_h, kernel_w])
                        .map(|v| v * std)
                        .unwrap(),
                    bias: Tensor::zeros(&[out_channels]),
                }
            }
            LayerSpec::BatchNorm { channels, .. } => LayerParams::BatchNorm {
                mean: Tensor::zeros(&[channels]),
                var: Tensor::filled(&[channels], 1.0),
                scale: Tensor::filled(&[channels], if closes_branch(i) { 0.0 } else { 1.0 }),
                shift: Tensor::zeros(&[channels]),
            },
            _ => LayerParams::None,
        })
        .collect();
    ParameterStore::new(spec, layers)
}

/// Labelled samples around one random centre per class.
#[derive(Clone, Debug)]
pub struct BlobDataset {
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl BlobDataset {
    /// Standard deviation of the class centres.
    pub const SCALE: f64 = 0.12;
    /// Within-class spread relative to [`Self::SCALE`].
    pub const NOISE: f64 = 1.0;

    pub fn generate(shape: &[usize], num_classes: usize, per_class: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed);
        let centres: Vec<Tensor> = (0..num_classes)
            .map(|_| rng.gaussian_tensor(shape).map(|v| v * Self::SCALE).unwrap())
            .collect();
        let mut samples = Vec::with_capacity(num_classes * per_class);
        let mut labels = Vec::with_capacity(samples.capacity());
        for _ in 0..per_class {
            for (label, centre) in centres.iter().enumerate() {
                let noise = rng.gaussian_tensor(shape);
                samples.push(
                    tensor::add(
                        centre,
                        &noise.map(|v| v * Self::NOISE * Self::SCALE).unwrap(),
                    )
                    .unwrap(),
                );
                labels.push(label);
            }
        }
        Self { samples, labels }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub target_accuracy: f64,
    pub per_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 30,
            target_accuracy: 0.9,
            per_class: 24,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub arch: Arch,
    pub spec: ModelSpec,
    pub params: ParameterStore,
    pub train_accuracy: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn accuracy(spec: &ModelSpec, params: &ParameterStore, data: &BlobDataset) -> Result<f64> {
    let hits = data
        .samples
        .par_iter()
        .zip(&data.labels)
        .map(|(x, &label)| {
            let y = forward_network(spec, params, x, false, true)?.output;
            let best = y
                .data()
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                )
                .0;
            Ok(usize::from(best == label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Sets every batch-norm layer's frozen mean and variance to the statistics
/// of its input over `data`, front to back.
pub fn calibrate_batchnorm(
    spec: &ModelSpec,
    params: &mut ParameterStore,
    data: &BlobDataset,
) -> Result<()> {
    for (l, layer) in spec.layers.iter().enumerate() {
        let LayerSpec::BatchNorm { channels, .. } = *layer else {
            continue;
        };
        let current = params.clone();
        let acts = data
            .samples
            .par_iter()
            .map(|x| {
                let mut tape = GradTape::new();
                let input = tape.constant(x);
                let rec = record_network(spec, &current, &mut tape, input, false, true)?;
                let src = if l == 0 {
                    input
                } else {
                    rec.layer_outputs[l - 1]
                };
                Ok(tape.value(src).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let per = acts[0].numel() / channels;
        let count = (acts.len() * per) as f64;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for a in &acts {
            for c in 0..channels {
                mean[c] += a.data()[c * per..(c + 1) * per].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for a in &acts {
            for c in 0..channels {
                var[c] += a.data()[c * per..(c + 1) * per]
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let mut layers = params.layers().to_vec();
        if let LayerParams::BatchNorm {
            mean: m, var: v, ..
        } = &mut layers[l]
        {
            *m = Tensor::from_vec(mean);
            *v = Tensor::from_vec(var);
        }
        *params = ParameterStore::new(spec, layers)?;
    }
    Ok(())
}

/// Per-layer parameter gradients of the cross-entropy loss for one sample.
/// Batch-norm mean and variance get no gradient.
fn sample_gradients(
    spec: &ModelSpec,
    params: &ParameterStore,
    x: &Tensor,
    label: usize,
) -> Result<Vec<Vec<Option<Tensor>>>> {
    let mut tape = GradTape::new();
    let input = tape.constant(x);
    let rec = record_network(spec, params, &mut tape, input, true, true)?;
    let probs = tensor::softmax(tape.value(rec.output));
    let mut upstream = probs.into_data();
    upstream[label] -= 1.0;
    let mut grads = tape.backward(&Tensor::from_vec(upstream))?;
    Ok(rec
        .params
        .iter()
        .map(|vars| vars.iter().map(|&v| grads.take(v)).collect())
        .collect())
}

/// Mini-batch SGD with momentum until `target_accuracy` or `max_epochs`.
/// Returns the final training accuracy.
pub fn train(
    spec: &ModelSpec,
    params: &mut ParameterStore,
    data: &BlobDataset,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut velocity: Vec<Vec<Vec<f64>>> = params
        .layers()
        .iter()
        .map(|lp| lp.tensors().iter().map(|t| vec![0.0; t.numel()]).collect())
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut acc = accuracy(spec, params, data)?;
    for epoch in 0..cfg.max_epochs {
        if acc >= cfg.target_accuracy {
            break;
        }
        // Fisher-Yates with the model's own stream keeps runs reproducible.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = batch
                .par_iter()
                .map(|&i| sample_gradients(spec, params, &data.samples[i], data.labels[i]))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut layers = params.layers().to_vec();
            for (l, lp) in layers.iter_mut().enumerate() {
                let mut tensors: Vec<Tensor> = lp.tensors().into_iter().cloned().collect();
                for (k, t) in tensors.iter_mut().enumerate() {
                    if per_sample.iter().all(|g| g[l][k].is_none()) {
                        continue;
                    }
                    let vel = &mut velocity[l][k];
                    let mut summed = vec![0.0; t.numel()];
                    for g in per_sample.iter().filter_map(|g| g[l][k].as_ref()) {
                        for (s, v) in summed.iter_mut().zip(g.data()) {
                            *s += v;
                        }
                    }
                    let updated = t
                        .data()
                        .iter()
                        .zip(vel.iter_mut())
                        .zip(&summed)
                        .map(|((&w, v), &g)| {
                            *v = cfg.momentum * *v + g * scale;
                            w - cfg.learning_rate * *v
                        })
                        .collect();
                    *t = Tensor::new(t.shape().to_vec(), updated)?;
                }
                *lp = LayerParams::from_tensors(&spec.layers[l], tensors)?;
            }
            *params = ParameterStore::new(spec, layers)?;
        }
        acc = accuracy(spec, params, data)?;
        log::debug!("epoch {epoch}: train accuracy {acc:.3}");
    }
    Ok(acc)
}

/// Deterministic fixture model. Untrained models keep their Gaussian
/// initialization; trained ones are fitted to the built-in blob dataset.
/// Parameters are returned at `f32` precision so a saved fixture reloads
/// bit for bit.
pub fn make_toy_model(
    arch: Arch,
    num_classes: usize,
    seed: u64,
    trained: bool,
) -> Result<ToyModel> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let mut warnings = Vec::new();
    if num_classes < RECOMMENDED_MIN_CLASSES {
        let msg = format!(
            "{num_classes} output classes is below {RECOMMENDED_MIN_CLASSES}; output statistics will be biased"
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let spec = arch.spec(num_classes);
    let mut rng = RngStream::new(seed);
    let mut params = init_params(&spec, &mut rng)?;
    let mut train_accuracy = None;
    if trained {
        let cfg = TrainConfig::default();
        let data =
            BlobDataset::generate(&spec.input_shape, num_classes, cfg.per_class, seed ^ 0xb10b);
        calibrate_batchnorm(&spec, &mut params, &data)?;
        train(&spec, &mut params, &data, &cfg, &mut rng)?;
        params = params.round_to_f32(&spec)?;
        let acc = accuracy(&spec, &params, &data)?;
        if acc < cfg.target_accuracy {
            let msg = format!(
                "training stopped after {} epochs at accuracy {acc:.3}, below target {}",
                cfg.max_epochs, cfg.target_accuracy
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        train_accuracy = Some(acc);
    } else {
        params = params.round_to_f32(&spec)?;
    }
    Ok(ToyModel {
        arch,
        spec,
        params,
        train_accuracy,
        warnings,
    })
}
