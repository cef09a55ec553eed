//! Randomized check of reverse-mode input gradients against central finite
//! differences on small networks built from every layer kind.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::faultlab::RngStream;
use crate::netgraph::{
    forward_network, LayerParams, LayerSpec, ModelSpec, ParameterStore, DEFAULT_BN_EPS,
};
use crate::tape::{backward_to_input, finite_difference_gradient};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Inputs closer than this to a ReLU or max-pool kink are redrawn.
pub const MIN_KINK_MARGIN: f64 = 1e-3;

pub const ALL_LAYER_KINDS: [&str; 10] = [
    "linear",
    "conv2d",
    "relu",
    "batchnorm",
    "maxpool",
    "avgpool",
    "flatten",
    "residual-begin",
    "residual-add",
    "softmax",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub layers: Vec<String>,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub trials: usize,
    /// Inputs redrawn because they sat too close to a kink.
    pub redraws: usize,
    pub max_rel_error: f64,
    pub kinds_covered: BTreeSet<String>,
    pub failures: Vec<TrialFailure>,
}

impl GradcheckReport {
    pub fn passed(&self, min_trials: usize) -> bool {
        self.failures.is_empty()
            && self.trials >= min_trials
            && ALL_LAYER_KINDS
                .iter()
                .all(|k| self.kinds_covered.contains(*k))
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn dense(rng: &mut RngStream, wshape: &[usize], fan_in: usize) -> LayerParams {
    let scale = (2.0 / fan_in as f64).sqrt();
    let weight = rng
        .gaussian_tensor(wshape)
        .map(|v| v * scale)
        .expect("finite");
    let bias = rng
        .gaussian_tensor(&[wshape[0]])
        .map(|v| 0.1 * v)
        .expect("finite");
    LayerParams::Dense { weight, bias }
}

fn batchnorm(rng: &mut RngStream, c: usize) -> LayerParams {
    let draw = |rng: &mut RngStream, f: &dyn Fn(&mut RngStream) -> f64| {
        Tensor::from_vec((0..c).map(|_| f(rng)).collect())
    };
    LayerParams::BatchNorm {
        mean: draw(rng, &|r| 0.2 * r.standard_normal()),
        var: draw(rng, &|r| 0.5 + 1.5 * r.uniform()),
        scale: draw(rng, &|r| 0.5 + r.uniform()),
        shift: draw(rng, &|r| 0.2 * r.standard_normal()),
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
}

impl Builder {
    fn push(&mut self, layer: LayerSpec, params: LayerParams) {
        self.layers.push(layer);
        self.params.push(params);
    }
}

/// A random small network. Trials alternate between a vector path and an
/// image path; residual blocks, pooling and batch norm are switched on at
/// random.
pub fn random_composite(rng: &mut RngStream, trial: usize) -> Result<(ModelSpec, ParameterStore)> {
    let mut b = Builder {
        layers: vec![],
        params: vec![],
    };
    let classes = 2 + rng.below(4);
    let input_shape;
    let mut features;
    if trial.is_multiple_of(2) {
        let d = 3 + rng.below(6);
        let hidden = 3 + rng.below(6);
        input_shape = vec![d];
        b.push(
            LayerSpec::Linear {
                in_features: d,
                out_features: hidden,
            },
            dense(rng, &[hidden, d], d),
        );
        if rng.below(2) == 0 {
            b.push(
                LayerSpec::BatchNorm {
                    channels: hidden,
                    eps: DEFAULT_BN_EPS,
                },
                batchnorm(rng, hidden),
            );
        }
        b.push(LayerSpec::Relu, LayerParams::None);
        if rng.below(2) == 0 {
            b.push(LayerSpec::ResidualBegin, LayerParams::None);
            b.push(
                LayerSpec::Linear {
                    in_features: hidden,
                    out_features: hidden,
                },
                dense(rng, &[hidden, hidden], hidden),
            );
            b.push(LayerSpec::ResidualAdd, LayerParams::None);
        }
        features = hidden;
    } else {
        let c = 1 + rng.below(3);
        let side = [4, 6][rng.below(2)];
        let out_c = 2 + rng.below(3);
        let k = [1, 3][rng.below(2)];
        input_shape = vec![c, side, side];
        b.push(
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: out_c,
                kernel_h: k,
                kernel_w: k,
                stride: 1,
                padding: k / 2,
            },
            dense(rng, &[out_c, c, k, k], c * k * k),
        );
        if rng.below(2) == 0 {
            b.push(
                LayerSpec::BatchNorm {
                    channels: out_c,
                    eps: DEFAULT_BN_EPS,
                },
                batchnorm(rng, out_c),
            );
        }
        let mut side_now = side;
        match rng.below(3) {
            0 => {
                b.push(
                    LayerSpec::MaxPool {
                        kernel: 2,
                        stride: 2,
                    },
                    LayerParams::None,
                );
                side_now /= 2;
            }
            1 => {
                b.push(
                    LayerSpec::AvgPool {
                        kernel: 2,
                        stride: 2,
                    },
                    LayerParams::None,
                );
                side_now /= 2;
            }
            _ => {}
        }
        b.push(LayerSpec::Relu, LayerParams::None);
        if rng.below(2) == 0 {
            b.push(LayerSpec::ResidualBegin, LayerParams::None);
            b.push(
                LayerSpec::Conv2d {
                    in_channels: out_c,
                    out_channels: out_c,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: 1,
                },
                dense(rng, &[out_c, out_c, 3, 3], out_c * 9),
            );
            b.push(LayerSpec::ResidualAdd, LayerParams::None);
        }
        b.push(LayerSpec::Flatten, LayerParams::None);
        features = out_c * side_now * side_now;
    }
    b.push(
        LayerSpec::Linear {
            in_features: features,
            out_features: classes,
        },
        dense(rng, &[classes, features], features),
    );
    features = classes;
    if rng.below(2) == 0 {
        b.push(LayerSpec::Softmax, LayerParams::None);
    }
    let spec = ModelSpec {
        input_shape,
        num_classes: features,
        layers: b.layers,
    };
    spec.validate()?;
    let params = ParameterStore::new(&spec, b.params)?;
    Ok((spec, params))
}

fn contracted_output(
    spec: &ModelSpec,
    params: &ParameterStore,
    upstream: &Tensor,
    x: &Tensor,
) -> Result<f64> {
    forward_network(spec, params, x, false, false)?
        .output
        .dot(upstream)
}

/// Runs `trials` random composites, each with a random input and a random
/// upstream gradient, and compares every input-gradient coordinate.
pub fn run_gradcheck(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = RngStream::new(seed);
    let mut report = GradcheckReport {
        trials: 0,
        redraws: 0,
        max_rel_error: 0.0,
        kinds_covered: BTreeSet::new(),
        failures: vec![],
    };
    for trial in 0..trials {
        let (spec, params) = random_composite(&mut rng, trial)?;
        let (x, tape) = loop {
            let x = rng.gaussian_tensor(&spec.input_shape);
            let pass = forward_network(&spec, &params, &x, true, false)?;
            let tape = pass.tape.expect("tape requested");
            if tape.kink_margin() >= MIN_KINK_MARGIN {
                break (x, tape);
            }
            report.redraws += 1;
            if report.redraws > 1000 * trials.max(1) {
                return Err(Error::InvalidArgument(
                    "could not draw inputs away from kinks".into(),
                ));
            }
        };
        let out_shape = tape
            .value(tape.output().expect("finalized"))
            .shape()
            .to_vec();
        let upstream = rng.gaussian_tensor(&out_shape);
        let analytic = backward_to_input(&tape, &upstream)?;
        let numeric = finite_difference_gradient(
            |p| contracted_output(&spec, &params, &upstream, p),
            &x,
            FD_STEP,
        )?;
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let err = relative_error(a, n);
            report.max_rel_error = report.max_rel_error.max(err);
            if err > REL_TOLERANCE {
                report.failures.push(TrialFailure {
                    trial,
                    layers: spec.layers.iter().map(|l| l.kind().to_string()).collect(),
                    index: i,
                    analytic: a,
                    numeric: n,
                });
            }
        }
        report
            .kinds_covered
            .extend(spec.layers.iter().map(|l| l.kind().to_string()));
        report.trials += 1;
    }
    Ok(report)
}
