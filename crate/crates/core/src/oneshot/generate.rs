use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{
    ground_truth, ground_truth_sample, kl_divergence, loss_with_grad, output_stats, LossKind,
    OutputStats, RECOMMENDED_MIN_CLASSES,
};
use crate::error::{Error, Result};
use crate::faultlab::RngStream;
use crate::netgraph::{forward_network, logits, ModelSpec, ParameterStore};
use crate::tape::backward_to_input;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundTruthMode {
    /// Standardize the current output each iteration.
    StandardizedSelf,
    /// Draw one unit-Gaussian target vector up front.
    GaussianSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitMode {
    Gaussian,
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub loss: LossKind,
    pub ground_truth: GroundTruthMode,
    pub alpha0: f64,
    pub iters: usize,
    pub decay_every: usize,
    pub seed: u64,
    pub init: InitMode,
    /// Divergence the baseline must reach for the vector to count as
    /// converged.
    pub target_dkl: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Moment,
            ground_truth: GroundTruthMode::StandardizedSelf,
            alpha0: 0.1,
            iters: 300,
            decay_every: 100,
            seed: 0,
            init: InitMode::Gaussian,
            target_dkl: 1e-7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0) || !self.alpha0.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha0 must be positive, got {}",
                self.alpha0
            )));
        }
        if self.iters == 0 || self.decay_every == 0 {
            return Err(Error::InvalidArgument(
                "iteration count and decay interval must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Step size at iteration `t` (1-based): divided by ten every `decay_every`
/// iterations.
pub fn learning_rate(alpha0: f64, decay_every: usize, t: usize) -> f64 {
    (0..t / decay_every).fold(alpha0, |lr, _| lr / 10.0)
}

/// Output statistics of the fault-free reference on the stored vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub mu0: f64,
    pub sigma0: f64,
    pub dkl0: f64,
}

impl Baseline {
    pub fn from_stats(s: &OutputStats) -> Self {
        Self {
            mu0: s.mean,
            sigma0: s.std,
            dkl0: kl_divergence(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestVector {
    /// Input values, exactly representable as `f32`.
    pub input: Tensor,
    pub config: GenConfig,
    pub baseline: Baseline,
    /// False when the baseline divergence stayed above `config.target_dkl`.
    pub converged: bool,
    /// Loss before each update, followed by the loss of the stored vector.
    pub loss_history: Vec<f64>,
}

fn initial_input(spec: &ModelSpec, cfg: &GenConfig, rng: &mut RngStream) -> Result<Tensor> {
    match &cfg.init {
        InitMode::Gaussian => Ok(rng.gaussian_tensor(&spec.input_shape)),
        InitMode::File { path } => super::load_init_file(path, &spec.input_shape),
    }
}

fn loss_of(cfg: &GenConfig, y: &Tensor, fixed_target: Option<&Tensor>) -> Result<(f64, Tensor)> {
    let own;
    let target = match (cfg.loss.needs_target(), cfg.ground_truth) {
        (false, _) => None,
        (true, GroundTruthMode::GaussianSample) => fixed_target,
        (true, GroundTruthMode::StandardizedSelf) => {
            own = ground_truth(y)?;
            Some(&own)
        }
    };
    let (loss, grad) = loss_with_grad(cfg.loss, y, target)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("generation loss"));
    }
    Ok((loss, grad))
}

/// Gradient descent on the network input so that the reference model's
/// logits have zero mean and unit standard deviation.
///
/// `reference` should be the quantized-then-dequantized fault-free model so
/// that detecting on it reproduces the stored baseline exactly.
pub fn generate_test_vector(
    spec: &ModelSpec,
    reference: &ParameterStore,
    cfg: &GenConfig,
) -> Result<TestVector> {
    cfg.validate()?;
    spec.validate()?;
    if spec.num_classes < 2 {
        return Err(Error::InvalidModel(
            "need at least two output classes".into(),
        ));
    }
    if spec.num_classes < RECOMMENDED_MIN_CLASSES {
        log::warn!(
            "model has only {} output classes; output statistics may be biased",
            spec.num_classes
        );
    }
    let mut rng = RngStream::new(cfg.seed);
    let mut x = initial_input(spec, cfg, &mut rng)?;
    let sampled_target = (cfg.loss.needs_target()
        && cfg.ground_truth == GroundTruthMode::GaussianSample)
        .then(|| ground_truth_sample(spec.num_classes, &mut rng));

    let mut history = Vec::with_capacity(cfg.iters + 1);
    for t in 1..=cfg.iters {
        let pass = forward_network(spec, reference, &x, true, true)?;
        let (loss, dy) = loss_of(cfg, &pass.output, sampled_target.as_ref())?;
        history.push(loss);
        let tape = pass.tape.expect("tape requested");
        let dx = backward_to_input(&tape, &dy)?;
        let lr = learning_rate(cfg.alpha0, cfg.decay_every, t);
        let next: Vec<f64> = x
            .data()
            .iter()
            .zip(dx.data())
            .map(|(a, g)| a - lr * g)
            .collect();
        x = Tensor::new(x.shape().to_vec(), next)?;
    }

    let input = x.round_to_f32();
    let y = logits(spec, reference, &input)?;
    history.push(loss_of(cfg, &y, sampled_target.as_ref())?.0);
    let baseline = Baseline::from_stats(&output_stats(&y)?);
    let converged = baseline.dkl0 < cfg.target_dkl;
    if !converged {
        log::warn!(
            "test vector did not converge: baseline divergence {:e} above target {:e}",
            baseline.dkl0,
            cfg.target_dkl
        );
    }
    Ok(TestVector {
        input,
        config: cfg.clone(),
        baseline,
        converged,
        loss_history: history,
    })
}
