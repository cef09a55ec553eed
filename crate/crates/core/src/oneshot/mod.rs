//! One-shot test vectors: output statistics, the Gaussian KL divergence, the
//! three standardization losses, test-vector generation and detection.

mod detect;
mod generate;
mod vector_io;

pub use detect::{detect, measure, DetectionResult, Verdict};
pub use generate::{
    generate_test_vector, learning_rate, Baseline, GenConfig, GroundTruthMode, InitMode, TestVector,
};
pub use vector_io::{load_init_file, load_test_vector, save_test_vector, TV_FORMAT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faultlab::RngStream;
use crate::tensor::Tensor;

/// Floor for the output standard deviation. A collapsed output (for example
/// all weights stuck at zero) yields a huge but finite divergence.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Thresholds swept by default, loosest first.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-7];
pub const DEFAULT_THRESHOLD: f64 = 1e-4;

/// Below this many classes the output statistics are too coarse to be a
/// reliable fingerprint.
pub const RECOMMENDED_MIN_CLASSES: usize = 20;

/// Population mean and standard deviation of an output vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn output_stats(y: &Tensor) -> Result<OutputStats> {
    let n = y.numel();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "output statistics need at least 2 values, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = y.sum() / nf;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    Ok(OutputStats {
        mean,
        std: var.sqrt().max(SIGMA_FLOOR),
        n,
    })
}

/// `KL(N(mu_hat, sigma_hat^2) || N(mu, sigma^2))` in nats.
pub fn kl_general(mu_hat: f64, sigma_hat: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma_hat > 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "standard deviations must be positive, got {sigma_hat} and {sigma}"
        )));
    }
    let d = mu_hat - mu;
    let kl =
        sigma.ln() - sigma_hat.ln() + (sigma_hat * sigma_hat + d * d) / (2.0 * sigma * sigma) - 0.5;
    // Rounding can leave a few ulps below zero next to the optimum.
    Ok(kl.max(0.0))
}

/// Divergence of the observed output distribution from the unit Gaussian.
pub fn kl_divergence(stats: &OutputStats) -> f64 {
    kl_general(stats.mean, stats.std.max(SIGMA_FLOOR), 0.0, 1.0).expect("positive deviations")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    PointwiseKl,
    Moment,
    Mse,
}

impl LossKind {
    pub fn needs_target(self) -> bool {
        !matches!(self, LossKind::Moment)
    }
}

/// `(y - mean) / std`, the self-standardized target.
pub fn ground_truth(y: &Tensor) -> Result<Tensor> {
    let s = output_stats(y)?;
    if s.std <= SIGMA_FLOOR {
        return Err(Error::InvalidArgument(
            "cannot standardize a constant output".into(),
        ));
    }
    y.map(|v| (v - s.mean) / s.std)
}

/// `n` draws from the unit Gaussian, the alternative target.
pub fn ground_truth_sample(n: usize, rng: &mut RngStream) -> Tensor {
    rng.gaussian_tensor(&[n])
}

fn same_len(y: &Tensor, target: &Tensor) -> Result<()> {
    if y.numel() != target.numel() {
        return Err(Error::Shape(format!(
            "output has {} values, target {}",
            y.numel(),
            target.numel()
        )));
    }
    Ok(())
}

/// `(1/N) sum y_i ln(y_i / t_i)`; every entry must be strictly positive.
pub fn loss_pointwise_kl(y: &Tensor, target: &Tensor) -> Result<f64> {
    pointwise_kl_with_grad(y, target).map(|(l, _)| l)
}

fn pointwise_kl_with_grad(y: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    same_len(y, target)?;
    if let Some((a, b)) = y
        .data()
        .iter()
        .zip(target.data())
        .find(|(a, b)| **a <= 0.0 || **b <= 0.0)
    {
        return Err(Error::InvalidArgument(format!(
            "pointwise KL loss needs positive values, got output {a} and target {b}"
        )));
    }
    let n = y.numel() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y.numel());
    for (&a, &b) in y.data().iter().zip(target.data()) {
        let log_ratio = (a / b).ln();
        loss += a * log_ratio;
        grad.push((log_ratio + 1.0) / n);
    }
    Ok((loss / n, Tensor::new(y.shape().to_vec(), grad)?))
}

/// `mean^2 + (1 - std)^2` of the output.
pub fn loss_moment(y: &Tensor) -> Result<f64> {
    moment_with_grad(y).map(|(l, _)| l)
}

fn moment_with_grad(y: &Tensor) -> Result<(f64, Tensor)> {
    let s = output_stats(y)?;
    let n = s.n as f64;
    let loss = s.mean * s.mean + (1.0 - s.std) * (1.0 - s.std);
    // d std / d y_i = (y_i - mean) / (N std); zero once the floor is active.
    let std_coeff = if s.std > SIGMA_FLOOR {
        -2.0 * (1.0 - s.std) / (n * s.std)
    } else {
        0.0
    };
    let grad = y
        .data()
        .iter()
        .map(|&v| 2.0 * s.mean / n + std_coeff * (v - s.mean))
        .collect();
    Ok((loss, Tensor::new(y.shape().to_vec(), grad)?))
}

/// `(1/N) sum (y_i - t_i)^2`.
pub fn loss_mse(y: &Tensor, target: &Tensor) -> Result<f64> {
    mse_with_grad(y, target).map(|(l, _)| l)
}

fn mse_with_grad(y: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    same_len(y, target)?;
    let n = y.numel() as f64;
    let diff: Vec<f64> = y
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| a - b)
        .collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.iter().map(|d| 2.0 * d / n).collect();
    Ok((loss, Tensor::new(y.shape().to_vec(), grad)?))
}

/// Loss value and its gradient with respect to `y`; the target is held
/// constant.
pub fn loss_with_grad(
    kind: LossKind,
    y: &Tensor,
    target: Option<&Tensor>,
) -> Result<(f64, Tensor)> {
    let need =
        || target.ok_or_else(|| Error::InvalidArgument(format!("{kind:?} loss needs a target")));
    match kind {
        LossKind::Moment => moment_with_grad(y),
        LossKind::Mse => mse_with_grad(y, need()?),
        LossKind::PointwiseKl => pointwise_kl_with_grad(y, need()?),
    }
}
