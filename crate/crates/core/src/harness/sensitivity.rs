use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::faultlab::{
    instance_seed, realize_faulty_model, reference_model, FaultConfig, FaultKind, RngStream,
};
use crate::netgraph::{logits, ModelSpec, ParameterStore};
use crate::oneshot::{kl_general, measure, output_stats, TestVector};

/// Paired comparison of the generated vector against a random Gaussian input
/// on the same fault instances.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityStudy {
    pub kind: FaultKind,
    pub severity: f64,
    /// Divergence of the generated vector from the unit Gaussian, per instance.
    pub generated: Vec<f64>,
    /// Divergence of the random vector's output from its own fault-free
    /// statistics, per instance.
    pub random: Vec<f64>,
    pub mean_generated: f64,
    pub mean_random: f64,
    /// One-sided 95% bootstrap lower bound on mean(generated - random).
    pub lower_bound: f64,
}

impl SensitivityStudy {
    pub fn generated_is_more_sensitive(&self) -> bool {
        self.lower_bound > 0.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Lower `alpha` quantile of the bootstrap distribution of the sample mean.
pub fn bootstrap_mean_lower_bound(
    samples: &[f64],
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() || resamples == 0 {
        return Err(Error::InvalidArgument(
            "bootstrap needs samples and resamples".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let mut rng = RngStream::new(seed);
    let n = samples.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| samples[rng.below(n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let idx = ((alpha * resamples as f64).floor() as usize).min(resamples - 1);
    Ok(means[idx])
}

pub fn sensitivity_study(
    spec: &ModelSpec,
    params: &ParameterStore,
    tv: &TestVector,
    kind: FaultKind,
    severity: f64,
    instances: usize,
    seed: u64,
) -> Result<SensitivityStudy> {
    if instances < 2 {
        return Err(Error::InvalidArgument(
            "sensitivity study needs at least 2 instances".into(),
        ));
    }
    kind.check_severity(severity)?;
    let reference = reference_model(params)?;
    let random_input = RngStream::new(seed)
        .gaussian_tensor(&spec.input_shape)
        .round_to_f32();
    let random_base = output_stats(&logits(spec, &reference, &random_input)?)?;

    let pairs = (0..instances as u64)
        .into_par_iter()
        .map(|i| {
            let fault = FaultConfig {
                kind,
                severity,
                seed: instance_seed(seed, i),
            };
            let faulty = realize_faulty_model(params, &fault)?;
            let (_, generated) = measure(spec, &faulty, tv)?;
            let s = output_stats(&logits(spec, &faulty, &random_input)?)?;
            let random = kl_general(s.mean, s.std, random_base.mean, random_base.std)?;
            Ok((generated, random))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (generated, random): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let diffs: Vec<f64> = generated.iter().zip(&random).map(|(g, r)| g - r).collect();
    let lower_bound = bootstrap_mean_lower_bound(&diffs, 2000, 0.05, splitmix_tag(seed))?;
    Ok(SensitivityStudy {
        kind,
        severity,
        mean_generated: mean(&generated),
        mean_random: mean(&random),
        generated,
        random,
        lower_bound,
    })
}

fn splitmix_tag(seed: u64) -> u64 {
    crate::faultlab::splitmix64(seed ^ 0x5EED_B007)
}
