use serde::{Deserialize, Serialize};

use super::{kl_divergence, output_stats, OutputStats, TestVector};
use crate::error::{Error, Result};
use crate::netgraph::{logits, ModelSpec, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Clean,
    Faulty,
}

impl Verdict {
    /// Inclusive: a divergence equal to the threshold is a fault.
    pub fn from_divergence(d_kl: f64, threshold: f64) -> Self {
        if d_kl >= threshold {
            Verdict::Faulty
        } else {
            Verdict::Clean
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub stats: OutputStats,
    pub d_kl: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

/// One forward pass of the test vector: output statistics and divergence
/// from the unit Gaussian.
pub fn measure(
    spec: &ModelSpec,
    params: &ParameterStore,
    tv: &TestVector,
) -> Result<(OutputStats, f64)> {
    if tv.input.shape() != spec.input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "test vector {:?} does not fit model input {:?}",
            tv.input.shape(),
            spec.input_shape
        )));
    }
    let stats = output_stats(&logits(spec, params, &tv.input)?)?;
    Ok((stats, kl_divergence(&stats)))
}

pub fn detect(
    spec: &ModelSpec,
    params: &ParameterStore,
    tv: &TestVector,
    threshold: f64,
) -> Result<DetectionResult> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let (stats, d_kl) = measure(spec, params, tv)?;
    Ok(DetectionResult {
        stats,
        d_kl,
        threshold,
        verdict: Verdict::from_divergence(d_kl, threshold),
    })
}
