//! Seeded injection of conductance variations and cell faults.
//!
//! All randomness comes from [`RngStream`]: xoshiro256++ seeded through
//! SplitMix64, so a seed reproduces the same draws on every platform.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::ParameterStore;
use crate::quantmap::{self, Cells, CrossbarImage, Encoding};
use crate::tensor::Tensor;

/// SplitMix64 finalizer, used to derive independent per-instance seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for Monte Carlo instance `i` of a campaign.
pub fn instance_seed(base_seed: u64, i: u64) -> u64 {
    splitmix64(base_seed ^ i)
}

#[derive(Clone, Debug)]
pub struct RngStream(Xoshiro256PlusPlus);

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn gaussian_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.standard_normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("gaussian draws are finite")
    }

    /// `k` distinct indices from `0..n`, uniformly without replacement.
    pub fn distinct_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        index::sample(&mut self.0, n, k).into_vec()
    }

    pub fn level(&mut self) -> i8 {
        self.0.random_range(-127i8..=127)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    MultiplicativeVariation,
    AdditiveVariation,
    BitFlip,
    LevelFlip,
}

impl FaultKind {
    pub fn name(self) -> &'static str {
        match self {
            FaultKind::MultiplicativeVariation => "multiplicative-variation",
            FaultKind::AdditiveVariation => "additive-variation",
            FaultKind::BitFlip => "bit-flip",
            FaultKind::LevelFlip => "level-flip",
        }
    }

    pub fn is_flip(self) -> bool {
        matches!(self, FaultKind::BitFlip | FaultKind::LevelFlip)
    }

    /// Cell layout a flip fault acts on.
    pub fn encoding(self) -> Option<Encoding> {
        match self {
            FaultKind::BitFlip => Some(Encoding::Bitwise),
            FaultKind::LevelFlip => Some(Encoding::Levelwise),
            _ => None,
        }
    }

    pub fn check_severity(self, severity: f64) -> Result<()> {
        if !(severity >= 0.0) || !severity.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{} severity must be a nonnegative number, got {severity}",
                self.name()
            )));
        }
        if self.is_flip() && severity > 100.0 {
            return Err(Error::InvalidArgument(format!(
                "flip percentage must be at most 100, got {severity}"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for FaultKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One fault instance: eta0 for variations, flip percentage for flips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultConfig {
    pub kind: FaultKind,
    pub severity: f64,
    pub seed: u64,
}

impl FaultConfig {
    pub fn validate(&self) -> Result<()> {
        self.kind.check_severity(self.severity)
    }

    /// Reads `{kind, severity, seed?}` from JSON. `seed` takes precedence over
    /// the file's own seed; one of the two must be present.
    pub fn load(path: impl AsRef<Path>, seed: Option<u64>) -> Result<Self> {
        #[derive(Deserialize)]
        struct FaultFile {
            kind: FaultKind,
            severity: f64,
            seed: Option<u64>,
        }
        let path = path.as_ref();
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: FaultFile =
            serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let fault = FaultConfig {
            kind: file.kind,
            severity: file.severity,
            seed: seed.or(file.seed).ok_or_else(|| {
                Error::InvalidArgument(
                    "fault seed missing: pass one or set it in the fault file".into(),
                )
            })?,
        };
        fault.validate()?;
        Ok(fault)
    }
}

/// Number of cells (or weights) a flip of `percent` touches out of `n`.
pub fn flip_count(percent: f64, n: usize) -> usize {
    ((percent / 100.0) * n as f64).round() as usize
}

/// Gaussian perturbation of every weight tensor: `W * (1 + e)` or `W + e`
/// with `e ~ N(0, eta0^2)` drawn per element. Biases and batch-norm constants
/// are untouched.
pub fn inject_variation(
    params: &ParameterStore,
    kind: FaultKind,
    eta0: f64,
    rng: &mut RngStream,
) -> Result<ParameterStore> {
    kind.check_severity(eta0)?;
    let multiplicative = match kind {
        FaultKind::MultiplicativeVariation => true,
        FaultKind::AdditiveVariation => false,
        other => {
            return Err(Error::InvalidArgument(format!(
                "{other} is not a variation fault"
            )))
        }
    };
    if eta0 == 0.0 {
        return Ok(params.clone());
    }
    params.map_weights(|_, w| {
        let data = w
            .data()
            .iter()
            .map(|&v| {
                let e = eta0 * rng.standard_normal();
                if multiplicative {
                    v * (1.0 + e)
                } else {
                    v + e
                }
            })
            .collect();
        Tensor::new(w.shape().to_vec(), data)
    })
}

/// Complements exactly `round(P/100 * cells)` distinct cells of a bit-wise
/// image.
pub fn inject_bitflip(
    img: &CrossbarImage,
    percent: f64,
    rng: &mut RngStream,
) -> Result<CrossbarImage> {
    FaultKind::BitFlip.check_severity(percent)?;
    let Cells::Bitwise(cells) = &img.cells else {
        return Err(Error::InvalidArgument(
            "bit-flip needs a bit-wise image".into(),
        ));
    };
    let mut cells = cells.clone();
    let k = flip_count(percent, cells.len());
    for i in rng.distinct_indices(cells.len(), k) {
        cells[i] ^= 1;
    }
    Ok(CrossbarImage {
        shape: img.shape.clone(),
        scale: img.scale,
        cells: Cells::Bitwise(cells),
    })
}

/// Reassigns `round(P/100 * weights)` distinct weights of a level-wise image
/// to a level drawn uniformly from `[-127, 127]`.
pub fn inject_levelflip(
    img: &CrossbarImage,
    percent: f64,
    rng: &mut RngStream,
) -> Result<CrossbarImage> {
    FaultKind::LevelFlip.check_severity(percent)?;
    let Cells::Levelwise { sign, magnitude } = &img.cells else {
        return Err(Error::InvalidArgument(
            "level-flip needs a level-wise image".into(),
        ));
    };
    let (mut sign, mut magnitude) = (sign.clone(), magnitude.clone());
    let k = flip_count(percent, sign.len());
    for i in rng.distinct_indices(sign.len(), k) {
        let level = rng.level();
        sign[i] = u8::from(level < 0);
        magnitude[i] = level.unsigned_abs();
    }
    Ok(CrossbarImage {
        shape: img.shape.clone(),
        scale: img.scale,
        cells: Cells::Levelwise { sign, magnitude },
    })
}

/// The fault-free deployed model: every weight tensor quantized and
/// dequantized, everything else as given.
pub fn reference_model(params: &ParameterStore) -> Result<ParameterStore> {
    params.map_weights(|_, w| quantmap::fake_quantize(w))
}

/// Builds the faulty instance described by `fault` from full-precision
/// parameters. Flips go through quantize, encode, inject, decode and
/// dequantize per weight tensor; variations perturb the dequantized
/// reference. One stream seeded by `fault.seed` serves all layers in order.
pub fn realize_faulty_model(
    params: &ParameterStore,
    fault: &FaultConfig,
) -> Result<ParameterStore> {
    fault.validate()?;
    let mut rng = RngStream::new(fault.seed);
    match fault.kind.encoding() {
        None => inject_variation(
            &reference_model(params)?,
            fault.kind,
            fault.severity,
            &mut rng,
        ),
        Some(encoding) => params.map_weights(|_, w| {
            let img = quantmap::encode(&quantmap::quantize_int8(w)?, encoding);
            let faulty = match encoding {
                Encoding::Bitwise => inject_bitflip(&img, fault.severity, &mut rng)?,
                Encoding::Levelwise => inject_levelflip(&img, fault.severity, &mut rng)?,
            };
            Ok(quantmap::dequantize(&quantmap::decode(&faulty)?))
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{LayerParams, LayerSpec, ModelSpec};
    use crate::quantmap::{decode_bitwise, encode_bitwise, encode_levelwise, QuantizedTensor};

    fn small_model(seed: u64) -> (ModelSpec, ParameterStore) {
        let spec = ModelSpec {
            input_shape: vec![8],
            num_classes: 4,
            layers: vec![
                LayerSpec::Linear {
                    in_features: 8,
                    out_features: 16,
                },
                LayerSpec::BatchNorm {
                    channels: 16,
                    eps: 1e-5,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    in_features: 16,
                    out_features: 4,
                },
            ],
        };
        let mut rng = RngStream::new(seed);
        let params = ParameterStore::new(
            &spec,
            vec![
                LayerParams::Dense {
                    weight: rng.gaussian_tensor(&[16, 8]),
                    bias: rng.gaussian_tensor(&[16]),
                },
                LayerParams::BatchNorm {
                    mean: rng.gaussian_tensor(&[16]),
                    var: Tensor::filled(&[16], 2.0),
                    scale: rng.gaussian_tensor(&[16]),
                    shift: rng.gaussian_tensor(&[16]),
                },
                LayerParams::None,
                LayerParams::Dense {
                    weight: rng.gaussian_tensor(&[4, 16]),
                    bias: rng.gaussian_tensor(&[4]),
                },
            ],
        )
        .unwrap();
        (spec, params)
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference SplitMix64 generator seeded with 0.
        assert_eq!(splitmix64(0), 0xe220a8397b1dcdaf);
        assert_eq!(splitmix64(0x9e3779b97f4a7c15), 0x6e789e6aa1b965f4);
    }

    #[test]
    fn rng_is_reproducible() {
        let (mut a, mut b) = (RngStream::new(7), RngStream::new(7));
        for _ in 0..100 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
        assert_ne!(
            RngStream::new(8).standard_normal(),
            RngStream::new(7).standard_normal()
        );
    }

    #[test]
    fn zero_variation_is_identity() {
        let (_, params) = small_model(1);
        for kind in [
            FaultKind::MultiplicativeVariation,
            FaultKind::AdditiveVariation,
        ] {
            let out = inject_variation(&params, kind, 0.0, &mut RngStream::new(3)).unwrap();
            assert_eq!(out, params);
        }
    }

    #[test]
    fn variation_is_deterministic_and_contained() {
        let (_, params) = small_model(2);
        let a = inject_variation(
            &params,
            FaultKind::MultiplicativeVariation,
            0.04,
            &mut RngStream::new(11),
        )
        .unwrap();
        let b = inject_variation(
            &params,
            FaultKind::MultiplicativeVariation,
            0.04,
            &mut RngStream::new(11),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, params);
        for (orig, new) in params.layers().iter().zip(a.layers()) {
            match (orig, new) {
                (LayerParams::Dense { bias: b0, .. }, LayerParams::Dense { bias: b1, .. }) => {
                    assert_eq!(b0, b1)
                }
                (o, n) => assert_eq!(o, n),
            }
        }
    }

    #[test]
    fn variation_rejects_flip_kinds_and_negative_eta() {
        let (_, params) = small_model(3);
        let mut rng = RngStream::new(0);
        assert!(inject_variation(&params, FaultKind::BitFlip, 0.1, &mut rng).is_err());
        assert!(inject_variation(&params, FaultKind::AdditiveVariation, -0.1, &mut rng).is_err());
    }

    #[test]
    fn multiplicative_noise_statistics() {
        let eta = 0.04;
        let n = 1_000_000;
        let w = Tensor::filled(&[1000, 1000], 0.5);
        let spec = ModelSpec {
            input_shape: vec![1000],
            num_classes: 1000,
            layers: vec![LayerSpec::Linear {
                in_features: 1000,
                out_features: 1000,
            }],
        };
        let params = ParameterStore::new(
            &spec,
            vec![LayerParams::Dense {
                weight: w.clone(),
                bias: Tensor::zeros(&[1000]),
            }],
        )
        .unwrap();
        let out = inject_variation(
            &params,
            FaultKind::MultiplicativeVariation,
            eta,
            &mut RngStream::new(5),
        )
        .unwrap();
        let LayerParams::Dense { weight, .. } = out.layer(0) else {
            unreachable!()
        };
        let rel: Vec<f64> = weight.data().iter().map(|v| (v - 0.5) / 0.5).collect();
        let mean = rel.iter().sum::<f64>() / n as f64;
        let std = (rel.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(mean.abs() <= 3e-3 * eta, "mean {mean}");
        assert!((std - eta).abs() <= 0.01 * eta, "std {std}");
    }

    #[test]
    fn additive_noise_is_unbiased() {
        let eta = 1e-3;
        let spec = ModelSpec {
            input_shape: vec![1000],
            num_classes: 1000,
            layers: vec![LayerSpec::Linear {
                in_features: 1000,
                out_features: 1000,
            }],
        };
        let params = ParameterStore::new(
            &spec,
            vec![LayerParams::Dense {
                weight: Tensor::zeros(&[1000, 1000]),
                bias: Tensor::zeros(&[1000]),
            }],
        )
        .unwrap();
        let out = inject_variation(
            &params,
            FaultKind::AdditiveVariation,
            eta,
            &mut RngStream::new(9),
        )
        .unwrap();
        let LayerParams::Dense { weight, .. } = out.layer(0) else {
            unreachable!()
        };
        let n = weight.numel() as f64;
        let mean = weight.sum() / n;
        assert!(mean.abs() <= 3.0 * eta / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn bitflip_examples() {
        let q = QuantizedTensor::new(vec![1], vec![5], 1.0).unwrap();
        let img = encode_bitwise(&q);
        assert_eq!(
            inject_bitflip(&img, 0.0, &mut RngStream::new(1)).unwrap(),
            img
        );

        let flip = |cell: usize| {
            let mut out = img.clone();
            if let Cells::Bitwise(c) = &mut out.cells {
                c[cell] ^= 1;
            }
            decode_bitwise(&out).unwrap().levels()[0]
        };
        assert_eq!(flip(7), 4);
        assert_eq!(flip(0), -5);
        assert!(inject_bitflip(&img, 100.5, &mut RngStream::new(1)).is_err());
    }

    #[test]
    fn bitflip_count_is_exact() {
        let levels: Vec<i8> = (0..1000).map(|i| ((i * 37) % 255 - 127) as i8).collect();
        let q = QuantizedTensor::new(vec![1000], levels, 1.0).unwrap();
        let img = encode_bitwise(&q);
        for (p, seed) in [(0.02, 1), (0.1, 2), (1.0, 3), (37.5, 4), (100.0, 5)] {
            let out = inject_bitflip(&img, p, &mut RngStream::new(seed)).unwrap();
            let (Cells::Bitwise(a), Cells::Bitwise(b)) = (&img.cells, &out.cells) else {
                unreachable!()
            };
            let changed = a.iter().zip(b).filter(|(x, y)| x != y).count();
            assert_eq!(changed, flip_count(p, 8000));
        }
    }

    #[test]
    fn levelflip_statistics() {
        let q = QuantizedTensor::new(vec![1000], vec![3; 1000], 1.0).unwrap();
        let img = encode_levelwise(&q);
        assert_eq!(
            inject_levelflip(&img, 0.0, &mut RngStream::new(1)).unwrap(),
            img
        );
        let out = inject_levelflip(&img, 100.0, &mut RngStream::new(42)).unwrap();
        let again = inject_levelflip(&img, 100.0, &mut RngStream::new(42)).unwrap();
        assert_eq!(out, again);
        let levels = quantmap::decode_levelwise(&out).unwrap();
        let mean = levels.levels().iter().map(|&l| f64::from(l)).sum::<f64>() / 1000.0;
        assert!(mean.abs() <= 7.0, "mean {mean}");
        assert!(inject_levelflip(&encode_bitwise(&q), 1.0, &mut RngStream::new(1)).is_err());
    }

    #[test]
    fn zero_severity_matches_reference() {
        let (_, params) = small_model(4);
        let reference = reference_model(&params).unwrap();
        for kind in [
            FaultKind::BitFlip,
            FaultKind::LevelFlip,
            FaultKind::MultiplicativeVariation,
            FaultKind::AdditiveVariation,
        ] {
            let out = realize_faulty_model(
                &params,
                &FaultConfig {
                    kind,
                    severity: 0.0,
                    seed: 9,
                },
            )
            .unwrap();
            assert_eq!(out, reference, "{kind}");
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_models() {
        let (_, params) = small_model(5);
        for kind in [FaultKind::BitFlip, FaultKind::LevelFlip] {
            let a = realize_faulty_model(
                &params,
                &FaultConfig {
                    kind,
                    severity: 1.0,
                    seed: 1,
                },
            )
            .unwrap();
            let b = realize_faulty_model(
                &params,
                &FaultConfig {
                    kind,
                    severity: 1.0,
                    seed: 2,
                },
            )
            .unwrap();
            let a2 = realize_faulty_model(
                &params,
                &FaultConfig {
                    kind,
                    severity: 1.0,
                    seed: 1,
                },
            )
            .unwrap();
            assert_ne!(a, b);
            assert_eq!(a, a2);
        }
    }

    #[test]
    fn fault_config_json() {
        let cfg: FaultConfig =
            serde_json::from_str(r#"{"kind":"level-flip","severity":0.1,"seed":3}"#).unwrap();
        assert_eq!(cfg.kind, FaultKind::LevelFlip);
        assert!(FaultConfig {
            kind: FaultKind::BitFlip,
            severity: 101.0,
            seed: 0
        }
        .validate()
        .is_err());
    }
}
