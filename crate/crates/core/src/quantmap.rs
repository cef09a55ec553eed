//! Symmetric signed 8-bit quantization and the two crossbar cell layouts.
//!
//! Levels live in `[-127, 127]`; a level is stored sign-magnitude. In the
//! bit-wise layout every weight occupies eight binary cells ordered
//! `[sign, m6, m5, m4, m3, m2, m1, m0]`. In the level-wise layout a weight is a
//! sign cell plus one multi-level cell holding the magnitude `0..=127`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_LEVEL: i8 = 127;
pub const CELLS_PER_WEIGHT: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    levels: Vec<i8>,
    scale: f64,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, levels: Vec<i8>, scale: f64) -> Result<Self> {
        if shape.iter().product::<usize>() != levels.len() {
            return Err(Error::Shape(format!(
                "{} levels for shape {shape:?}",
                levels.len()
            )));
        }
        if let Some(bad) = levels.iter().find(|&&l| l < -MAX_LEVEL) {
            return Err(Error::InvalidArgument(format!(
                "level {bad} outside [-127, 127]"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            shape,
            levels,
            scale,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn levels(&self) -> &[i8] {
        &self.levels
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// `scale = max|W| / 127`, levels rounded half away from zero. An all-zero
/// tensor gets scale 1 and all-zero levels.
pub fn quantize_int8(w: &Tensor) -> Result<QuantizedTensor> {
    if w.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantize_int8"));
    }
    let max = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return QuantizedTensor::new(w.shape().to_vec(), vec![0; w.numel()], 1.0);
    }
    let scale = max / f64::from(MAX_LEVEL);
    let levels = w
        .data()
        .iter()
        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    QuantizedTensor::new(w.shape().to_vec(), levels, scale)
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    Tensor::new(
        q.shape.clone(),
        q.levels.iter().map(|&l| f64::from(l) * q.scale).collect(),
    )
    .expect("levels times finite scale are finite")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Bitwise,
    Levelwise,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Cells {
    /// Eight `{0,1}` cells per weight, sign first, magnitude MSB first.
    Bitwise(Vec<u8>),
    /// One sign cell and one magnitude cell per weight.
    Levelwise { sign: Vec<u8>, magnitude: Vec<u8> },
}

/// Crossbar image of one weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossbarImage {
    pub shape: Vec<usize>,
    pub scale: f64,
    pub cells: Cells,
}

impl CrossbarImage {
    pub fn encoding(&self) -> Encoding {
        match self.cells {
            Cells::Bitwise(_) => Encoding::Bitwise,
            Cells::Levelwise { .. } => Encoding::Levelwise,
        }
    }

    pub fn num_weights(&self) -> usize {
        self.shape.iter().product()
    }

    /// Physical cells in the image: 8 per weight bit-wise, 2 per weight
    /// (sign plus magnitude) level-wise.
    pub fn num_cells(&self) -> usize {
        match &self.cells {
            Cells::Bitwise(c) => c.len(),
            Cells::Levelwise { sign, magnitude } => sign.len() + magnitude.len(),
        }
    }
}

fn sign_magnitude(level: i8) -> (u8, u8) {
    (u8::from(level < 0), level.unsigned_abs())
}

fn from_sign_magnitude(sign: u8, magnitude: u8) -> i8 {
    let m = magnitude as i8;
    if sign == 1 {
        -m
    } else {
        m
    }
}

pub fn encode_level_bits(level: i8) -> [u8; CELLS_PER_WEIGHT] {
    let (sign, mag) = sign_magnitude(level);
    let mut cells = [0u8; CELLS_PER_WEIGHT];
    cells[0] = sign;
    for (i, cell) in cells[1..].iter_mut().enumerate() {
        *cell = (mag >> (6 - i)) & 1;
    }
    cells
}

pub fn decode_level_bits(cells: &[u8]) -> Result<i8> {
    if cells.len() != CELLS_PER_WEIGHT {
        return Err(Error::InvalidArgument(format!(
            "expected {CELLS_PER_WEIGHT} cells, got {}",
            cells.len()
        )));
    }
    if let Some(bad) = cells.iter().find(|&&c| c > 1) {
        return Err(Error::InvalidArgument(format!(
            "bit cell holds {bad}, expected 0 or 1"
        )));
    }
    let mag = cells[1..].iter().fold(0u8, |acc, &c| (acc << 1) | c);
    Ok(from_sign_magnitude(cells[0], mag))
}

pub fn encode_bitwise(q: &QuantizedTensor) -> CrossbarImage {
    CrossbarImage {
        shape: q.shape.clone(),
        scale: q.scale,
        cells: Cells::Bitwise(
            q.levels
                .iter()
                .flat_map(|&l| encode_level_bits(l))
                .collect(),
        ),
    }
}

pub fn decode_bitwise(img: &CrossbarImage) -> Result<QuantizedTensor> {
    let Cells::Bitwise(cells) = &img.cells else {
        return Err(Error::InvalidArgument("expected a bit-wise image".into()));
    };
    if cells.len() != img.num_weights() * CELLS_PER_WEIGHT {
        return Err(Error::Shape(format!(
            "{} cells for {} weights",
            cells.len(),
            img.num_weights()
        )));
    }
    let levels = cells
        .chunks_exact(CELLS_PER_WEIGHT)
        .map(decode_level_bits)
        .collect::<Result<_>>()?;
    QuantizedTensor::new(img.shape.clone(), levels, img.scale)
}

pub fn encode_levelwise(q: &QuantizedTensor) -> CrossbarImage {
    let (sign, magnitude) = q.levels.iter().map(|&l| sign_magnitude(l)).unzip();
    CrossbarImage {
        shape: q.shape.clone(),
        scale: q.scale,
        cells: Cells::Levelwise { sign, magnitude },
    }
}

pub fn decode_levelwise(img: &CrossbarImage) -> Result<QuantizedTensor> {
    let Cells::Levelwise { sign, magnitude } = &img.cells else {
        return Err(Error::InvalidArgument("expected a level-wise image".into()));
    };
    if sign.len() != img.num_weights() || magnitude.len() != img.num_weights() {
        return Err(Error::Shape(format!(
            "{}/{} cells for {} weights",
            sign.len(),
            magnitude.len(),
            img.num_weights()
        )));
    }
    let levels = sign
        .iter()
        .zip(magnitude)
        .map(|(&s, &m)| {
            if s > 1 {
                return Err(Error::InvalidArgument(format!("sign cell holds {s}")));
            }
            if m > MAX_LEVEL as u8 {
                return Err(Error::InvalidArgument(format!("magnitude cell holds {m}")));
            }
            Ok(from_sign_magnitude(s, m))
        })
        .collect::<Result<_>>()?;
    QuantizedTensor::new(img.shape.clone(), levels, img.scale)
}

pub fn encode(q: &QuantizedTensor, encoding: Encoding) -> CrossbarImage {
    match encoding {
        Encoding::Bitwise => encode_bitwise(q),
        Encoding::Levelwise => encode_levelwise(q),
    }
}

pub fn decode(img: &CrossbarImage) -> Result<QuantizedTensor> {
    match img.encoding() {
        Encoding::Bitwise => decode_bitwise(img),
        Encoding::Levelwise => decode_levelwise(img),
    }
}

/// Weight tensor as it computes once mapped: quantized then dequantized.
pub fn fake_quantize(w: &Tensor) -> Result<Tensor> {
    quantize_int8(w).map(|q| dequantize(&q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_levels() -> impl Iterator<Item = i8> {
        -127i8..=127
    }

    #[test]
    fn quantize_example() {
        let q = quantize_int8(&Tensor::from_vec(vec![-1.0, 0.5, 1.0])).unwrap();
        assert_eq!(q.levels(), &[-127, 64, 127]);
        assert_eq!(q.scale(), 1.0 / 127.0);
    }

    #[test]
    fn all_zero_tensor() {
        let q = quantize_int8(&Tensor::zeros(&[2])).unwrap();
        assert_eq!(q.levels(), &[0, 0]);
        assert_eq!(q.scale(), 1.0);
        assert_eq!(dequantize(&q).data(), &[0.0, 0.0]);
    }

    #[test]
    fn dequantize_examples() {
        let q = QuantizedTensor::new(vec![1], vec![127], 1.0 / 127.0).unwrap();
        assert_eq!(dequantize(&q).data(), &[1.0]);
        assert!(QuantizedTensor::new(vec![1], vec![-128], 1.0).is_err());
        assert!(QuantizedTensor::new(vec![1], vec![1], 0.0).is_err());
    }

    #[test]
    fn requantizing_every_level_is_identity() {
        let levels: Vec<i8> = all_levels().collect();
        let q = QuantizedTensor::new(vec![levels.len()], levels.clone(), 1.0 / 127.0).unwrap();
        let again = quantize_int8(&dequantize(&q)).unwrap();
        assert_eq!(again.levels(), levels.as_slice());
    }

    #[test]
    fn bit_patterns() {
        assert_eq!(encode_level_bits(5), [0, 0, 0, 0, 0, 1, 0, 1]);
        assert_eq!(encode_level_bits(-5), [1, 0, 0, 0, 0, 1, 0, 1]);
        assert_eq!(encode_level_bits(0), [0; 8]);
        assert_eq!(encode_level_bits(127), [0, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(decode_level_bits(&[1, 0, 0, 0, 0, 0, 0, 0]).unwrap(), 0);
        assert!(decode_level_bits(&[2, 0, 0, 0, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn level_cells() {
        let q = QuantizedTensor::new(vec![2], vec![-37, 0], 1.0).unwrap();
        let img = encode_levelwise(&q);
        assert_eq!(
            img.cells,
            Cells::Levelwise {
                sign: vec![1, 0],
                magnitude: vec![37, 0]
            }
        );
        assert_eq!(img.num_cells(), 4);
    }

    #[test]
    fn exhaustive_round_trip_both_encodings() {
        let levels: Vec<i8> = all_levels().collect();
        let q = QuantizedTensor::new(vec![levels.len()], levels, 0.25).unwrap();
        for enc in [Encoding::Bitwise, Encoding::Levelwise] {
            assert_eq!(decode(&encode(&q, enc)).unwrap(), q);
        }
    }

    #[test]
    fn decode_rejects_bad_cells() {
        let q = QuantizedTensor::new(vec![1], vec![3], 1.0).unwrap();
        let mut img = encode_levelwise(&q);
        img.cells = Cells::Levelwise {
            sign: vec![0],
            magnitude: vec![200],
        };
        assert!(decode_levelwise(&img).is_err());
        assert!(decode_bitwise(&img).is_err());
        let mut bits = encode_bitwise(&q);
        if let Cells::Bitwise(c) = &mut bits.cells {
            c[3] = 7;
        }
        assert!(decode_bitwise(&bits).is_err());
    }

    proptest! {
        #[test]
        fn quantization_error_is_half_a_step(v in prop::collection::vec(-5.0f64..5.0, 1..64)) {
            let w = Tensor::from_vec(v);
            let q = quantize_int8(&w).unwrap();
            let back = dequantize(&q);
            for (a, b) in w.data().iter().zip(back.data()) {
                let bound = q.scale() / 2.0 + 4.0 * f64::EPSILON * a.abs().max(1.0);
                prop_assert!((a - b).abs() <= bound);
            }
        }

        #[test]
        fn levels_are_scale_invariant(v in prop::collection::vec(-5.0f64..5.0, 1..64), k in 0u32..6) {
            // Powers of two keep W/scale bit-identical, so the rounding rule
            // sees exactly the same quotients.
            let alpha = f64::from(2u32.pow(k)) / 8.0;
            let w = Tensor::from_vec(v);
            let scaled = w.map(|x| x * alpha).unwrap();
            let (q, qs) = (quantize_int8(&w).unwrap(), quantize_int8(&scaled).unwrap());
            prop_assert_eq!(q.levels(), qs.levels());
            prop_assert!((qs.scale() - alpha * q.scale()).abs() <= 1e-15 * qs.scale().max(1.0));
        }
    }
}
