//! Test-vector files: a JSON manifest with a sibling `.bin` of little-endian
//! `f32` input values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Baseline, GenConfig, TestVector};
use crate::error::{Error, Result};
use crate::netgraph::io::{f32_bytes, f32_values, write_file};
use crate::tensor::Tensor;

pub const TV_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TvManifest {
    format_version: u32,
    shape: Vec<usize>,
    seed: u64,
    config: GenConfig,
    baseline: Baseline,
    converged: bool,
    data_file: String,
}

fn data_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_test_vector(tv: &TestVector, path: impl AsRef<Path>, overwrite: bool) -> Result<()> {
    let path = path.as_ref();
    let bin = data_path(path);
    if bin == path {
        return Err(Error::InvalidArgument(format!(
            "manifest path {} collides with its data file",
            path.display()
        )));
    }
    let manifest = TvManifest {
        format_version: TV_FORMAT_VERSION,
        shape: tv.input.shape().to_vec(),
        seed: tv.config.seed,
        config: tv.config.clone(),
        baseline: tv.baseline,
        converged: tv.converged,
        data_file: bin
            .file_name()
            .and_then(|n| n.to_str())
            .expect("utf-8 file name")
            .to_string(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    if !overwrite && bin.exists() {
        return Err(Error::Exists(bin));
    }
    write_file(path, &json, overwrite)?;
    write_file(&bin, &f32_bytes(tv.input.data().iter().copied()), overwrite)
}

pub fn load_test_vector(path: impl AsRef<Path>) -> Result<TestVector> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m: TvManifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if m.format_version != TV_FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format_version {}", m.format_version),
        ));
    }
    let bin = path.with_file_name(&m.data_file);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let values = f32_values(&bin, &bytes)?;
    let input = Tensor::new(m.shape, values).map_err(|e| Error::format(&bin, e.to_string()))?;
    Ok(TestVector {
        input,
        config: m.config,
        baseline: m.baseline,
        converged: m.converged,
        loss_history: Vec::new(),
    })
}

/// Initial input for generation: raw little-endian `f32` (`.bin`) of exactly
/// the input size, or an image resized to `[C,H,W]` with values in `[0,1]`.
pub fn load_init_file(path: &Path, shape: &[usize]) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "bin") {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let values = f32_values(path, &bytes)?;
        return Tensor::new(shape.to_vec(), values).map_err(|e| Error::format(path, e.to_string()));
    }
    let &[c, h, w] = shape else {
        return Err(Error::InvalidArgument(format!(
            "image initialization needs a [C,H,W] input, model takes {shape:?}"
        )));
    };
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle);
    let (raw, channels) = match c {
        1 => (img.to_luma8().into_raw(), 1),
        3 => (img.to_rgb8().into_raw(), 3),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "image initialization supports 1 or 3 channels, model has {c}"
            )))
        }
    };
    // Interleaved HWC pixels to planar CHW.
    let mut data = vec![0.0; c * h * w];
    for (i, px) in raw.iter().enumerate() {
        let (pos, ch) = (i / channels, i % channels);
        data[ch * h * w + pos] = f64::from(*px) / 255.0;
    }
    Tensor::new(shape.to_vec(), data)
}
