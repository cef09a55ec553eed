//! JSON manifest plus little-endian `f32` weight blob with a trailing CRC32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerParams, LayerSpec, ModelSpec, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

/// Location of one parameter tensor in the blob, in `f32` elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Section {
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    #[serde(flatten)]
    layer: LayerSpec,
    #[serde(default)]
    param_offsets: BTreeMap<String, Section>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerEntry>,
}

pub(crate) fn write_file(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    if !overwrite && path.exists() {
        return Err(Error::Exists(path.to_path_buf()));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect()
}

pub(crate) fn f32_values(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::format(path, "length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Blob bytes (payload followed by its CRC32) and the manifest entries that
/// locate each tensor. The layout depends only on the spec.
fn encode_weights(spec: &ModelSpec, params: &ParameterStore) -> (Vec<u8>, Vec<LayerEntry>) {
    let mut payload = Vec::new();
    let mut offset = 0;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (layer, lp) in spec.layers.iter().zip(params.layers()) {
        let mut param_offsets = BTreeMap::new();
        for ((name, _), t) in layer.param_shapes().into_iter().zip(lp.tensors()) {
            param_offsets.insert(
                name.to_string(),
                Section {
                    offset,
                    len: t.numel(),
                },
            );
            offset += t.numel();
            payload.extend(f32_bytes(t.data().iter().copied()));
        }
        layers.push(LayerEntry {
            layer: layer.clone(),
            param_offsets,
        });
    }
    let crc = crc32fast::hash(&payload);
    payload.extend(crc.to_le_bytes());
    (payload, layers)
}

/// Writes only the weight blob; it pairs with any manifest saved for `spec`.
pub fn save_weights(
    spec: &ModelSpec,
    params: &ParameterStore,
    weights_path: impl AsRef<Path>,
    overwrite: bool,
) -> Result<()> {
    spec.validate()?;
    params.check(spec)?;
    write_file(
        weights_path.as_ref(),
        &encode_weights(spec, params).0,
        overwrite,
    )
}

/// Writes the manifest and weight blob. Existing files are only replaced
/// when `overwrite` is set.
pub fn save_model(
    spec: &ModelSpec,
    params: &ParameterStore,
    spec_path: impl AsRef<Path>,
    weights_path: impl AsRef<Path>,
    overwrite: bool,
) -> Result<()> {
    let (spec_path, weights_path) = (spec_path.as_ref(), weights_path.as_ref());
    spec.validate()?;
    params.check(spec)?;
    if !overwrite {
        for p in [spec_path, weights_path] {
            if p.exists() {
                return Err(Error::Exists(p.to_path_buf()));
            }
        }
    }

    let (payload, layers) = encode_weights(spec, params);
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        input_shape: spec.input_shape.clone(),
        num_classes: spec.num_classes,
        layers,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_file(spec_path, &json, overwrite)?;
    write_file(weights_path, &payload, overwrite)
}

pub fn load_model(
    spec_path: impl AsRef<Path>,
    weights_path: impl AsRef<Path>,
) -> Result<(ModelSpec, ParameterStore)> {
    let (spec_path, weights_path) = (spec_path.as_ref(), weights_path.as_ref());
    let text = fs::read(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(spec_path, e.to_string()))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::format(
            spec_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let spec = ModelSpec {
        input_shape: manifest.input_shape,
        num_classes: manifest.num_classes,
        layers: manifest.layers.iter().map(|e| e.layer.clone()).collect(),
    };
    spec.validate()?;

    let blob = fs::read(weights_path).map_err(|e| Error::io(weights_path, e))?;
    if blob.len() < 4 {
        return Err(Error::format(weights_path, "truncated: missing checksum"));
    }
    let (payload, tail) = blob.split_at(blob.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(payload) != stored {
        return Err(Error::format(weights_path, "checksum mismatch"));
    }
    let values = f32_values(weights_path, payload)?;

    let mut cursor = 0;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        let expected = entry.layer.param_shapes();
        if entry.param_offsets.len() != expected.len() {
            return Err(Error::format(
                spec_path,
                format!(
                    "layer {i} ({}) lists {} weight sections, expected {}",
                    entry.layer.kind(),
                    entry.param_offsets.len(),
                    expected.len()
                ),
            ));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for (name, shape) in expected {
            let sec = entry.param_offsets.get(name).ok_or_else(|| {
                Error::format(spec_path, format!("layer {i} is missing section {name:?}"))
            })?;
            let numel: usize = shape.iter().product();
            if sec.offset != cursor || sec.len != numel {
                return Err(Error::format(
                    spec_path,
                    format!(
                        "layer {i} section {name:?} at {sec:?} does not follow the blob layout"
                    ),
                ));
            }
            let data = values.get(cursor..cursor + numel).ok_or_else(|| {
                Error::format(
                    weights_path,
                    format!("truncated in layer {i} section {name:?}"),
                )
            })?;
            cursor += numel;
            tensors.push(
                Tensor::new(shape, data.to_vec())
                    .map_err(|e| Error::format(weights_path, e.to_string()))?,
            );
        }
        layers.push(LayerParams::from_tensors(&entry.layer, tensors)?);
    }
    if cursor != values.len() {
        return Err(Error::format(
            weights_path,
            format!(
                "{} trailing values not described by the manifest",
                values.len() - cursor
            ),
        ));
    }
    let params = ParameterStore::new(&spec, layers)?;
    Ok((spec, params))
}
