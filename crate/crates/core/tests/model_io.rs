use std::fs;

use oneshot_core::harness::{make_toy_model, Arch};
use oneshot_core::netgraph::{
    load_model, logits, save_model, save_weights, LayerParams, LayerSpec, ModelSpec, ParameterStore,
};
use oneshot_core::Error;
use serde_json::Value;
use tempfile::TempDir;

fn saved(arch: Arch) -> (TempDir, ModelSpec, ParameterStore) {
    let m = make_toy_model(arch, 24, 5, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(
        &m.spec,
        &m.params,
        dir.path().join("m.json"),
        dir.path().join("m.bin"),
        false,
    )
    .unwrap();
    (dir, m.spec, m.params)
}

fn load(dir: &TempDir) -> oneshot_core::Result<(ModelSpec, ParameterStore)> {
    load_model(dir.path().join("m.json"), dir.path().join("m.bin"))
}

fn edit_manifest(dir: &TempDir, f: impl FnOnce(&mut Value)) {
    let path = dir.path().join("m.json");
    let mut v: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
}

#[test]
fn fixtures_reload_bit_for_bit() {
    for arch in [Arch::Mlp, Arch::Cnn, Arch::ResnetMini] {
        let (dir, spec, params) = saved(arch);
        let (spec2, params2) = load(&dir).unwrap();
        assert_eq!(spec, spec2);
        for (a, b) in params.layers().iter().zip(params2.layers()) {
            for (ta, tb) in a.tensors().iter().zip(b.tensors()) {
                assert_eq!(ta.shape(), tb.shape());
                assert_eq!(ta.data(), tb.data());
            }
        }
    }
}

#[test]
fn reloaded_model_is_deterministic() {
    let (dir, spec, _) = saved(Arch::Cnn);
    let (_, params) = load(&dir).unwrap();
    let x = oneshot_core::faultlab::RngStream::new(3).gaussian_tensor(&spec.input_shape);
    let a = logits(&spec, &params, &x).unwrap();
    let b = logits(&spec, &params, &x).unwrap();
    let bits =
        |t: &oneshot_core::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn missing_weight_section_is_rejected() {
    let (dir, ..) = saved(Arch::Mlp);
    edit_manifest(&dir, |v| {
        let layers = v["layers"].as_array_mut().unwrap();
        let dense = layers.iter_mut().find(|l| l["kind"] == "linear").unwrap();
        dense["param_offsets"]
            .as_object_mut()
            .unwrap()
            .remove("bias");
    });
    assert!(matches!(load(&dir), Err(Error::Format { .. })));
}

#[test]
fn dropped_layer_no_longer_matches_blob() {
    let (dir, ..) = saved(Arch::Mlp);
    edit_manifest(&dir, |v| {
        v["layers"].as_array_mut().unwrap().remove(0);
    });
    assert!(load(&dir).is_err());
}

#[test]
fn unknown_layer_kind_is_rejected() {
    let (dir, ..) = saved(Arch::Mlp);
    edit_manifest(&dir, |v| v["layers"][2]["kind"] = Value::from("lstm"));
    assert!(matches!(load(&dir), Err(Error::Format { .. })));
}

#[test]
fn corrupted_blob_fails_checksum() {
    let (dir, ..) = saved(Arch::Mlp);
    let path = dir.path().join("m.bin");
    let mut blob = fs::read(&path).unwrap();
    blob[10] ^= 0x40;
    fs::write(&path, &blob).unwrap();
    let err = load(&dir).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");

    fs::write(&path, &blob[..2]).unwrap();
    assert!(load(&dir).is_err());
}

#[test]
fn overwrite_needs_the_flag() {
    let (dir, spec, params) = saved(Arch::Mlp);
    let (s, w) = (dir.path().join("m.json"), dir.path().join("m.bin"));
    assert!(matches!(
        save_model(&spec, &params, &s, &w, false),
        Err(Error::Exists(_))
    ));
    assert!(matches!(
        save_weights(&spec, &params, &w, false),
        Err(Error::Exists(_))
    ));
    save_model(&spec, &params, &s, &w, true).unwrap();
    save_weights(&spec, &params, &w, true).unwrap();
    load(&dir).unwrap();
}

#[test]
fn empty_layer_list_is_rejected() {
    let spec = ModelSpec {
        input_shape: vec![4],
        num_classes: 4,
        layers: vec![],
    };
    let params = ParameterStore::new(&spec, vec![]);
    let dir = tempfile::tempdir().unwrap();
    let saved = params.and_then(|p| {
        save_model(
            &spec,
            &p,
            dir.path().join("a.json"),
            dir.path().join("a.bin"),
            false,
        )
    });
    assert!(saved.is_err());
    assert!(!dir.path().join("a.json").exists());
}

#[test]
fn parameter_free_model_writes_only_a_checksum() {
    let spec = ModelSpec {
        input_shape: vec![6],
        num_classes: 6,
        layers: vec![LayerSpec::Relu, LayerSpec::Relu],
    };
    let params = ParameterStore::new(&spec, vec![LayerParams::None, LayerParams::None]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (s, w) = (dir.path().join("r.json"), dir.path().join("r.bin"));
    save_model(&spec, &params, &s, &w, false).unwrap();
    assert_eq!(fs::metadata(&w).unwrap().len(), 4);
    let (spec2, params2) = load_model(&s, &w).unwrap();
    assert_eq!(spec2, spec);
    assert_eq!(params2.num_weights(), 0);
}

#[test]
fn arbitrary_parameters_reload_at_f32_precision() {
    let spec = make_toy_model(Arch::Mlp, 24, 5, false).unwrap().spec;
    let mut rng = oneshot_core::faultlab::RngStream::new(12);
    let layers = spec
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => LayerParams::Dense {
                weight: rng.gaussian_tensor(&[*out_features, *in_features]),
                bias: rng.gaussian_tensor(&[*out_features]),
            },
            LayerSpec::BatchNorm { channels, .. } => LayerParams::BatchNorm {
                mean: rng.gaussian_tensor(&[*channels]),
                var: rng
                    .gaussian_tensor(&[*channels])
                    .map(|v| 1.0 + v * v)
                    .unwrap(),
                scale: rng.gaussian_tensor(&[*channels]),
                shift: rng.gaussian_tensor(&[*channels]),
            },
            _ => LayerParams::None,
        })
        .collect();
    let params = ParameterStore::new(&spec, layers).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (s, w) = (dir.path().join("m.json"), dir.path().join("m.bin"));
    save_model(&spec, &params, &s, &w, false).unwrap();
    let (_, back) = load_model(&s, &w).unwrap();
    let expected = params.round_to_f32(&spec).unwrap();
    for (a, b) in expected.layers().iter().zip(back.layers()) {
        for (ta, tb) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(ta.data(), tb.data());
        }
    }
}
