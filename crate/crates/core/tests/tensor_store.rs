use std::fs;

use opq::{load_model, save_model, Layer, LayerSpec, ModelTensors, OpqError};
use proptest::prelude::*;
use tempfile::TempDir;

fn manifest(dir: &std::path::Path, body: &str) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("manifest.json"), body).unwrap();
}

fn blob(dir: &std::path::Path, name: &str, values: &[f32]) {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(format!("{name}.bin")), bytes).unwrap();
}

#[test]
fn loads_from_directory_or_manifest_path() {
    let tmp = TempDir::new().unwrap();
    manifest(tmp.path(), r#"[{"name": "fc", "shape": [3, 4], "dtype": "f32"}]"#);
    blob(tmp.path(), "fc", &[0.5; 12]);
    let a = load_model(tmp.path()).unwrap();
    let b = load_model(tmp.path().join("manifest.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.layers()[0].spec.channel_axis, 0);
    assert_eq!(a.layers()[0].spec.channels(), 3);
}

#[test]
fn short_blob_is_a_length_mismatch() {
    let tmp = TempDir::new().unwrap();
    manifest(tmp.path(), r#"[{"name": "fc", "shape": [3, 4], "dtype": "f32"}]"#);
    blob(tmp.path(), "fc", &[0.5; 11]);
    match load_model(tmp.path()) {
        Err(OpqError::LengthMismatch {
            layer,
            expected,
            actual,
        }) => {
            assert_eq!((layer.as_str(), expected, actual), ("fc", 12, 11));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn nan_blob_is_rejected_with_position() {
    let tmp = TempDir::new().unwrap();
    manifest(tmp.path(), r#"[{"name": "fc", "shape": [4], "dtype": "f32"}]"#);
    blob(tmp.path(), "fc", &[0.0, 1.0, f32::NAN, 2.0]);
    let err = load_model(tmp.path()).unwrap_err();
    assert_eq!(err.to_string(), "non-finite value at layer fc index 2");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn manifest_errors() {
    let tmp = TempDir::new().unwrap();
    assert!(matches!(load_model(tmp.path()), Err(OpqError::Io { .. })));

    manifest(tmp.path(), "not json");
    assert!(matches!(load_model(tmp.path()), Err(OpqError::Manifest { .. })));

    manifest(tmp.path(), r#"[{"name": "fc", "shape": [4], "dtype": "f16"}]"#);
    assert!(load_model(tmp.path()).unwrap_err().to_string().contains("dtype"));

    manifest(
        tmp.path(),
        r#"[{"name": "fc", "shape": [4], "dtype": "f32"}, {"name": "fc", "shape": [4], "dtype": "f32"}]"#,
    );
    blob(tmp.path(), "fc", &[1.0; 4]);
    assert!(matches!(load_model(tmp.path()), Err(OpqError::DuplicateLayer(_))));

    manifest(tmp.path(), r#"[{"name": "gone", "shape": [4], "dtype": "f32"}]"#);
    assert!(matches!(load_model(tmp.path()), Err(OpqError::Io { .. })));

    manifest(
        tmp.path(),
        r#"[{"name": "fc", "shape": [2, 2], "channel_axis": 2, "dtype": "f32"}]"#,
    );
    assert!(matches!(load_model(tmp.path()), Err(OpqError::InvalidLayer { .. })));
}

#[test]
fn save_into_a_file_path_fails() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("occupied");
    fs::write(&file, b"x").unwrap();
    let model = ModelTensors::new(vec![Layer {
        spec: LayerSpec::new("w", vec![2], 0).unwrap(),
        values: vec![1.0, 2.0],
    }])
    .unwrap();
    assert!(matches!(save_model(&model, file.join("sub")), Err(OpqError::Io { .. })));
}

fn random_model() -> impl Strategy<Value = ModelTensors> {
    let layer =
        (prop::collection::vec(1usize..5, 1..4), any::<prop::sample::Index>()).prop_flat_map(|(shape, axis)| {
            let n: usize = shape.iter().product();
            let axis = axis.index(shape.len());
            (
                Just(shape),
                Just(axis),
                prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n),
            )
        });
    prop::collection::vec(layer, 1..5).prop_map(|layers| {
        ModelTensors::new(
            layers
                .into_iter()
                .enumerate()
                .map(|(i, (shape, axis, values))| Layer {
                    spec: LayerSpec::new(format!("block{i}.weight"), shape, axis).unwrap(),
                    values,
                })
                .collect(),
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_load_bit_exact(model in random_model()) {
        let tmp = TempDir::new().unwrap();
        save_model(&model, tmp.path()).unwrap();
        let back = load_model(tmp.path()).unwrap();
        prop_assert_eq!(back.hash(), model.hash());
        for (a, b) in model.layers().iter().zip(back.layers()) {
            prop_assert_eq!(&a.spec, &b.spec);
            prop_assert_eq!(
                a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn channel_views_partition_layers(model in random_model()) {
        let mut total = 0;
        for (i, layer) in model.layers().iter().enumerate() {
            let mut seen: Vec<u32> = Vec::new();
            let mut count = 0;
            for j in 0..layer.spec.channels() {
                let view = model.channel_view(i, j).unwrap();
                count += view.len();
                seen.extend(view.iter().map(|v| v.to_bits()));
            }
            prop_assert_eq!(count, layer.spec.count());
            let mut expect: Vec<u32> = layer.values.iter().map(|v| v.to_bits()).collect();
            seen.sort_unstable();
            expect.sort_unstable();
            prop_assert_eq!(seen, expect);
            total += count;
        }
        prop_assert_eq!(total, model.total_count());
    }
}
