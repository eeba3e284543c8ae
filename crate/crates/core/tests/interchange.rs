use std::path::Path;

use proptest::prelude::*;
use serde_json::{json, Value};

use scd_core::bundle::{
    load_bundle, read_field, read_occlusion, write_bundle, write_field, write_occlusion, BundleError, REQUIRED_KEYS,
};
use scd_core::geometry::correspondence_field;
use scd_core::occlusion::{occlusion_mask, OcclusionParams};
use scd_core::synthetic::{generate_scene, Axis, CameraSpec, FeatureSpec, Primitive, SceneSpec};
use scd_core::tensor::{read_tensor, write_tensor, Tensor, TensorData};

fn small_scene() -> SceneSpec {
    let cam = |x: f64| CameraSpec { focal: 40.0, position: [x, 0.0, 0.0], yaw_deg: 0.0, pitch_deg: 0.0, roll_deg: 0.0 };
    SceneSpec {
        name: Some("tiny".into()),
        resolution: [16, 20],
        seed: 5,
        layout: vec![
            Primitive::Rect { center: [0.0, 0.0, 4.0], normal: Axis::Z, half_extents: [50.0, 50.0], albedo: [120, 130, 140], checker: Some(0.3) },
            Primitive::Cuboid { min: [-0.4, -0.4, 2.5], max: [0.4, 0.4, 3.0], albedo: [30, 60, 200], checker: None },
        ],
        cam1: cam(0.0),
        cam2: cam(0.3),
        changes: vec![],
        features: FeatureSpec { heads: 2, key_dim: 6, embed_dim: 5, noise_deg: 3.0 },
    }
}

fn written_bundle() -> (tempfile::TempDir, std::path::PathBuf) {
    let scene = generate_scene(&small_scene()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_bundle(&scene.bundle, dir.path()).unwrap();
    (dir, manifest)
}

fn rewrite(manifest: &Path, edit: impl FnOnce(&mut serde_json::Map<String, Value>)) {
    let mut root: Value = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    edit(root.as_object_mut().unwrap());
    std::fs::write(manifest, serde_json::to_string(&root).unwrap()).unwrap();
}

#[test]
fn every_mandatory_field_is_checked() {
    for key in REQUIRED_KEYS {
        let (_dir, manifest) = written_bundle();
        rewrite(&manifest, |m| {
            m.remove(key);
        });
        let err = load_bundle(&manifest).unwrap_err();
        assert!(matches!(err, BundleError::MissingField(k) if k == key), "{key}: {err}");
        assert_eq!(err.to_string(), format!("missing mandatory field {key}"));
    }
}

type Corruption = Box<dyn Fn(&Path)>;

#[test]
fn corrupted_manifests_are_rejected() {
    let cases: Vec<(&str, Corruption)> = vec![
        ("not json", Box::new(|m: &Path| std::fs::write(m, "{ image_1: ").unwrap())),
        ("array root", Box::new(|m: &Path| std::fs::write(m, "[1, 2]").unwrap())),
        ("dangling path", Box::new(|m: &Path| rewrite(m, |o| { o.insert("depth_1".into(), json!("nowhere.npy")); }))),
        ("numeric path", Box::new(|m: &Path| rewrite(m, |o| { o.insert("image_2".into(), json!(3)); }))),
        ("swapped roles", Box::new(|m: &Path| rewrite(m, |o| {
            let d = o["depth_1"].clone();
            o.insert("intrinsics_1".into(), d);
        }))),
        ("seg masks not a list", Box::new(|m: &Path| rewrite(m, |o| { o.insert("seg_masks_1".into(), json!("seg.npy")); }))),
        ("meta not an object", Box::new(|m: &Path| rewrite(m, |o| { o.insert("meta".into(), json!([1])); }))),
        ("corrupt tensor", Box::new(|m: &Path| {
            let path = m.parent().unwrap().join("depth_2.npy");
            let mut bytes = std::fs::read(&path).unwrap();
            bytes.truncate(bytes.len() - 3);
            std::fs::write(path, bytes).unwrap();
        })),
        ("wrong depth dtype", Box::new(|m: &Path| {
            let path = m.parent().unwrap().join("depth_1.npy");
            let t = read_tensor(&path).unwrap();
            let n = t.shape().iter().product();
            write_tensor(&Tensor::new(t.shape().to_vec(), TensorData::F64(vec![1.0; n])).unwrap(), &path).unwrap();
        })),
        ("mismatched depth size", Box::new(|m: &Path| {
            let path = m.parent().unwrap().join("depth_2.npy");
            write_tensor(&Tensor::new(vec![4, 4], TensorData::F32(vec![1.0; 16])).unwrap(), &path).unwrap();
        })),
    ];
    for (name, corrupt) in cases {
        let (_dir, manifest) = written_bundle();
        corrupt(&manifest);
        assert!(load_bundle(&manifest).is_err(), "{name} was accepted");
    }
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_bundle(dir.path().join("manifest.json")), Err(BundleError::Io { .. })));
}

#[test]
fn optional_fields_may_be_absent() {
    let (_dir, manifest) = written_bundle();
    rewrite(&manifest, |m| {
        for k in ["features_1", "features_2", "embed_1", "embed_2", "seg_masks_1", "seg_masks_2", "gt_mask", "meta"] {
            m.remove(k);
        }
    });
    let b = load_bundle(&manifest).unwrap();
    assert!(b.view_1.features.is_none() && b.view_2.seg_masks.is_none() && b.gt_mask.is_none());
}

#[test]
fn fields_and_occlusion_round_trip() {
    let scene = generate_scene(&small_scene()).unwrap();
    let b = &scene.bundle;
    let (c1, c2) = (b.view_1.camera().unwrap(), b.view_2.camera().unwrap());
    let field = correspondence_field(&b.view_1.depth, &c1, &c2).unwrap();
    let occ = occlusion_mask(&field, &b.view_2.depth, OcclusionParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_field(&field, dir.path(), "field_1").unwrap();
    write_occlusion(&occ, dir.path(), "occlusion_1").unwrap();
    let back = read_field(dir.path(), "field_1", field.target_dims).unwrap();
    assert_eq!(back.valid, field.valid);
    assert!(back.target.iter().zip(field.target.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(read_occlusion(dir.path(), "occlusion_1").unwrap(), occ);
    let sidecar: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("occlusion_1.json")).unwrap()).unwrap();
    assert_eq!(sidecar["tau"].as_f64().unwrap() as f32, occ.tau);
    assert!(sidecar.get("median").is_some() && sidecar.get("mad").is_some());
}

#[test]
fn field_with_escaping_target_is_rejected() {
    let scene = generate_scene(&small_scene()).unwrap();
    let b = &scene.bundle;
    let mut field = correspondence_field(&b.view_1.depth, &b.view_1.camera().unwrap(), &b.view_2.camera().unwrap()).unwrap();
    let (r, c) = field.valid.indexed_iter().find(|(_, &v)| v).unwrap().0;
    field.target[(r, c, 0)] = 1000.0;
    let dir = tempfile::tempdir().unwrap();
    write_field(&field, dir.path(), "f").unwrap();
    assert!(matches!(read_field(dir.path(), "f", field.target_dims), Err(BundleError::Invariant(_))));
}

fn arb_tensor() -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(0usize..5, 0..=4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        let data = prop_oneof![
            proptest::collection::vec(any::<u32>().prop_map(f32::from_bits), n).prop_map(TensorData::F32),
            proptest::collection::vec(any::<u64>().prop_map(f64::from_bits), n).prop_map(TensorData::F64),
            proptest::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
            proptest::collection::vec(any::<bool>(), n).prop_map(TensorData::Bool),
        ];
        (Just(shape), data).prop_map(|(s, d)| Tensor::new(s, d).unwrap())
    })
}

proptest! {
    #[test]
    fn tensors_round_trip_bit_exactly(t in arb_tensor()) {
        let bytes = t.to_bytes();
        prop_assert_eq!(bytes.len() % 64, (t.data().len() * t.dtype().size()) % 64);
        let back = Tensor::from_bytes(&bytes).unwrap();
        prop_assert!(back.bit_eq(&t));
    }

    #[test]
    fn random_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = Tensor::from_bytes(&bytes);
    }

    #[test]
    fn damaged_headers_are_rejected_or_consistent(t in arb_tensor(), pos in 0usize..64, byte in any::<u8>()) {
        let mut bytes = t.to_bytes();
        prop_assume!(bytes[pos] != byte);
        bytes[pos] = byte;
        // A flipped byte may still leave a valid file (e.g. padding); if it
        // parses it must describe a payload of consistent size.
        if let Ok(back) = Tensor::from_bytes(&bytes) {
            prop_assert_eq!(back.data().len(), back.shape().iter().product::<usize>());
        }
    }
}
