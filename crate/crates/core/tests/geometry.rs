use nalgebra::{Matrix3, Matrix4, Vector3};
use ndarray::Array2;
use proptest::prelude::*;

use scd_core::bundle::PairBundle;
use scd_core::geometry::{correspondence_field, rotation_y, world_to_camera, Camera, CorrespondenceField};
use scd_core::occlusion::{occlusion_mask, OcclusionParams};
use scd_core::synthetic::{discontinuity_band, generate_scene, Axis, CameraSpec, FeatureSpec, Primitive, SceneSpec};

fn fields(bundle: &PairBundle) -> (CorrespondenceField, CorrespondenceField) {
    let (c1, c2) = (bundle.view_1.camera().unwrap(), bundle.view_2.camera().unwrap());
    (
        correspondence_field(&bundle.view_1.depth, &c1, &c2).unwrap(),
        correspondence_field(&bundle.view_2.depth, &c2, &c1).unwrap(),
    )
}

/// Bilinear lookup of a field's target at continuous `(u, v)`; `None` unless
/// all four neighbours are valid.
fn sample_target(field: &CorrespondenceField, p: [f32; 2]) -> Option<[f32; 2]> {
    let (rows, cols) = field.dims();
    let (u0, v0) = (p[0].floor() as usize, p[1].floor() as usize);
    let (u1, v1) = ((u0 + 1).min(cols - 1), (v0 + 1).min(rows - 1));
    let (fu, fv) = (p[0] - u0 as f32, p[1] - v0 as f32);
    let corner = |r, c| field.target_at(r, c);
    let (a, b, c, d) = (corner(v0, u0)?, corner(v0, u1)?, corner(v1, u0)?, corner(v1, u1)?);
    let lerp = |k: usize| {
        (a[k] * (1.0 - fu) + b[k] * fu) * (1.0 - fv) + (c[k] * (1.0 - fu) + d[k] * fu) * fv
    };
    Some([lerp(0), lerp(1)])
}

#[test]
fn forward_backward_composition_returns_home() {
    for seed in 0..10 {
        let scene = generate_scene(&SceneSpec::plane_and_box(seed)).unwrap();
        let (f12, f21) = fields(&scene.bundle);
        let band_1 = discontinuity_band(&scene.bundle.view_1.depth, 2, 0.05);
        let band_2 = discontinuity_band(&scene.bundle.view_2.depth, 2, 0.05);
        let hidden = &scene.truth.view_1.occlusion;
        let (mut close, mut total) = (0usize, 0usize);
        for ((r, c), &valid) in f12.valid.indexed_iter() {
            if !valid || band_1[(r, c)] || hidden[(r, c)] {
                continue;
            }
            let q = f12.target_at(r, c).unwrap();
            let Some(idx) = scd_core::geometry::nearest_index(q, f21.dims()) else { continue };
            if band_2[idx] {
                continue;
            }
            let Some(back) = sample_target(&f21, q) else { continue };
            total += 1;
            let err = ((back[0] - c as f32).powi(2) + (back[1] - r as f32).powi(2)).sqrt();
            close += usize::from(err <= 0.5);
        }
        assert!(total > 1000, "seed {seed}: only {total} pixels checked");
        assert!(close as f64 >= 0.99 * total as f64, "seed {seed}: {close}/{total}");
    }
}

fn scaled(bundle: &PairBundle, s: f32) -> PairBundle {
    let mut out = bundle.clone();
    for v in [&mut out.view_1, &mut out.view_2] {
        v.depth.mapv_inplace(|d| d * s);
        for i in 0..3 {
            v.extrinsics[(i, 3)] *= s as f64;
        }
    }
    out
}

#[test]
fn joint_depth_translation_scaling_is_invisible() {
    for seed in 0..5 {
        let scene = generate_scene(&SceneSpec::plane_and_box(seed)).unwrap();
        let (base, base_back) = fields(&scene.bundle);
        let occ = occlusion_mask(&base, &scene.bundle.view_2.depth, OcclusionParams::default()).unwrap();
        for s in [0.5f32, 2.0, 10.0] {
            let b = scaled(&scene.bundle, s);
            let (f, f_back) = fields(&b);
            assert_eq!(f.valid, base.valid, "seed {seed} s {s}");
            assert_eq!(f_back.valid, base_back.valid);
            let drift = ndarray::Zip::from(&f.target)
                .and(&base.target)
                .fold(0.0f32, |m, &a, &b| if a.is_nan() { m } else { m.max((a - b).abs()) });
            assert!(drift <= 1e-4, "seed {seed} s {s}: drift {drift}");
            let o = occlusion_mask(&f, &b.view_2.depth, OcclusionParams::default()).unwrap();
            assert_eq!(o.mask, occ.mask, "seed {seed} s {s}");
        }
    }
}

#[test]
fn lateral_translation_gives_a_band_with_closed_form_edge() {
    // u2 = u1 + fx·t/d, valid iff u2 ≤ W−1, i.e. u1 ≤ W−1 − fx·t/d.
    let (fx, t, d, w) = (100.0, 0.37, 2.5f32, 120usize);
    let k = Matrix3::new(fx, 0.0, 59.5, 0.0, fx, 40.0, 0.0, 0.0, 1.0);
    let cam1 = Camera::new(k, Matrix4::identity(), w, 80).unwrap();
    let cam2 = Camera::new(k, Matrix4::new_translation(&Vector3::new(t, 0.0, 0.0)), w, 80).unwrap();
    let field = correspondence_field(&Array2::from_elem((80, w), d), &cam1, &cam2).unwrap();
    let edge = (w as f64 - 1.0 - fx * t / d as f64).floor() as usize;
    for ((_, c), &v) in field.valid.indexed_iter() {
        assert_eq!(v, c <= edge, "column {c}, edge {edge}");
    }
}

fn single_plane(cam2: CameraSpec) -> SceneSpec {
    SceneSpec {
        name: None,
        resolution: [40, 56],
        seed: 1,
        layout: vec![Primitive::Rect {
            center: [0.0, 0.0, 5.0],
            normal: Axis::Z,
            half_extents: [500.0, 500.0],
            albedo: [90, 90, 90],
            checker: None,
        }],
        cam1: CameraSpec {
            focal: 60.0,
            position: [0.0; 3],
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            roll_deg: 0.0,
        },
        cam2,
        changes: vec![],
        features: FeatureSpec {
            heads: 1,
            key_dim: 4,
            embed_dim: 4,
            noise_deg: 1.0,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_plane_never_self_occludes(
        x in -1.5f64..1.5, y in -1.0f64..1.0, z in -1.0f64..1.5,
        yaw in -25.0f64..25.0, pitch in -10.0f64..10.0,
    ) {
        let spec = single_plane(CameraSpec { focal: 60.0, position: [x, y, z], yaw_deg: yaw, pitch_deg: pitch, roll_deg: 0.0 });
        let scene = generate_scene(&spec).unwrap();
        let (f12, _) = fields(&scene.bundle);
        if f12.overlap_count() > 0 {
            let occ = occlusion_mask(&f12, &scene.bundle.view_2.depth, OcclusionParams::default()).unwrap();
            prop_assert_eq!(occ.count(), 0);
        }
        prop_assert!(!scene.truth.view_1.occlusion.iter().any(|&o| o));
    }

    #[test]
    fn occlusion_stays_inside_overlap(seed in 0u64..500) {
        let scene = generate_scene(&SceneSpec::plane_and_box(seed)).unwrap();
        let (f12, f21) = fields(&scene.bundle);
        for (f, other) in [(&f12, &scene.bundle.view_2.depth), (&f21, &scene.bundle.view_1.depth)] {
            let occ = occlusion_mask(f, other, OcclusionParams::default()).unwrap();
            prop_assert!(ndarray::Zip::from(&occ.mask).and(&f.valid).all(|&o, &v| !o || v));
        }
    }

    #[test]
    fn valid_targets_lie_in_the_closed_domain(
        yaw in -40.0f64..40.0, tx in -1.0f64..1.0, depth in 0.2f32..30.0,
    ) {
        let k = Matrix3::new(70.0, 0.0, 31.5, 0.0, 70.0, 23.5, 0.0, 0.0, 1.0);
        let cam1 = Camera::new(k, Matrix4::identity(), 64, 48).unwrap();
        let pose = world_to_camera(&rotation_y(yaw.to_radians()), &Vector3::new(tx, 0.0, 0.0));
        let cam2 = Camera::new(k, pose, 64, 48).unwrap();
        let f = correspondence_field(&Array2::from_elem((48, 64), depth), &cam1, &cam2).unwrap();
        for ((r, c), &v) in f.valid.indexed_iter() {
            match f.target_at(r, c) {
                Some(t) => {
                    prop_assert!(v);
                    prop_assert!(t[0] >= 0.0 && t[0] <= 63.0 && t[1] >= 0.0 && t[1] <= 47.0);
                    prop_assert!(f.depth_in_target[(r, c)] > 0.0);
                }
                None => prop_assert!(f.target[(r, c, 0)].is_nan() && f.depth_in_target[(r, c)].is_nan()),
            }
        }
    }
}
