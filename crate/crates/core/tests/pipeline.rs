use nalgebra::Vector3;
use proptest::prelude::*;

use quadfit::camera::Camera;
use quadfit::losses::make_toy_prior;
use quadfit::metrics::pa_mpjpe;
use quadfit::model::{make_toy_template, pose_mesh, ModelTemplate, ToyConfig};
use quadfit::synth::io::{read_mask_png, write_mask_png};
use quadfit::synth::{
    emit_annotation, keypoint_visibility, make_gait_library, rasterize, sample_scene, scene_rng,
    AnnotationPaths, AnnotationRecord, SceneConfig,
};

fn toy() -> ModelTemplate {
    make_toy_template(&ToyConfig::default()).unwrap()
}

fn render(t: &ModelTemplate, seed: u64, i: u64) -> (AnnotationRecord, quadfit::synth::Mask) {
    let prior = make_toy_prior(t.n_beta(), t.n_joints(), 0.3).unwrap();
    let lib = make_gait_library(t.n_joints(), 64, 0).unwrap();
    let scene = sample_scene(
        &mut scene_rng(seed, i),
        &prior,
        &lib,
        &SceneConfig::default(),
    )
    .unwrap();
    let posed = pose_mesh(t, &scene.params).unwrap();
    let images = rasterize(&posed.vertices, t.faces(), &scene.camera).unwrap();
    let vis = keypoint_visibility(&posed.keypoints3d, &scene.camera, &images, None).unwrap();
    let paths = AnnotationPaths {
        image: "a.png".into(),
        mask: Some("a_mask.png".into()),
        depth: None,
    };
    let rec = emit_annotation(&scene, &posed, &images, &vis, &paths, "CtrlAni3D").unwrap();
    (rec, images.mask())
}

#[test]
fn record_and_mask_survive_disk() {
    let t = toy();
    let (rec, mask) = render(&t, 11, 0);
    let dir = tempfile::tempdir().unwrap();
    rec.save(dir.path().join("a.json")).unwrap();
    write_mask_png(dir.path().join("a_mask.png"), &mask).unwrap();
    let back = AnnotationRecord::load(dir.path().join("a.json")).unwrap();
    assert_eq!(
        serde_json::to_string(&rec).unwrap(),
        serde_json::to_string(&back).unwrap()
    );
    assert_eq!(read_mask_png(dir.path().join("a_mask.png")).unwrap(), mask);
}

#[test]
fn stored_parameters_reproduce_stored_keypoints() {
    let t = toy();
    let (rec, _) = render(&t, 12, 3);
    let posed = pose_mesh(&t, &rec.params().unwrap().unwrap()).unwrap();
    let stored = rec.keypoints3d().unwrap();
    for (a, b) in posed.keypoints3d.iter().zip(&stored) {
        assert!((a - b).norm() < 1e-12);
    }
    assert!(pa_mpjpe(&posed.keypoints3d, &stored).unwrap() < 1e-12);
}

#[test]
fn scenes_depend_only_on_seed_and_index() {
    let t = toy();
    let a = serde_json::to_string(&render(&t, 13, 7).0).unwrap();
    let b = serde_json::to_string(&render(&t, 13, 7).0).unwrap();
    let c = serde_json::to_string(&render(&t, 13, 8).0).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn camera_translation_shifts_projection(dx in -0.5f64..0.5, dy in -0.5f64..0.5, z in 4.0f64..8.0) {
        // Moving the camera translation by (dx, dy) at depth z moves a point at
        // the optical axis by f*(dx, dy)/z pixels.
        let p = [Vector3::new(0.0, 0.0, 0.0)];
        let base = Camera::with_translation(Vector3::new(0.0, 0.0, z)).project(&p)[0].pixel;
        let moved = Camera::with_translation(Vector3::new(dx, dy, z)).project(&p)[0].pixel;
        let d = moved - base;
        prop_assert!((d.x - 1000.0 * dx / z).abs() < 1e-9);
        prop_assert!((d.y - 1000.0 * dy / z).abs() < 1e-9);
    }
}
