use canon9d_core::canonical::{fit_box, make_canonical_pose, propagate, CameraFrame};
use canon9d_core::geometry::{Pose9D, SimilarityTransform};
use canon9d_core::synthetic::{random_rotation, random_similarity, SyntheticShape};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent quantile: numpy-style linear interpolation.
fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * q;
    let i = h.floor() as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] + (h - i as f64) * (v[i + 1] - v[i])
}

fn unit_cube_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    let mut pts: Vec<_> = (0..8)
        .map(|i| Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
        .collect();
    pts.extend((0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())));
    pts
}

#[test]
fn robust_box_ignores_far_outlier() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pts = unit_cube_cloud(&mut rng, 400);
    pts.push(Vector3::new(100.0, 0.0, 0.0));
    let b = fit_box(&pts, 0.01).unwrap();
    for axis in 0..3 {
        let vals: Vec<f64> = pts.iter().map(|p| p[axis]).collect();
        let lo = quantile(vals.clone(), 0.01);
        let hi = quantile(vals, 0.99);
        assert!((b.extents()[axis] - (hi - lo)).abs() < 1e-12);
        assert!((b.translation()[axis] - 0.5 * (hi + lo)).abs() < 1e-12);
        assert!((b.extents()[axis] - 1.0).abs() < 0.05);
    }
    let exact = fit_box(&pts, 0.0).unwrap();
    assert!(pts.iter().all(|p| exact.contains(p)));
}

#[test]
fn quantile_box_excludes_at_most_twice_q_per_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts: Vec<_> = (0..1000)
        .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>() * 3.0, rng.random::<f64>().powi(3)))
        .collect();
    let q = 0.02;
    let b = fit_box(&pts, q).unwrap();
    let h = b.extents() * 0.5;
    for axis in 0..3 {
        let outside = pts
            .iter()
            .filter(|p| (p[axis] - b.translation()[axis]).abs() > h[axis] + 1e-12)
            .count();
        assert!(outside as f64 <= 2.0 * q * pts.len() as f64 + 2.0);
    }
}

struct Scene {
    reference: canon9d_core::surface::FeaturedSurface,
    annotation: Pose9D,
}

fn scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = SyntheticShape::random(&mut rng, 8);
    let reference = shape.surface(&mut rng, 800, 0.0);
    let annotation = Pose9D::new(
        random_rotation(&mut rng),
        Vector3::new(0.1, -0.2, 0.3),
        Vector3::new(1.0, 1.0, 1.0),
    )
    .unwrap();
    Scene {
        reference,
        annotation,
    }
}

fn assert_boxes_close(a: &Pose9D, b: &Pose9D, tol: f64) {
    assert!((a.extents() - b.extents()).amax() < tol, "{:?} vs {:?}", a.extents(), b.extents());
    assert!((a.translation() - b.translation()).amax() < tol);
    assert!((a.rotation() - b.rotation()).amax() < tol);
}

#[test]
fn reference_maps_to_its_own_box() {
    let s = scene(3);
    let c = make_canonical_pose(&s.reference, &SimilarityTransform::identity(), &s.annotation, 0.01).unwrap();
    let own = fit_box(&s.annotation.placement().inverse().apply(s.reference.vertices()), 0.01).unwrap();
    assert!((c.canonical_box.extents() - own.extents()).amax() < 1e-9);
    assert_eq!(*c.canonical_box.rotation(), Matrix3::identity());
    assert!(c.canonical_box.translation().norm() < 1e-12);
    // the canonical frame is the reference frame moved onto the box center
    let mapped = c.world_to_canonical.apply_point(s.annotation.translation());
    assert!((mapped + own.translation()).norm() < 1e-9);
}

#[test]
fn scale_and_rotation_cancel() {
    let s = scene(4);
    let base = make_canonical_pose(&s.reference, &SimilarityTransform::identity(), &s.annotation, 0.01).unwrap();

    let doubled = SimilarityTransform::from_scale(2.0).unwrap();
    let big = s.reference.with_vertices(doubled.apply(s.reference.vertices()));
    let c = make_canonical_pose(&big, &doubled.inverse(), &s.annotation, 0.01).unwrap();
    assert_boxes_close(&c.canonical_box, &base.canonical_box, 1e-9);
    assert!((c.world_pose().extents() - base.world_pose().extents() * 2.0).amax() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = SimilarityTransform::rigid(random_rotation(&mut rng), Vector3::new(1.0, 2.0, -3.0)).unwrap();
    let turned = s.reference.with_vertices(r.apply(s.reference.vertices()));
    let c = make_canonical_pose(&turned, &r.inverse(), &s.annotation, 0.01).unwrap();
    assert!((c.canonical_box.extents() - base.canonical_box.extents()).amax() < 1e-9);
}

#[test]
fn canonical_pose_is_frame_independent() {
    let s = scene(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = random_similarity(&mut rng, (0.5, 2.0), 1.0);
    let instance = s.reference.with_vertices(t.inverse().apply(s.reference.vertices()));
    let c = make_canonical_pose(&instance, &t, &s.annotation, 0.01).unwrap();

    let q = SimilarityTransform::rigid(random_rotation(&mut rng), Vector3::new(-1.0, 0.5, 2.0)).unwrap();
    let moved = instance.with_vertices(q.apply(instance.vertices()));
    let c2 = make_canonical_pose(&moved, &t.compose(&q.inverse()), &s.annotation, 0.01).unwrap();
    assert_boxes_close(&c2.canonical_box, &c.canonical_box, 1e-9);
    assert_boxes_close(&c2.world_pose(), &c.world_pose().transformed(&q), 1e-9);
}

#[test]
fn propagation_round_trips_through_inverse_cameras() {
    let s = scene(8);
    let c = make_canonical_pose(&s.reference, &SimilarityTransform::identity(), &s.annotation, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let frames: Vec<_> = (0..25)
        .map(|i| {
            let cam = SimilarityTransform::rigid(
                random_rotation(&mut rng),
                Vector3::new(rng.random(), rng.random(), rng.random()) * 5.0,
            )
            .unwrap();
            CameraFrame::new(i, cam).unwrap()
        })
        .collect();
    let world = c.world_pose();
    let poses = propagate(&c, &frames);
    assert_eq!(poses.len(), frames.len());
    for (pose, frame) in poses.iter().zip(&frames) {
        assert_eq!(pose.extents(), world.extents());
        let back = pose.transformed(&frame.world_to_camera().inverse());
        assert_boxes_close(&back, &world, 1e-9);
    }
}
