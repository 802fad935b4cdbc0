use canon9d_core::align::{
    align, cycle_weights, dist_app, dist_geo, feature_nn, ransac_init, refine, AlignConfig,
    AlignmentProblem, Correspondence, PARAMS,
};
use canon9d_core::geometry::{geodesic_distance, rotation_about, SimilarityTransform};
use canon9d_core::surface::{bounding_radius, FeaturedSurface};
use canon9d_core::synthetic::{
    make_instance, perturbation, random_rotation, random_similarity, InstanceParams,
    SyntheticShape,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corr(s: usize, t: usize, w: f64) -> Correspondence {
    Correspondence {
        source_index: s,
        target_index: t,
        weight: w,
    }
}

fn deg(x: f64) -> f64 {
    x.to_radians()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()) * 2.0)
        .collect()
}

#[test]
fn ransac_recovers_exact_transform_from_perfect_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let src = random_cloud(&mut rng, 200);
    let planted = random_similarity(&mut rng, (0.5, 2.0), 3.0);
    let dst = planted.apply(&src);
    let c: Vec<_> = (0..src.len()).map(|i| corr(i, i, 1.0)).collect();
    let cfg = AlignConfig::default();
    let out = ransac_init(&src, &dst, &c, &cfg, bounding_radius(&dst), 3).unwrap();
    assert!(geodesic_distance(out.transform.rotation(), planted.rotation()) < 1e-6);
    assert!((out.transform.scale() / planted.scale() - 1.0).abs() < 1e-9);
    assert_eq!(out.inliers, src.len());
}

#[test]
fn ransac_tolerates_thirty_percent_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let src = random_cloud(&mut rng, 300);
    let planted = random_similarity(&mut rng, (0.5, 2.0), 3.0);
    let dst = planted.apply(&src);
    let c: Vec<_> = (0..src.len())
        .map(|i| {
            if rng.random::<f64>() < 0.3 {
                corr(i, rng.random_range(0..src.len()), 1.0)
            } else {
                corr(i, i, 1.0)
            }
        })
        .collect();
    let cfg = AlignConfig::default();
    for seed in 0..20 {
        let out = ransac_init(&src, &dst, &c, &cfg, bounding_radius(&dst), seed).unwrap();
        let err = geodesic_distance(out.transform.rotation(), planted.rotation());
        assert!(err < deg(2.0), "seed {seed}: {} deg", err.to_degrees());
    }
}

fn unit_features(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f32>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / n) as f32).collect()
        })
        .collect()
}

fn random_surface(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> FeaturedSurface {
    let verts = random_cloud(rng, n);
    let sets: Vec<_> = (0..n)
        .map(|_| {
            let k = rng.random_range(0..4);
            unit_features(rng, dim, k)
        })
        .collect();
    FeaturedSurface::from_sets(verts, dim, &sets).unwrap()
}

#[test]
fn feature_nn_with_orthogonal_features_still_maps() {
    let s = FeaturedSurface::from_sets(
        vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
        3,
        &[
            vec![vec![1.0, 0.0, 0.0]],
            vec![vec![1.0, 0.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0]],
        ],
    )
    .unwrap();
    let t = FeaturedSurface::from_sets(
        vec![Vector3::zeros(), Vector3::x()],
        3,
        &[vec![vec![1.0, 0.0, 0.0]], vec![vec![0.0, 1.0, 0.0]]],
    )
    .unwrap();
    let m = feature_nn(&s, &t).unwrap();
    // vertex 2 is orthogonal to both targets: equal cost, lowest index wins
    assert_eq!(m.correspondences[2].target_index, 0);
    assert_eq!(m.correspondences.len(), 3);
}

#[test]
fn cycle_and_appearance_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let a = random_surface(&mut rng, 30, 4);
        let b = random_surface(&mut rng, 25, 4);
        let (Ok(f), Ok(g)) = (feature_nn(&a, &b), feature_nn(&b, &a)) else {
            continue;
        };
        let fwd = f.correspondences;
        let bwd = g.correspondences;
        let tau = 0.1;
        let w = cycle_weights(&fwd, &bwd, a.vertices(), tau);
        let verts = a.vertices();
        let c = verts.iter().sum::<Vector3<f64>>() / verts.len() as f64;
        let rho = verts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
        for (k, cf) in fwd.iter().enumerate() {
            let back = bwd.iter().find(|cb| cb.source_index == cf.target_index).unwrap();
            let d = (verts[cf.source_index] - verts[back.target_index]).norm();
            let expected = (-d / (tau * rho)).exp();
            assert!((w[k] - expected).abs() < 1e-12);
            assert!(w[k] > 0.0 && w[k] <= 1.0);
        }
        let fwd_w: Vec<_> = fwd.iter().zip(&w).map(|(c, w)| corr(c.source_index, c.target_index, *w)).collect();
        let bwd_w: Vec<_> = bwd.iter().map(|c| corr(c.source_index, c.target_index, 0.5)).collect();
        let got = dist_app(a.vertices(), b.vertices(), &fwd_w, &bwd_w).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for c in &fwd_w {
            num += c.weight * (a.vertices()[c.source_index] - b.vertices()[c.target_index]).norm();
            den += c.weight;
        }
        let mut num2 = 0.0;
        for c in &bwd_w {
            num2 += 0.5 * (b.vertices()[c.source_index] - a.vertices()[c.target_index]).norm();
        }
        let expected = num / den + num2 / (0.5 * bwd_w.len() as f64);
        assert!((got - expected).abs() < 1e-9 * expected.max(1.0));
    }
}

#[test]
fn dist_geo_is_symmetric_and_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_cloud(&mut rng, 40);
    let b = random_cloud(&mut rng, 17);
    assert!((dist_geo(&a, &b) - dist_geo(&b, &a)).abs() < 1e-12);
    assert!(dist_geo(&a, &b) > 0.0);
}

struct Pair {
    instance: FeaturedSurface,
    reference: FeaturedSurface,
    /// instance frame to reference frame
    truth: SimilarityTransform,
}

/// Reference in the shape frame; instance is the shape moved by a random
/// similarity. Returns the ground-truth instance→reference transform.
fn synthetic_pair(seed: u64, n: usize, params: InstanceParams) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = SyntheticShape::random(&mut rng, 16);
    let extent = shape.extent(&mut rng);
    let reference = make_instance(&shape, &mut rng, n, extent, &InstanceParams::default());
    let planted = random_similarity(&mut rng, (0.5, 2.0), 2.0);
    let instance = make_instance(
        &shape,
        &mut rng,
        n,
        extent,
        &InstanceParams {
            transform: planted,
            ..params
        },
    );
    Pair {
        instance,
        reference,
        truth: planted.inverse(),
    }
}

#[test]
fn refine_keeps_optimum_and_recovers_from_small_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let shape = SyntheticShape::random(&mut rng, 16);
    let reference = shape.surface(&mut rng, 600, 0.0);
    let planted = random_similarity(&mut rng, (0.5, 2.0), 1.0);
    let instance = reference.with_vertices(planted.apply(reference.vertices()));
    let truth = planted.inverse();
    let cfg = AlignConfig::default();
    let problem = AlignmentProblem::new(&instance, &reference, &cfg).unwrap();

    let at_truth = refine(&truth, &problem, &cfg).unwrap();
    assert!(at_truth.objective < 1e-9);
    assert!(geodesic_distance(at_truth.transform.rotation(), truth.rotation()) < 1e-6);

    for k in 0..5 {
        let rot = perturbation(&mut rng, deg(5.0));
        let scale = if k % 2 == 0 { 1.05 } else { 0.95 };
        let start = SimilarityTransform::new(rot, Vector3::zeros(), scale)
            .unwrap()
            .compose(&truth);
        let out = refine(&start, &problem, &cfg).unwrap();
        assert!(out.objective <= out.initial_objective);
        let rot_err = geodesic_distance(out.transform.rotation(), truth.rotation());
        let scale_err = (out.transform.scale() / truth.scale() - 1.0).abs();
        assert!(rot_err < deg(0.5), "rotation error {} deg", rot_err.to_degrees());
        assert!(scale_err < 0.005, "scale error {scale_err}");
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let pair = synthetic_pair(5, 120, InstanceParams { noise: 0.01, ..Default::default() });
    let cfg = AlignConfig::default();
    let problem = AlignmentProblem::new(&pair.instance, &pair.reference, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-7;
    for _ in 0..10 {
        let base = SimilarityTransform::new(
            random_rotation(&mut rng),
            Vector3::new(rng.random(), rng.random(), rng.random()),
            rng.random_range(0.5..2.0),
        )
        .unwrap()
        .compose(&pair.truth);
        let (_, g) = problem.objective_and_gradient(&base).unwrap();
        for k in 0..PARAMS {
            let mut xp = [0.0; PARAMS];
            let mut xm = [0.0; PARAMS];
            xp[k] = h;
            xm[k] = -h;
            let fd = (problem.local_objective(&base, &xp).unwrap()
                - problem.local_objective(&base, &xm).unwrap())
                / (2.0 * h);
            let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "component {k}: analytic {} fd {}", g[k], fd);
        }
    }
}

#[test]
fn align_identity_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let shape = SyntheticShape::random(&mut rng, 16);
    let s = shape.surface(&mut rng, 500, 0.0);
    let out = align(&s, &s, &AlignConfig::default(), 1).unwrap();
    assert!(geodesic_distance(out.transform.rotation(), &nalgebra::Matrix3::identity()) < 1e-6);
    assert!(out.transform.translation().norm() < 1e-6);
    assert!(out.score < 1e-9);
}

#[test]
fn align_noisy_and_partial_instances() {
    for seed in 0..4 {
        let pair = synthetic_pair(
            100 + seed,
            1500,
            InstanceParams {
                noise: 0.01,
                feature_noise: 0.01,
                ..Default::default()
            },
        );
        let out = align(&pair.instance, &pair.reference, &AlignConfig::default(), seed).unwrap();
        let err = geodesic_distance(out.transform.rotation(), pair.truth.rotation());
        assert!(err < deg(5.0), "noisy seed {seed}: {} deg", err.to_degrees());

        let pair = synthetic_pair(
            200 + seed,
            1500,
            InstanceParams {
                noise: 0.01,
                partial_cut: 0.3,
                ..Default::default()
            },
        );
        let out = align(&pair.instance, &pair.reference, &AlignConfig::default(), seed).unwrap();
        let err = geodesic_distance(out.transform.rotation(), pair.truth.rotation());
        assert!(err < deg(10.0), "partial seed {seed}: {} deg", err.to_degrees());
    }
}

#[test]
fn alignment_error_is_invariant_under_common_rigid_motion() {
    let pair = synthetic_pair(300, 800, InstanceParams { noise: 0.01, ..Default::default() });
    let cfg = AlignConfig::default();
    let base = align(&pair.instance, &pair.reference, &cfg, 4).unwrap();
    let base_err = geodesic_distance(base.transform.rotation(), pair.truth.rotation());

    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let q = SimilarityTransform::rigid(random_rotation(&mut rng), Vector3::new(0.4, -1.0, 2.0)).unwrap();
    let moved_instance = pair.instance.with_vertices(q.apply(pair.instance.vertices()));
    let moved_reference = pair.reference.with_vertices(q.apply(pair.reference.vertices()));
    let moved = align(&moved_instance, &moved_reference, &cfg, 4).unwrap();
    // truth in the moved frames is Q ∘ T ∘ Q⁻¹
    let moved_truth = q.compose(&pair.truth).compose(&q.inverse());
    let moved_err = geodesic_distance(moved.transform.rotation(), moved_truth.rotation());
    assert!((base_err - moved_err).abs() < 1e-3, "{base_err} vs {moved_err}");
}

/// Points on the surface of a unit cube. Each face has its own feature
/// direction plus a weak in-face position code.
fn featured_cube(rng: &mut ChaCha8Rng, per_face: usize) -> FeaturedSurface {
    let dim = 9;
    let mut verts = Vec::new();
    let mut sets = Vec::new();
    for face in 0..6 {
        let axis = face / 2;
        let sign = if face % 2 == 0 { -0.5 } else { 0.5 };
        for _ in 0..per_face {
            let mut p = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            p[axis] = sign;
            let mut f = vec![0.0f64; dim];
            f[face] = 1.0;
            for k in 0..3 {
                f[6 + k] = 0.5 * p[k];
            }
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let f: Vec<f32> = f.iter().map(|v| (v / n) as f32).collect();
            verts.push(p);
            sets.push(vec![f]);
        }
    }
    FeaturedSurface::from_sets(verts, dim, &sets).unwrap()
}

#[test]
fn appearance_term_breaks_cube_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let reference = featured_cube(&mut rng, 120);
    // planted motion is a cube symmetry plus a small twist: geometry alone is ambiguous
    let planted = SimilarityTransform::rigid(
        rotation_about(&Vector3::z(), std::f64::consts::FRAC_PI_2)
            * rotation_about(&Vector3::new(1.0, 1.0, 0.0), deg(4.0)),
        Vector3::new(0.2, 0.1, -0.3),
    )
    .unwrap();
    let instance = featured_cube(&mut rng, 120);
    let instance = instance.with_vertices(planted.apply(instance.vertices()));
    let truth = planted.inverse();
    let cfg = AlignConfig::default();
    let out = align(&instance, &reference, &cfg, 2).unwrap();
    let err = geodesic_distance(out.transform.rotation(), truth.rotation());
    assert!(err < deg(5.0), "alpha 0.2: {} deg", err.to_degrees());
}
