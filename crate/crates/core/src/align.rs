//! Feature-guided Sim(3) alignment of an instance surface to a reference.
//!
//! The objective blends a symmetric Chamfer term (spatial nearest
//! neighbors) with an appearance term whose pairs come from feature-space
//! nearest neighbors. Both terms are divided by the reference bounding
//! radius so the blend weight means the same thing for every object.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{so3_exp, SimilarityTransform};
use crate::spatial::KdTree;
use crate::surface::{bounding_radius, centroid, FeaturedSurface};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignError {
    #[error("{0:?} surface has no featured vertices")]
    NoFeatures(Side),
    #[error("feature dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("{0:?} surface has fewer than 4 vertices")]
    TooFewVertices(Side),
    #[error("correspondence weights sum to less than 1e-12")]
    DegenerateWeights,
    #[error("fewer than 3 correspondences with positive weight")]
    TooFewCorrespondences,
    #[error("point sample is collinear or coincident")]
    DegenerateSample,
    #[error("objective is not finite")]
    NonFiniteObjective,
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    /// Appearance weight in `[0, 1]`.
    pub alpha: f64,
    pub ransac_iters: usize,
    /// Inlier residual bound as a fraction of the reference bounding radius.
    pub inlier_threshold: f64,
    pub refine_max_iters: usize,
    pub refine_tol: f64,
    /// Cycle-consistency bandwidth as a fraction of the bounding radius.
    pub cycle_tau: f64,
    /// Vertex budget per surface before feature matching.
    pub max_vertices: usize,
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            ransac_iters: 2048,
            inlier_threshold: 0.05,
            refine_max_iters: 500,
            refine_tol: 1e-6,
            cycle_tau: 0.1,
            max_vertices: 4096,
            initial_step: 1e-2,
            backtrack_factor: 0.5,
            max_backtracks: 20,
            min_scale: 0.1,
            max_scale: 10.0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(AlignError::InvalidConfig("alpha must lie in [0, 1]"));
        }
        if self.ransac_iters == 0 || self.refine_max_iters == 0 {
            return Err(AlignError::InvalidConfig("iteration counts must be positive"));
        }
        if !(self.inlier_threshold > 0.0 && self.refine_tol > 0.0 && self.cycle_tau > 0.0) {
            return Err(AlignError::InvalidConfig("thresholds must be positive"));
        }
        if !(self.initial_step > 0.0 && self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(AlignError::InvalidConfig("bad line-search parameters"));
        }
        if !(self.min_scale > 0.0 && self.min_scale < self.max_scale) {
            return Err(AlignError::InvalidConfig("bad scale bounds"));
        }
        Ok(())
    }
}

/// A vertex pairing between two surfaces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source_index: usize,
    pub target_index: usize,
    pub weight: f64,
}

/// Feature-space matches for every featured source vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatches {
    pub correspondences: Vec<Correspondence>,
    /// Source vertices without features, left unmatched.
    pub unfeatured: Vec<usize>,
}

fn features_f64(s: &FeaturedSurface) -> Vec<Vec<Vec<f64>>> {
    (0..s.len())
        .map(|i| {
            s.features_of(i)
                .map(|f| f.iter().map(|&v| v as f64).collect())
                .collect()
        })
        .collect()
}

fn dist64(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    libm::sqrt(acc)
}

/// For every featured source vertex `i`, the target vertex `j` minimizing
/// `Σ_l min_k ‖f_j^k − f_i^l‖`. Ties go to the smallest `j`; weights start at 1.
pub fn feature_nn(
    source: &FeaturedSurface,
    target: &FeaturedSurface,
) -> Result<FeatureMatches, AlignError> {
    if source.feature_dim() != target.feature_dim() {
        return Err(AlignError::DimensionMismatch(
            source.feature_dim(),
            target.feature_dim(),
        ));
    }
    let src_featured = source.featured_vertices();
    let tgt_featured = target.featured_vertices();
    if src_featured.is_empty() {
        return Err(AlignError::NoFeatures(Side::Source));
    }
    if tgt_featured.is_empty() {
        return Err(AlignError::NoFeatures(Side::Target));
    }
    let src_f = features_f64(source);
    let tgt_f = features_f64(target);
    let mut correspondences = Vec::with_capacity(src_featured.len());
    for &i in &src_featured {
        let mut best_j = tgt_featured[0];
        let mut best = f64::INFINITY;
        'target: for &j in &tgt_featured {
            let mut cost = 0.0;
            for fl in &src_f[i] {
                let mut nearest = f64::INFINITY;
                for fk in &tgt_f[j] {
                    nearest = nearest.min(dist64(fk, fl));
                }
                cost += nearest;
                // later j only wins on a strict improvement
                if cost >= best {
                    continue 'target;
                }
            }
            best = cost;
            best_j = j;
        }
        correspondences.push(Correspondence {
            source_index: i,
            target_index: best_j,
            weight: 1.0,
        });
    }
    let unfeatured = (0..source.len())
        .filter(|&i| source.feature_count(i) == 0)
        .collect();
    Ok(FeatureMatches {
        correspondences,
        unfeatured,
    })
}

/// Cycle-consistency weight per forward correspondence:
/// `exp(−‖v_i − v_{bwd(fwd(i))}‖ / (tau · ρ))`, with `ρ` the source
/// bounding radius. A forward target missing from `bwd` gets weight 0.
pub fn cycle_weights(
    fwd: &[Correspondence],
    bwd: &[Correspondence],
    source: &[Vector3<f64>],
    tau: f64,
) -> Vec<f64> {
    let radius = bounding_radius(source);
    let scale = tau * radius;
    let back: alloc::collections::BTreeMap<usize, usize> =
        bwd.iter().map(|c| (c.source_index, c.target_index)).collect();
    fwd.iter()
        .map(|c| match back.get(&c.target_index) {
            Some(&r) => {
                let d = (source[c.source_index] - source[r]).norm();
                if d == 0.0 {
                    1.0
                } else if scale > 0.0 {
                    libm::exp(-d / scale)
                } else {
                    0.0
                }
            }
            None => 0.0,
        })
        .collect()
}

/// Symmetric Chamfer distance: mean nearest-neighbor distance from `a` to
/// `b` plus mean from `b` to `a`.
pub fn dist_geo(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let tree_a = KdTree::new(a);
    let tree_b = KdTree::new(b);
    one_way_chamfer(a, &tree_b) + one_way_chamfer(b, &tree_a)
}

fn one_way_chamfer(queries: &[Vector3<f64>], tree: &KdTree) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let sum: f64 = queries
        .iter()
        .map(|q| tree.nearest(q).map_or(0.0, |(_, d2)| libm::sqrt(d2)))
        .sum();
    sum / queries.len() as f64
}

/// Weighted appearance distance in 3D: normalized-weight mean of
/// `‖source_i − target_fwd(i)‖` plus the same from the target side.
pub fn dist_app(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    fwd: &[Correspondence],
    bwd: &[Correspondence],
) -> Result<f64, AlignError> {
    Ok(weighted_pair_mean(fwd, |c| (source[c.source_index] - target[c.target_index]).norm())?
        + weighted_pair_mean(bwd, |c| (target[c.source_index] - source[c.target_index]).norm())?)
}

fn weighted_pair_mean(
    pairs: &[Correspondence],
    dist: impl Fn(&Correspondence) -> f64,
) -> Result<f64, AlignError> {
    let total: f64 = pairs.iter().map(|c| c.weight).sum();
    if !(total >= 1e-12) {
        return Err(AlignError::DegenerateWeights);
    }
    Ok(pairs.iter().map(|c| c.weight * dist(c)).sum::<f64>() / total)
}

/// The two raw terms, the normalizing radius, and their blend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceTerms {
    pub geo: f64,
    pub app: f64,
    pub radius: f64,
    pub total: f64,
}

/// Number of local refinement parameters: rotation (3), translation (3), log-scale.
pub const PARAMS: usize = 7;

/// Cached state for evaluating the alignment objective of one surface pair.
///
/// Feature correspondences do not depend on the transform, so they are
/// computed once; only the source vertex positions move.
#[derive(Debug, Clone)]
pub struct AlignmentProblem {
    source: Vec<Vector3<f64>>,
    target: Vec<Vector3<f64>>,
    fwd: Vec<Correspondence>,
    bwd: Vec<Correspondence>,
    source_tree: KdTree,
    target_tree: KdTree,
    radius: f64,
    alpha: f64,
}

impl AlignmentProblem {
    /// Downsamples both surfaces, matches features in both directions, and
    /// applies cycle-consistency weights.
    pub fn new(
        source: &FeaturedSurface,
        target: &FeaturedSurface,
        config: &AlignConfig,
    ) -> Result<Self, AlignError> {
        config.validate()?;
        if source.len() < 4 {
            return Err(AlignError::TooFewVertices(Side::Source));
        }
        if target.len() < 4 {
            return Err(AlignError::TooFewVertices(Side::Target));
        }
        let source = source.voxel_downsample(config.max_vertices);
        let target = target.voxel_downsample(config.max_vertices);
        let mut fwd = feature_nn(&source, &target)?.correspondences;
        let mut bwd = feature_nn(&target, &source)?.correspondences;
        let wf = cycle_weights(&fwd, &bwd, source.vertices(), config.cycle_tau);
        let wb = cycle_weights(&bwd, &fwd, target.vertices(), config.cycle_tau);
        for (c, w) in fwd.iter_mut().zip(wf) {
            c.weight = w;
        }
        for (c, w) in bwd.iter_mut().zip(wb) {
            c.weight = w;
        }
        Self::from_parts(
            source.vertices().to_vec(),
            target.vertices().to_vec(),
            fwd,
            bwd,
            config.alpha,
        )
    }

    /// Builds a problem from explicit points and weighted correspondences.
    pub fn from_parts(
        source: Vec<Vector3<f64>>,
        target: Vec<Vector3<f64>>,
        fwd: Vec<Correspondence>,
        bwd: Vec<Correspondence>,
        alpha: f64,
    ) -> Result<Self, AlignError> {
        if source.is_empty() {
            return Err(AlignError::TooFewVertices(Side::Source));
        }
        if target.is_empty() {
            return Err(AlignError::TooFewVertices(Side::Target));
        }
        let radius = bounding_radius(&target);
        let radius = if radius > 0.0 { radius } else { 1.0 };
        Ok(Self {
            source_tree: KdTree::new(&source),
            target_tree: KdTree::new(&target),
            source,
            target,
            fwd,
            bwd,
            radius,
            alpha,
        })
    }

    pub fn source(&self) -> &[Vector3<f64>] {
        &self.source
    }

    pub fn target(&self) -> &[Vector3<f64>] {
        &self.target
    }

    pub fn forward(&self) -> &[Correspondence] {
        &self.fwd
    }

    pub fn backward(&self) -> &[Correspondence] {
        &self.bwd
    }

    /// Reference bounding radius used to normalize distances.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn transformed(&self, t: &SimilarityTransform) -> Vec<Vector3<f64>> {
        t.apply(&self.source)
    }

    /// Spatial nearest source index for every target vertex, found in the
    /// untransformed source frame (similarities preserve distance order).
    fn target_to_source_nn(&self, t: &SimilarityTransform) -> Vec<usize> {
        let inv = t.inverse();
        self.target
            .iter()
            .map(|y| {
                self.source_tree
                    .nearest(&inv.apply_point(y))
                    .map_or(0, |(i, _)| i)
            })
            .collect()
    }

    pub fn terms(&self, t: &SimilarityTransform) -> Result<DistanceTerms, AlignError> {
        let moved = self.transformed(t);
        let forward = one_way_chamfer(&moved, &self.target_tree);
        let nn = self.target_to_source_nn(t);
        let backward = self
            .target
            .iter()
            .zip(&nn)
            .map(|(y, &i)| (y - moved[i]).norm())
            .sum::<f64>()
            / self.target.len() as f64;
        let geo = forward + backward;
        let app = if self.alpha > 0.0 {
            dist_app(&moved, &self.target, &self.fwd, &self.bwd)?
        } else {
            0.0
        };
        let total = ((1.0 - self.alpha) * geo + self.alpha * app) / self.radius;
        if !total.is_finite() {
            return Err(AlignError::NonFiniteObjective);
        }
        Ok(DistanceTerms {
            geo,
            app,
            radius: self.radius,
            total,
        })
    }

    pub fn objective(&self, t: &SimilarityTransform) -> Result<f64, AlignError> {
        Ok(self.terms(t)?.total)
    }

    /// The update `A(x)` for local parameters `x = (ω, τ, σ)`:
    /// `y ↦ e^σ · exp(ω) · (y − c) + c + ρ·τ`, where `c` is the centroid of
    /// the source after `base` and `ρ` the reference radius.
    pub fn local_update(&self, base: &SimilarityTransform, x: &[f64; PARAMS]) -> SimilarityTransform {
        let c = base.apply_point(&centroid(&self.source));
        let r = so3_exp(&Vector3::new(x[0], x[1], x[2]));
        let s = libm::exp(x[6]);
        let tau = Vector3::new(x[3], x[4], x[5]) * self.radius;
        let translation = c - r * c * s + tau;
        let update = SimilarityTransform::new(r, translation, s).unwrap_or_default();
        update.compose(base)
    }

    /// Objective at `A(x) ∘ base`.
    pub fn local_objective(
        &self,
        base: &SimilarityTransform,
        x: &[f64; PARAMS],
    ) -> Result<f64, AlignError> {
        self.objective(&self.local_update(base, x))
    }

    /// Objective at `base` and its gradient with respect to the local
    /// parameters at `x = 0`, holding nearest-neighbor assignments fixed.
    pub fn objective_and_gradient(
        &self,
        base: &SimilarityTransform,
    ) -> Result<(f64, [f64; PARAMS]), AlignError> {
        let moved = self.transformed(base);
        let n = moved.len() as f64;
        let m = self.target.len() as f64;
        let geo_w = (1.0 - self.alpha) / self.radius;
        let app_w = self.alpha / self.radius;
        let mut grads = vec![Vector3::zeros(); moved.len()];
        let mut total = 0.0;

        let unit = |v: Vector3<f64>| -> (f64, Vector3<f64>) {
            let d = v.norm();
            if d > 0.0 {
                (d, v / d)
            } else {
                (0.0, Vector3::zeros())
            }
        };

        for (i, q) in moved.iter().enumerate() {
            let (j, _) = self.target_tree.nearest(q).ok_or(AlignError::NonFiniteObjective)?;
            let (d, u) = unit(q - self.target[j]);
            total += geo_w * d / n;
            grads[i] += u * (geo_w / n);
        }
        let nn = self.target_to_source_nn(base);
        for (y, &i) in self.target.iter().zip(&nn) {
            let (d, u) = unit(moved[i] - y);
            total += geo_w * d / m;
            grads[i] += u * (geo_w / m);
        }
        if self.alpha > 0.0 {
            let wf: f64 = self.fwd.iter().map(|c| c.weight).sum();
            let wb: f64 = self.bwd.iter().map(|c| c.weight).sum();
            if !(wf >= 1e-12 && wb >= 1e-12) {
                return Err(AlignError::DegenerateWeights);
            }
            for c in &self.fwd {
                let i = c.source_index;
                let (d, u) = unit(moved[i] - self.target[c.target_index]);
                total += app_w * c.weight * d / wf;
                grads[i] += u * (app_w * c.weight / wf);
            }
            for c in &self.bwd {
                let i = c.target_index;
                let (d, u) = unit(moved[i] - self.target[c.source_index]);
                total += app_w * c.weight * d / wb;
                grads[i] += u * (app_w * c.weight / wb);
            }
        }
        if !total.is_finite() {
            return Err(AlignError::NonFiniteObjective);
        }

        let c = centroid(&moved);
        let mut g_rot = Vector3::zeros();
        let mut g_trans = Vector3::zeros();
        let mut g_scale = 0.0;
        for (q, g) in moved.iter().zip(&grads) {
            let arm = q - c;
            g_rot += arm.cross(g);
            g_trans += g;
            g_scale += arm.dot(g);
        }
        g_trans *= self.radius;
        Ok((
            total,
            [g_rot.x, g_rot.y, g_rot.z, g_trans.x, g_trans.y, g_trans.z, g_scale],
        ))
    }
}

/// Convenience: the blended objective for one transform, building all
/// caches from scratch.
pub fn total_distance(
    source: &FeaturedSurface,
    target: &FeaturedSurface,
    transform: &SimilarityTransform,
    config: &AlignConfig,
) -> Result<DistanceTerms, AlignError> {
    AlignmentProblem::new(source, target, config)?.terms(transform)
}

/// Closed-form least-squares similarity mapping `src[i]` onto `dst[i]`
/// (centroid removal, cross-covariance SVD, scale from the variance ratio).
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<SimilarityTransform, AlignError> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(AlignError::DegenerateSample);
    }
    let mu_s = centroid(src);
    let mu_d = centroid(dst);
    let centered = DMatrix::from_fn(n, 3, |r, c| src[r][c] - mu_s[c]);
    let sv = centered.singular_values();
    let (s1, s2) = (sv[0], sv[1]);
    if !(s1 > 0.0) || s2 < 1e-9 * s1 {
        return Err(AlignError::DegenerateSample);
    }
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let cs = s - mu_s;
        cov += (d - mu_d) * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= n as f64;
    var_s /= n as f64;
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(AlignError::DegenerateSample),
    };
    let mut fix = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        fix.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&fix) * v_t;
    let scale = svd.singular_values.dot(&fix) / var_s;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(AlignError::DegenerateSample);
    }
    let translation = mu_d - rotation * mu_s * scale;
    SimilarityTransform::new(rotation, translation, scale).map_err(|_| AlignError::DegenerateSample)
}

/// Outcome of the robust initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub transform: SimilarityTransform,
    pub inliers: usize,
    pub degenerate_samples: usize,
}

/// Weighted RANSAC over 3-point minimal similarity fits, refit on the best
/// inlier set. The inlier bound is `inlier_threshold · radius`.
pub fn ransac_init(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    correspondences: &[Correspondence],
    config: &AlignConfig,
    radius: f64,
    seed: u64,
) -> Result<RansacOutcome, AlignError> {
    let active: Vec<&Correspondence> = correspondences.iter().filter(|c| c.weight > 0.0).collect();
    if active.len() < 3 {
        return Err(AlignError::TooFewCorrespondences);
    }
    let mut cumulative = Vec::with_capacity(active.len());
    let mut acc = 0.0;
    for c in &active {
        acc += c.weight;
        cumulative.push(acc);
    }
    let total = acc;
    let threshold = config.inlier_threshold * radius;
    let threshold_sq = threshold * threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let draw = |rng: &mut ChaCha8Rng| -> usize {
        let x = rng.random::<f64>() * total;
        cumulative.partition_point(|&c| c <= x).min(active.len() - 1)
    };
    let count_inliers = |t: &SimilarityTransform| -> usize {
        active
            .iter()
            .filter(|c| {
                (t.apply_point(&source[c.source_index]) - target[c.target_index]).norm_squared()
                    < threshold_sq
            })
            .count()
    };

    let mut best: Option<(SimilarityTransform, usize)> = None;
    let mut degenerate = 0;
    for _ in 0..config.ransac_iters {
        let mut picks = [usize::MAX; 3];
        let mut filled = 0;
        for _ in 0..64 {
            let k = draw(&mut rng);
            if !picks[..filled].contains(&k) {
                picks[filled] = k;
                filled += 1;
                if filled == 3 {
                    break;
                }
            }
        }
        if filled < 3 {
            degenerate += 1;
            continue;
        }
        let src: Vec<_> = picks.iter().map(|&k| source[active[k].source_index]).collect();
        let dst: Vec<_> = picks.iter().map(|&k| target[active[k].target_index]).collect();
        let hypothesis = match umeyama(&src, &dst) {
            Ok(h) => h,
            Err(_) => {
                degenerate += 1;
                continue;
            }
        };
        let inliers = count_inliers(&hypothesis);
        if best.as_ref().is_none_or(|(_, b)| inliers > *b) {
            best = Some((hypothesis, inliers));
        }
    }
    let (hypothesis, _) = best.ok_or(AlignError::DegenerateSample)?;

    let inlier_pairs: Vec<&&Correspondence> = active
        .iter()
        .filter(|c| {
            (hypothesis.apply_point(&source[c.source_index]) - target[c.target_index]).norm_squared()
                < threshold_sq
        })
        .collect();
    let src: Vec<_> = inlier_pairs.iter().map(|c| source[c.source_index]).collect();
    let dst: Vec<_> = inlier_pairs.iter().map(|c| target[c.target_index]).collect();
    let transform = match umeyama(&src, &dst) {
        Ok(refit) if count_inliers(&refit) >= inlier_pairs.len() => refit,
        _ => hypothesis,
    };
    Ok(RansacOutcome {
        inliers: count_inliers(&transform),
        transform,
        degenerate_samples: degenerate,
    })
}

/// Result of gradient refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub transform: SimilarityTransform,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
}

/// Number of consecutive low-progress iterations that ends refinement.
const STALL_WINDOW: usize = 10;
const ARMIJO: f64 = 1e-4;
const MAX_STEP: f64 = 1.0;

/// First-order descent on the blended objective with a backtracking line
/// search. Never returns an objective above the one at `t0`.
pub fn refine(
    t0: &SimilarityTransform,
    problem: &AlignmentProblem,
    config: &AlignConfig,
) -> Result<Refined, AlignError> {
    let mut current = clamp_scale(t0, config);
    let initial_objective = problem.objective(t0)?;
    let mut f = problem.objective(&current)?;
    if f > initial_objective {
        current = *t0;
        f = initial_objective;
    }
    let mut step = config.initial_step;
    let mut stall = 0;
    let mut iterations = 0;
    while iterations < config.refine_max_iters {
        iterations += 1;
        let (_, g) = problem.objective_and_gradient(&current)?;
        let g_sq: f64 = g.iter().map(|v| v * v).sum();
        if !(g_sq > 0.0) {
            break;
        }
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let x: [f64; PARAMS] = core::array::from_fn(|k| -step * g[k]);
            let candidate = clamp_scale(&problem.local_update(&current, &x), config);
            let fc = problem.objective(&candidate)?;
            if fc <= f - ARMIJO * step * g_sq {
                accepted = Some((candidate, fc));
                break;
            }
            step *= config.backtrack_factor;
        }
        let Some((candidate, fc)) = accepted else {
            break;
        };
        let relative = (f - fc) / f.max(f64::MIN_POSITIVE);
        current = candidate;
        f = fc;
        stall = if relative < config.refine_tol { stall + 1 } else { 0 };
        if stall >= STALL_WINDOW {
            break;
        }
        step = (step * 2.0).min(MAX_STEP);
    }
    Ok(Refined {
        transform: current,
        objective: f,
        initial_objective,
        iterations,
    })
}

fn clamp_scale(t: &SimilarityTransform, config: &AlignConfig) -> SimilarityTransform {
    let s = t.scale().clamp(config.min_scale, config.max_scale);
    if s == t.scale() {
        return *t;
    }
    SimilarityTransform::new(*t.rotation(), *t.translation(), s).unwrap_or(*t)
}

/// Full alignment result.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Maps instance coordinates into the reference frame.
    pub transform: SimilarityTransform,
    /// Final blended objective.
    pub score: f64,
    pub ransac_inliers: usize,
    pub correspondences: usize,
    pub refine_iterations: usize,
}

/// Aligns `instance` to `reference`: feature matching both ways, cycle
/// weights, weighted RANSAC, then refinement. Deterministic given `seed`.
pub fn align(
    instance: &FeaturedSurface,
    reference: &FeaturedSurface,
    config: &AlignConfig,
    seed: u64,
) -> Result<Alignment, AlignError> {
    let problem = AlignmentProblem::new(instance, reference, config)?;
    let init = ransac_init(
        problem.source(),
        problem.target(),
        problem.forward(),
        config,
        problem.radius(),
        seed,
    )?;
    let refined = refine(&init.transform, &problem, config)?;
    Ok(Alignment {
        transform: refined.transform,
        score: refined.objective,
        ransac_inliers: init.inliers,
        correspondences: problem.forward().len(),
        refine_iterations: refined.iterations,
    })
}
