//! Synthetic featured shapes with planted similarity transforms.
//!
//! Shapes are unions of randomly placed ellipsoid shells. Every shape owns a
//! smooth feature field over its own frame, so feature observations follow
//! the surface through any rigid or similarity motion.

use alloc::vec::Vec;
use core::f64::consts::PI;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::geometry::{rotation_about, SimilarityTransform};
use crate::surface::FeaturedSurface;

/// Standard normal sample (Box-Muller).
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = rng.random::<f64>().max(1e-300);
    let u2 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
}

/// Rotation drawn from the Haar measure on SO(3) via a random unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let q: [f64; 4] = core::array::from_fn(|_| gaussian(rng));
    let n = libm::sqrt(q.iter().map(|v| v * v).sum());
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone)]
struct Ellipsoid {
    center: Vector3<f64>,
    radii: Vector3<f64>,
    rotation: Matrix3<f64>,
}

/// A random asymmetric shape with its own feature field.
#[derive(Debug, Clone)]
pub struct SyntheticShape {
    parts: Vec<Ellipsoid>,
    weights: Vec<f64>,
    offset: Vec<f64>,
    frequencies: Vec<Vector3<f64>>,
    phases: Vec<f64>,
    amplitude: f64,
}

impl SyntheticShape {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, feature_dim: usize) -> Self {
        let parts: Vec<Ellipsoid> = (0..4)
            .map(|_| Ellipsoid {
                center: Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ),
                radii: Vector3::new(
                    rng.random_range(0.15..0.5),
                    rng.random_range(0.15..0.5),
                    rng.random_range(0.15..0.5),
                ),
                rotation: random_rotation(rng),
            })
            .collect();
        let weights = parts
            .iter()
            .map(|e| e.radii.x * e.radii.y + e.radii.y * e.radii.z + e.radii.x * e.radii.z)
            .collect();
        let mut offset: Vec<f64> = (0..feature_dim).map(|_| gaussian(rng)).collect();
        let n = libm::sqrt(offset.iter().map(|v| v * v).sum());
        offset.iter_mut().for_each(|v| *v /= n);
        let frequencies = (0..feature_dim)
            .map(|_| random_unit(rng) * rng.random_range(2.0..5.0))
            .collect();
        let phases = (0..feature_dim).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self {
            parts,
            weights,
            offset,
            frequencies,
            phases,
            amplitude: 0.6,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.offset.len()
    }

    /// Unit feature of the field at `p` (shape frame).
    pub fn feature_at(&self, p: &Vector3<f64>) -> Vec<f64> {
        let raw: Vec<f64> = self
            .offset
            .iter()
            .zip(&self.frequencies)
            .zip(&self.phases)
            .map(|((o, b), phi)| o + self.amplitude * libm::sin(b.dot(p) + phi))
            .collect();
        let n = libm::sqrt(raw.iter().map(|v| v * v).sum());
        raw.into_iter().map(|v| v / n).collect()
    }

    /// `n` clean surface samples in the shape frame.
    pub fn sample_points<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vector3<f64>> {
        let total: f64 = self.weights.iter().sum();
        (0..n)
            .map(|_| {
                let mut x = rng.random::<f64>() * total;
                let mut part = &self.parts[self.parts.len() - 1];
                for (e, w) in self.parts.iter().zip(&self.weights) {
                    if x < *w {
                        part = e;
                        break;
                    }
                    x -= w;
                }
                let u = random_unit(rng);
                part.center + part.rotation * part.radii.component_mul(&u)
            })
            .collect()
    }

    /// Featured surface in the shape frame: one observation per vertex plus
    /// isotropic feature noise, renormalized.
    pub fn surface<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        n: usize,
        feature_noise: f64,
    ) -> FeaturedSurface {
        let points = self.sample_points(rng, n);
        self.decorate(rng, points.clone(), &points, feature_noise)
    }

    /// Attaches features evaluated at `clean` to the vertex positions `placed`.
    fn decorate<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        placed: Vec<Vector3<f64>>,
        clean: &[Vector3<f64>],
        feature_noise: f64,
    ) -> FeaturedSurface {
        let dim = self.feature_dim();
        let mut block = Vec::with_capacity(clean.len() * dim);
        for p in clean {
            let mut f = self.feature_at(p);
            for v in f.iter_mut() {
                *v += feature_noise * gaussian(rng);
            }
            let n = libm::sqrt(f.iter().map(|v| v * v).sum());
            block.extend(f.iter().map(|v| (v / n) as f32));
        }
        let counts = alloc::vec![1usize; clean.len()];
        FeaturedSurface::new(placed, dim, &counts, block).expect("unit features by construction")
    }

    /// Largest side of the axis-aligned box around `n` samples.
    pub fn extent<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let pts = self.sample_points(rng, 4096);
        let lo = pts.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
        let hi = pts.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
        (hi - lo).max()
    }
}

/// How an instance departs from its base shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceParams {
    /// Shape frame to instance frame.
    pub transform: SimilarityTransform,
    /// Vertex noise standard deviation, as a fraction of `extent`.
    pub noise: f64,
    /// Fraction of sampled points removed at random.
    pub dropout: f64,
    /// Fraction removed from one side by a random half-space cut.
    pub partial_cut: f64,
    pub feature_noise: f64,
}

impl Default for InstanceParams {
    fn default() -> Self {
        Self {
            transform: SimilarityTransform::identity(),
            noise: 0.0,
            dropout: 0.0,
            partial_cut: 0.0,
            feature_noise: 0.0,
        }
    }
}

/// Draws a random Sim(3) with scale in `scale_range` and translation in a
/// cube of half-width `max_translation`.
pub fn random_similarity<R: Rng + ?Sized>(
    rng: &mut R,
    scale_range: (f64, f64),
    max_translation: f64,
) -> SimilarityTransform {
    let t = Vector3::new(
        rng.random_range(-max_translation..=max_translation),
        rng.random_range(-max_translation..=max_translation),
        rng.random_range(-max_translation..=max_translation),
    );
    let s = rng.random_range(scale_range.0..=scale_range.1);
    SimilarityTransform::new(random_rotation(rng), t, s).expect("valid by construction")
}

/// Samples `n` points of `shape`, removes dropped points, moves the rest by
/// the planted transform and adds vertex noise of `noise · extent · scale`.
pub fn make_instance<R: Rng + ?Sized>(
    shape: &SyntheticShape,
    rng: &mut R,
    n: usize,
    extent: f64,
    params: &InstanceParams,
) -> FeaturedSurface {
    let mut clean = shape.sample_points(rng, n);
    if params.dropout > 0.0 {
        clean.retain(|_| rng.random::<f64>() >= params.dropout);
    }
    if params.partial_cut > 0.0 {
        let dir = random_unit(rng);
        let mut proj: Vec<f64> = clean.iter().map(|p| p.dot(&dir)).collect();
        proj.sort_by(f64::total_cmp);
        let keep = ((1.0 - params.partial_cut) * proj.len() as f64) as usize;
        let cut = proj[keep.min(proj.len() - 1)];
        clean.retain(|p| p.dot(&dir) < cut);
    }
    let sigma = params.noise * extent * params.transform.scale();
    let placed = clean
        .iter()
        .map(|p| {
            params.transform.apply_point(p)
                + Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng)) * sigma
        })
        .collect();
    shape.decorate(rng, placed, &clean, params.feature_noise)
}

/// Rotation by `angle` about a random axis.
pub fn perturbation<R: Rng + ?Sized>(rng: &mut R, angle: f64) -> Matrix3<f64> {
    rotation_about(&random_unit(rng), angle)
}
