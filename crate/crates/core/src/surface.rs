//! Vertices decorated with variable-size sets of unit feature vectors.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use nalgebra::Vector3;
use thiserror::Error;

/// Allowed deviation of a stored feature's L2 norm from 1.
pub const FEATURE_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SurfaceError {
    #[error("feature dimension must be positive")]
    ZeroFeatureDim,
    #[error("expected {expected} per-vertex feature counts, got {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("feature block holds {found} floats, counts imply {expected}")]
    FeatureLength { expected: usize, found: usize },
    #[error("feature {index} has norm {norm}, expected unit length")]
    NonUnitFeature { index: usize, norm: f64 },
    #[error("non-finite vertex coordinate at vertex {0}")]
    NonFiniteVertex(usize),
}

/// An object's vertices plus per-vertex multi-view feature observations.
///
/// Features are kept in one contiguous `f32` block; `offsets[i]..offsets[i+1]`
/// indexes the observations of vertex `i` (in units of whole vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturedSurface {
    vertices: Vec<Vector3<f64>>,
    feature_dim: usize,
    offsets: Vec<usize>,
    features: Vec<f32>,
}

impl FeaturedSurface {
    /// Builds a surface from per-vertex feature counts and the concatenated
    /// feature block (vertex order).
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        feature_dim: usize,
        counts: &[usize],
        features: Vec<f32>,
    ) -> Result<Self, SurfaceError> {
        if feature_dim == 0 {
            return Err(SurfaceError::ZeroFeatureDim);
        }
        if counts.len() != vertices.len() {
            return Err(SurfaceError::CountMismatch {
                expected: vertices.len(),
                found: counts.len(),
            });
        }
        if let Some(i) = vertices
            .iter()
            .position(|v| v.iter().any(|c| !c.is_finite()))
        {
            return Err(SurfaceError::NonFiniteVertex(i));
        }
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        offsets.push(0);
        let mut total = 0usize;
        for c in counts {
            total += c;
            offsets.push(total);
        }
        if features.len() != total * feature_dim {
            return Err(SurfaceError::FeatureLength {
                expected: total * feature_dim,
                found: features.len(),
            });
        }
        for (index, f) in features.chunks_exact(feature_dim).enumerate() {
            let norm = feature_norm(f);
            if !((norm - 1.0).abs() <= FEATURE_NORM_TOLERANCE) {
                return Err(SurfaceError::NonUnitFeature { index, norm });
            }
        }
        Ok(Self {
            vertices,
            feature_dim,
            offsets,
            features,
        })
    }

    /// Convenience constructor from nested per-vertex feature lists.
    pub fn from_sets(
        vertices: Vec<Vector3<f64>>,
        feature_dim: usize,
        sets: &[Vec<Vec<f32>>],
    ) -> Result<Self, SurfaceError> {
        let counts: Vec<usize> = sets.iter().map(Vec::len).collect();
        let mut block = Vec::new();
        for set in sets {
            for f in set {
                if f.len() != feature_dim {
                    return Err(SurfaceError::FeatureLength {
                        expected: feature_dim,
                        found: f.len(),
                    });
                }
                block.extend_from_slice(f);
            }
        }
        Self::new(vertices, feature_dim, &counts, block)
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn feature_count(&self, vertex: usize) -> usize {
        self.offsets[vertex + 1] - self.offsets[vertex]
    }

    pub fn feature_counts(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets.windows(2).map(|w| w[1] - w[0])
    }

    /// The feature observations of `vertex`, one `feature_dim` slice each.
    pub fn features_of(&self, vertex: usize) -> core::slice::ChunksExact<'_, f32> {
        let d = self.feature_dim;
        self.features[self.offsets[vertex] * d..self.offsets[vertex + 1] * d].chunks_exact(d)
    }

    /// All feature vectors concatenated in vertex order.
    pub fn feature_block(&self) -> &[f32] {
        &self.features
    }

    /// Indices of vertices carrying at least one feature.
    pub fn featured_vertices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.feature_count(i) > 0).collect()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        centroid(&self.vertices)
    }

    /// Largest distance from the centroid to any vertex.
    pub fn bounding_radius(&self) -> f64 {
        bounding_radius(&self.vertices)
    }

    /// Same features, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vector3<f64>>) -> FeaturedSurface {
        assert_eq!(vertices.len(), self.vertices.len());
        FeaturedSurface {
            vertices,
            ..self.clone()
        }
    }

    /// Keeps the listed vertices (and their features) in the given order.
    pub fn subset(&self, indices: &[usize]) -> FeaturedSurface {
        let d = self.feature_dim;
        let mut vertices = Vec::with_capacity(indices.len());
        let mut offsets = Vec::with_capacity(indices.len() + 1);
        let mut features = Vec::new();
        offsets.push(0);
        for &i in indices {
            vertices.push(self.vertices[i]);
            features.extend_from_slice(&self.features[self.offsets[i] * d..self.offsets[i + 1] * d]);
            offsets.push(features.len() / d);
        }
        FeaturedSurface {
            vertices,
            feature_dim: d,
            offsets,
            features,
        }
    }

    /// Voxel-grid decimation to at most `max_vertices`.
    ///
    /// The grid edge starts at `radius / 32` and grows by 25% until the
    /// budget is met. Each occupied voxel keeps the original vertex nearest
    /// to the voxel's member centroid, features included.
    pub fn voxel_downsample(&self, max_vertices: usize) -> FeaturedSurface {
        if self.len() <= max_vertices || max_vertices == 0 {
            return self.clone();
        }
        let radius = self.bounding_radius();
        let mut edge = if radius > 0.0 { radius / 32.0 } else { 1.0 };
        loop {
            let kept = voxel_representatives(&self.vertices, edge);
            if kept.len() <= max_vertices {
                return self.subset(&kept);
            }
            edge *= 1.25;
        }
    }
}

fn voxel_representatives(points: &[Vector3<f64>], edge: f64) -> Vec<usize> {
    let lo = points
        .iter()
        .fold(Vector3::repeat(f64::INFINITY), |acc, p| acc.inf(p));
    let mut cells: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let c = (p - lo) / edge;
        let key = (
            libm::floor(c.x) as i64,
            libm::floor(c.y) as i64,
            libm::floor(c.z) as i64,
        );
        cells.entry(key).or_default().push(i);
    }
    let mut kept: Vec<usize> = cells
        .values()
        .map(|members| {
            let mean = members
                .iter()
                .fold(Vector3::zeros(), |acc, &i| acc + points[i])
                / members.len() as f64;
            let mut best = members[0];
            let mut best_d = f64::INFINITY;
            for &i in members {
                let d = (points[i] - mean).norm_squared();
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            best
        })
        .collect();
    kept.sort_unstable();
    kept
}

pub fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    if points.is_empty() {
        return Vector3::zeros();
    }
    points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Radius of the centroid-centered sphere enclosing all points.
pub fn bounding_radius(points: &[Vector3<f64>]) -> f64 {
    let c = centroid(points);
    points
        .iter()
        .map(|p| (p - c).norm())
        .fold(0.0, f64::max)
}

pub fn feature_norm(f: &[f32]) -> f64 {
    libm::sqrt(f.iter().map(|&v| v as f64 * v as f64).sum::<f64>())
}

/// Rescales every `dim`-sized vector in `block` whose norm deviates from 1 by
/// more than [`FEATURE_NORM_TOLERANCE`]. Returns the largest deviation seen,
/// or `None` if some vector has zero or non-finite norm.
pub fn normalize_feature_block(block: &mut [f32], dim: usize) -> Option<f64> {
    let mut worst = 0.0f64;
    for f in block.chunks_exact_mut(dim) {
        let norm = feature_norm(f);
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        let dev = (norm - 1.0).abs();
        worst = worst.max(dev);
        if dev > FEATURE_NORM_TOLERANCE {
            for v in f.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
    }
    Some(worst)
}
