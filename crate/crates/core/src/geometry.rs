//! Rotation, similarity-transform and oriented-box primitives.

use alloc::vec::Vec;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Tolerance on `RᵀR − I` and `det R − 1` for a matrix to count as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("matrix is not a proper rotation")]
    NotARotation,
    #[error("scale must be positive and finite")]
    InvalidScale,
    #[error("box extents must be positive and finite")]
    InvalidExtents,
    #[error("non-finite translation")]
    NonFiniteTranslation,
}

/// Returns true when `m` is orthonormal with determinant +1 within `tol`.
pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    if m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let gram = m.transpose() * m - Matrix3::identity();
    gram.amax() <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Projects `m` onto the closest proper rotation (polar factor with the
/// determinant sign folded into the smallest singular direction).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Matrix3::identity(),
    };
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // nalgebra sorts singular values descending, so the last column is the weakest
        fix[(2, 2)] = -1.0;
    }
    u * fix * v_t
}

/// Skew-symmetric cross-product matrix of `v`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from an axis-angle vector to a rotation matrix (Rodrigues).
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let k = hat(omega);
    let (a, b) = if theta_sq < 1e-12 {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let theta = libm::sqrt(theta_sq);
        (libm::sin(theta) / theta, (1.0 - libm::cos(theta)) / theta_sq)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation by `angle` radians about `axis` (normalized internally).
pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 {
        return Matrix3::identity();
    }
    so3_exp(&(axis * (angle / n)))
}

/// Angle of the relative rotation `r1ᵀ r2`, in `[0, π]`.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `cos θ = (tr − 1)/2` clamped to
/// `[−1, 1]`, which agrees with the arccos form and stays accurate near 0 and π.
pub fn geodesic_distance(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let rel = r1.transpose() * r2;
    let cos = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (skew.norm() * 0.5).min(1.0);
    libm::atan2(sin, cos)
}

/// Rotation, translation and uniform scale: `p ↦ s·R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    scale: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        scale: f64,
    ) -> Result<Self, GeometryError> {
        if !is_rotation(&rotation, ROTATION_TOLERANCE) {
            return Err(GeometryError::NotARotation);
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::InvalidScale);
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteTranslation);
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    /// Rigid transform (scale 1).
    pub fn rigid(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        Self::new(rotation, translation, 1.0)
    }

    pub fn from_scale(scale: f64) -> Result<Self, GeometryError> {
        Self::new(Matrix3::identity(), Vector3::zeros(), scale)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Result<Self, GeometryError> {
        Self::new(Matrix3::identity(), translation, 1.0)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        points.iter().map(|p| self.apply_point(p)).collect()
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            rotation: nearest_rotation(&(self.rotation * other.rotation)),
            translation: self.rotation * other.translation * self.scale + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let r_t = self.rotation.transpose();
        let inv_scale = 1.0 / self.scale;
        SimilarityTransform {
            rotation: r_t,
            translation: -(r_t * self.translation) * inv_scale,
            scale: inv_scale,
        }
    }

    /// Row-major `[R | t]` as 12 floats.
    pub fn to_rt12(&self) -> [f64; 12] {
        rt12(&self.rotation, &self.translation)
    }

    /// Builds a transform from row-major `[R | t]` and a scale.
    pub fn from_rt12(rt: &[f64; 12], scale: f64) -> Result<Self, GeometryError> {
        let (r, t) = split_rt12(rt);
        Self::new(r, t, scale)
    }
}

pub(crate) fn rt12(r: &Matrix3<f64>, t: &Vector3<f64>) -> [f64; 12] {
    let mut out = [0.0; 12];
    for row in 0..3 {
        for col in 0..3 {
            out[row * 4 + col] = r[(row, col)];
        }
        out[row * 4 + 3] = t[row];
    }
    out
}

pub(crate) fn split_rt12(rt: &[f64; 12]) -> (Matrix3<f64>, Vector3<f64>) {
    let r = Matrix3::new(
        rt[0], rt[1], rt[2], rt[4], rt[5], rt[6], rt[8], rt[9], rt[10],
    );
    (r, Vector3::new(rt[3], rt[7], rt[11]))
}

/// Oriented box: canonical-to-parent rotation, center, and full side lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose9D {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    extents: Vector3<f64>,
}

impl Pose9D {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        extents: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        if !is_rotation(&rotation, ROTATION_TOLERANCE) {
            return Err(GeometryError::NotARotation);
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteTranslation);
        }
        if extents.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(GeometryError::InvalidExtents);
        }
        Ok(Self {
            rotation,
            translation,
            extents,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn extents(&self) -> &Vector3<f64> {
        &self.extents
    }

    pub fn volume(&self) -> f64 {
        self.extents.x * self.extents.y * self.extents.z
    }

    /// The rigid placement of the box frame (scale 1).
    pub fn placement(&self) -> SimilarityTransform {
        SimilarityTransform {
            rotation: self.rotation,
            translation: self.translation,
            scale: 1.0,
        }
    }

    /// Box corners; index bit 0/1/2 selects +x/+y/+z half-extent.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let h = self.extents * 0.5;
        core::array::from_fn(|i| {
            let local = Vector3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            );
            self.rotation * local + self.translation
        })
    }

    /// Whether `p` (parent frame) lies inside the closed box.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.rotation.transpose() * (p - self.translation);
        let h = self.extents * 0.5;
        local.x.abs() <= h.x && local.y.abs() <= h.y && local.z.abs() <= h.z
    }

    /// Re-expresses the box through a rigid transform (`scale` must be 1) or
    /// a similarity, scaling extents accordingly.
    pub fn transformed(&self, t: &SimilarityTransform) -> Pose9D {
        Pose9D {
            rotation: nearest_rotation(&(t.rotation * self.rotation)),
            translation: t.apply_point(&self.translation),
            extents: self.extents * t.scale,
        }
    }

    /// Row-major rotation (9), translation (3), extents (3).
    pub fn to_array15(&self) -> [f64; 15] {
        let mut out = [0.0; 15];
        for row in 0..3 {
            for col in 0..3 {
                out[row * 3 + col] = self.rotation[(row, col)];
            }
            out[9 + row] = self.translation[row];
            out[12 + row] = self.extents[row];
        }
        out
    }

    pub fn from_array15(a: &[f64; 15]) -> Result<Self, GeometryError> {
        let r = Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]);
        Self::new(
            r,
            Vector3::new(a[9], a[10], a[11]),
            Vector3::new(a[12], a[13], a[14]),
        )
    }
}
