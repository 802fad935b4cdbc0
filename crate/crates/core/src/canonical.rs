//! Oriented boxes in the canonical frame and their propagation to cameras.

use alloc::vec::Vec;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{GeometryError, Pose9D, SimilarityTransform};
use crate::surface::FeaturedSurface;

pub const DEFAULT_ROBUST_QUANTILE: f64 = 0.01;
/// Smallest admissible box side.
pub const MIN_EXTENT: f64 = 1e-9;
const CAMERA_SCALE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CanonicalError {
    #[error("box fitting needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("robust quantile {0} outside [0, 0.5)")]
    InvalidQuantile(f64),
    #[error("extent {extent} along axis {axis} is degenerate")]
    DegenerateExtent { axis: usize, extent: f64 },
    #[error("non-finite point coordinate")]
    NonFinitePoint,
    #[error("camera transform must be rigid, got scale {0}")]
    NonRigidCamera(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Axis-aligned box between the `q` and `1 − q` quantiles on each axis.
pub fn fit_box(points: &[Vector3<f64>], robust_quantile: f64) -> Result<Pose9D, CanonicalError> {
    if !(0.0..0.5).contains(&robust_quantile) {
        return Err(CanonicalError::InvalidQuantile(robust_quantile));
    }
    if points.len() < 4 {
        return Err(CanonicalError::TooFewPoints(points.len()));
    }
    let mut center = Vector3::zeros();
    let mut extents = Vector3::zeros();
    let mut axis_values = Vec::with_capacity(points.len());
    for axis in 0..3 {
        axis_values.clear();
        axis_values.extend(points.iter().map(|p| p[axis]));
        if axis_values.iter().any(|v| !v.is_finite()) {
            return Err(CanonicalError::NonFinitePoint);
        }
        axis_values.sort_unstable_by(f64::total_cmp);
        let lo = quantile_sorted(&axis_values, robust_quantile);
        let hi = quantile_sorted(&axis_values, 1.0 - robust_quantile);
        let extent = hi - lo;
        if !(extent >= MIN_EXTENT) {
            return Err(CanonicalError::DegenerateExtent { axis, extent });
        }
        center[axis] = 0.5 * (lo + hi);
        extents[axis] = extent;
    }
    Ok(Pose9D::new(Matrix3::identity(), center, extents)?)
}

/// An instance's canonicalizing transform and its box in canonical
/// coordinates (identity rotation, centered at the origin).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalPose {
    pub world_to_canonical: SimilarityTransform,
    pub canonical_box: Pose9D,
}

impl CanonicalPose {
    /// The box expressed in the instance's world frame.
    pub fn world_pose(&self) -> Pose9D {
        self.canonical_box
            .transformed(&self.world_to_canonical.inverse())
    }
}

/// Chains the alignment into the reference's annotated frame, fits the box
/// there and re-centers the canonical frame on the box center.
///
/// `reference_annotation` is the reference's canonical box placed in the
/// reference world frame.
pub fn make_canonical_pose(
    instance: &FeaturedSurface,
    transform_to_reference: &SimilarityTransform,
    reference_annotation: &Pose9D,
    robust_quantile: f64,
) -> Result<CanonicalPose, CanonicalError> {
    let canonicalizer = reference_annotation.placement().inverse();
    let to_canonical = canonicalizer.compose(transform_to_reference);
    let fitted = fit_box(&to_canonical.apply(instance.vertices()), robust_quantile)?;
    let recenter = SimilarityTransform::from_translation(-fitted.translation())?;
    Ok(CanonicalPose {
        world_to_canonical: recenter.compose(&to_canonical),
        canonical_box: Pose9D::new(Matrix3::identity(), Vector3::zeros(), *fitted.extents())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraFrame {
    pub frame_id: u64,
    world_to_camera: SimilarityTransform,
}

impl CameraFrame {
    pub fn new(frame_id: u64, world_to_camera: SimilarityTransform) -> Result<Self, CanonicalError> {
        if (world_to_camera.scale() - 1.0).abs() > CAMERA_SCALE_TOLERANCE {
            return Err(CanonicalError::NonRigidCamera(world_to_camera.scale()));
        }
        Ok(Self {
            frame_id,
            world_to_camera,
        })
    }

    pub fn world_to_camera(&self) -> &SimilarityTransform {
        &self.world_to_camera
    }
}

/// Per-frame box poses in camera coordinates. Extents never change across
/// frames.
pub fn propagate(canonical: &CanonicalPose, trajectory: &[CameraFrame]) -> Vec<Pose9D> {
    let world = canonical.world_pose();
    trajectory
        .iter()
        .map(|frame| world.transformed(&frame.world_to_camera))
        .collect()
}
