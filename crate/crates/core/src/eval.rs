//! Symmetry-aware rotation accuracy and oriented-box IoU.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{geodesic_distance, rotation_about, Pose9D};

pub const DEFAULT_CONTINUOUS_SAMPLES: usize = 720;
/// Marker for an unconstrained orientation slot.
pub const FREE_SLOT: &str = "-";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unknown orientation rule {0:?}")]
    UnknownRule(String),
    #[error("category {0:?} listed with conflicting rules")]
    ConflictingCategory(String),
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("discrete symmetry order must be at least 2, got {0}")]
    InvalidOrder(u32),
    #[error("symmetry axis must be unit length")]
    InvalidAxis,
}

/// Whether a rule fixes a signed direction or only an unsigned axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    Direction,
    Axis,
}

/// Every orientation rule a LEFT/BACK/TOP slot may name.
pub const ORIENTATION_RULES: [(&str, RuleKind); 43] = {
    use RuleKind::{Axis, Direction};
    [
        ("move backward", Direction),
        ("move upward", Direction),
        ("move backward and forward", Axis),
        ("contain or support upward", Direction),
        ("contain or support upward and downward", Axis),
        ("cover upward", Direction),
        ("cover upward and downward", Axis),
        ("entry backward", Direction),
        ("stand upward", Direction),
        ("stand upward downward", Axis),
        ("face backward", Direction),
        ("sprout upward", Direction),
        ("sprout upward and downward", Axis),
        ("stem upward", Direction),
        ("winding axis", Axis),
        ("flow backward", Direction),
        ("flow backward and forward", Axis),
        ("unwinding extension backward", Direction),
        ("eyelet axis", Axis),
        ("toward mount backward", Direction),
        ("toward and away from mount backward", Axis),
        ("toward mount upward", Direction),
        ("away from user", Direction),
        ("away from user fingers", Direction),
        ("toward and away from user", Axis),
        ("user upward", Direction),
        ("user backward", Direction),
        ("user upward and downward", Axis),
        ("user lying axis head feet", Axis),
        ("user forward and backward", Axis),
        ("along grab two hands left right", Axis),
        ("along grab two hands away from function", Direction),
        ("along grab one hand", Axis),
        ("along grab one hand toward function", Direction),
        ("along stand grab one hand grab away from function", Direction),
        ("along grab two fingers toward function", Direction),
        ("hand fingers", Direction),
        ("hand back", Direction),
        ("away from object", Direction),
        ("toward and away from object", Axis),
        ("object upward", Direction),
        ("object squeeze", Axis),
        ("object squeeze back", Direction),
    ]
};

pub fn rule_kind(rule: &str) -> Option<RuleKind> {
    ORIENTATION_RULES
        .iter()
        .find(|(name, _)| *name == rule)
        .map(|(_, kind)| *kind)
}

/// Rules for the canonical LEFT (+x), BACK (+y) and TOP (+z) slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleTriple {
    pub left: String,
    pub back: String,
    pub top: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SymmetryKind {
    None,
    Discrete(u32),
    Continuous,
    /// No slot constrained: every orientation is equivalent.
    Full,
}

/// A category's proper symmetry group: rotations about `axis` as given by
/// `kind`, optionally closed under a half turn about `flip_axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetrySpec {
    pub category: String,
    pub axis: Vector3<f64>,
    pub kind: SymmetryKind,
    pub flip_axis: Option<Vector3<f64>>,
}

impl SymmetrySpec {
    pub fn none(category: impl Into<String>) -> Self {
        Self {
            category: category.into(),
            axis: Vector3::z(),
            kind: SymmetryKind::None,
            flip_axis: None,
        }
    }

    pub fn new(
        category: impl Into<String>,
        axis: Vector3<f64>,
        kind: SymmetryKind,
        flip_axis: Option<Vector3<f64>>,
    ) -> Result<Self, EvalError> {
        if let SymmetryKind::Discrete(n) = kind {
            if n < 2 {
                return Err(EvalError::InvalidOrder(n));
            }
        }
        let unit = |v: &Vector3<f64>| (v.norm() - 1.0).abs() < 1e-9;
        if !unit(&axis) || flip_axis.as_ref().is_some_and(|f| !unit(f)) {
            return Err(EvalError::InvalidAxis);
        }
        Ok(Self {
            category: category.into(),
            axis,
            kind,
            flip_axis,
        })
    }
}

/// Derives the symmetry group left free by a category's orientation rules.
///
/// A direction slot pins its axis including sign; an axis slot pins it up
/// to sign; `-` leaves it free.
pub fn compile_symmetry(category: &str, rules: &RuleTriple) -> Result<SymmetrySpec, EvalError> {
    let mut directions = Vec::new();
    let mut axes = Vec::new();
    for (axis, slot) in [&rules.left, &rules.back, &rules.top].into_iter().enumerate() {
        let slot = slot.trim();
        if slot == FREE_SLOT {
            continue;
        }
        match rule_kind(slot) {
            Some(RuleKind::Direction) => directions.push(axis),
            Some(RuleKind::Axis) => axes.push(axis),
            None => return Err(EvalError::UnknownRule(slot.to_string())),
        }
    }
    let e = |i: usize| Vector3::ith(i, 1.0);
    let perpendicular = |i: usize| e((i + 1) % 3);
    let (axis, kind, flip) = match (directions.as_slice(), axes.as_slice()) {
        ([_, _, ..], _) => (e(2), SymmetryKind::None, None),
        ([d], []) => (e(*d), SymmetryKind::Continuous, None),
        ([d], [_, ..]) => (e(*d), SymmetryKind::Discrete(2), None),
        ([], []) => (e(2), SymmetryKind::Full, None),
        ([], [a]) => (e(*a), SymmetryKind::Continuous, Some(perpendicular(*a))),
        ([], [a, b, ..]) => (e(*a), SymmetryKind::Discrete(2), Some(e(*b))),
    };
    SymmetrySpec::new(category, axis, kind, flip)
}

/// Compiles every category of every rule group; a category may repeat only
/// with identical rules.
pub fn compile_table<'a, I>(groups: I) -> Result<BTreeMap<String, SymmetrySpec>, EvalError>
where
    I: IntoIterator<Item = (&'a RuleTriple, &'a [String])>,
{
    let mut out: BTreeMap<String, SymmetrySpec> = BTreeMap::new();
    for (rules, categories) in groups {
        for category in categories {
            let spec = compile_symmetry(category, rules)?;
            if let Some(prev) = out.get(category) {
                if *prev != spec {
                    return Err(EvalError::ConflictingCategory(category.clone()));
                }
            }
            out.insert(category.clone(), spec);
        }
    }
    Ok(out)
}

/// Elements of the symmetry group, continuous parts sampled uniformly.
///
/// A `Full` spec yields only the identity; [`sym_error`] treats it as zero
/// error instead.
pub fn symmetry_rotations(spec: &SymmetrySpec, continuous_samples: usize) -> Vec<Matrix3<f64>> {
    let about = |n: usize| -> Vec<Matrix3<f64>> {
        (0..n)
            .map(|k| rotation_about(&spec.axis, 2.0 * PI * k as f64 / n as f64))
            .collect()
    };
    let base = match spec.kind {
        SymmetryKind::None | SymmetryKind::Full => vec![Matrix3::identity()],
        SymmetryKind::Discrete(n) => about(n as usize),
        SymmetryKind::Continuous => about(continuous_samples.max(1)),
    };
    match spec.flip_axis {
        None => base,
        Some(f) => {
            let flip = rotation_about(&f, PI);
            let flipped: Vec<_> = base.iter().map(|g| g * flip).collect();
            base.into_iter().chain(flipped).collect()
        }
    }
}

/// Smallest geodesic distance between `pred` and any symmetric copy of `gt`.
pub fn sym_error(
    pred: &Matrix3<f64>,
    gt: &Matrix3<f64>,
    spec: &SymmetrySpec,
    continuous_samples: usize,
) -> f64 {
    if spec.kind == SymmetryKind::Full {
        return 0.0;
    }
    symmetry_rotations(spec, continuous_samples)
        .iter()
        .map(|g| geodesic_distance(pred, &(gt * g)))
        .fold(f64::INFINITY, f64::min)
}

/// Fraction of errors strictly below `threshold`.
pub fn acc_at(errors: &[f64], threshold: f64) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = errors.iter().filter(|e| **e < threshold).count();
    Ok(hits as f64 / errors.len() as f64)
}

#[derive(Debug, Clone, Copy)]
struct Plane {
    normal: Vector3<f64>,
    offset: f64,
}

impl Plane {
    fn signed(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Outward face planes of a box.
fn box_planes(b: &Pose9D) -> [Plane; 6] {
    let h = b.extents() * 0.5;
    core::array::from_fn(|i| {
        let axis = i / 2;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let normal = b.rotation().column(axis) * sign;
        Plane {
            normal,
            offset: normal.dot(b.translation()) + h[axis],
        }
    })
}

fn solve3(planes: [&Plane; 3]) -> Option<Vector3<f64>> {
    let m = Matrix3::from_rows(&[
        planes[0].normal.transpose(),
        planes[1].normal.transpose(),
        planes[2].normal.transpose(),
    ]);
    let det = m.determinant();
    if det.abs() < 1e-12 {
        return None;
    }
    m.try_inverse()
        .map(|inv| inv * Vector3::new(planes[0].offset, planes[1].offset, planes[2].offset))
}

/// Volume of the intersection of two oriented boxes.
///
/// The intersection is the convex polytope bounded by all twelve face
/// planes. Its vertices are the feasible triple-plane intersections; each
/// face polygon is ordered by angle and contributes `offset · area / 3`.
pub fn intersection_volume(a: &Pose9D, b: &Pose9D) -> f64 {
    let scale = a
        .extents()
        .amax()
        .max(b.extents().amax())
        .max(a.translation().amax())
        .max(b.translation().amax())
        .max(1.0);
    let eps = 1e-9 * scale;
    // re-center for conditioning
    let origin = (a.translation() + b.translation()) * 0.5;
    let mut planes: Vec<Plane> = Vec::with_capacity(12);
    for p in box_planes(a).iter().chain(box_planes(b).iter()) {
        let shifted = Plane {
            normal: p.normal,
            offset: p.offset - p.normal.dot(&origin),
        };
        let duplicate = planes.iter().any(|q| {
            (q.normal - shifted.normal).amax() < 1e-12 && (q.offset - shifted.offset).abs() < eps
        });
        if !duplicate {
            planes.push(shifted);
        }
    }
    let n = planes.len();
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let Some(p) = solve3([&planes[i], &planes[j], &planes[k]]) else {
                    continue;
                };
                if planes.iter().all(|q| q.signed(&p) <= eps) {
                    vertices.push(p);
                }
            }
        }
    }
    if vertices.len() < 4 {
        return 0.0;
    }
    let mut volume = 0.0;
    for plane in &planes {
        let face: Vec<&Vector3<f64>> = vertices
            .iter()
            .filter(|p| plane.signed(p).abs() <= eps)
            .collect();
        if face.len() < 3 {
            continue;
        }
        volume += plane.offset * polygon_area(&face, &plane.normal) / 3.0;
    }
    volume.max(0.0)
}

/// Area of the convex polygon spanned by coplanar `points` with normal `n`.
fn polygon_area(points: &[&Vector3<f64>], n: &Vector3<f64>) -> f64 {
    let c = points.iter().fold(Vector3::zeros(), |acc, p| acc + *p) / points.len() as f64;
    let u = if n.x.abs() < 0.9 {
        n.cross(&Vector3::x())
    } else {
        n.cross(&Vector3::y())
    }
    .normalize();
    let v = n.cross(&u);
    let mut angles: Vec<(f64, Vector3<f64>)> = points
        .iter()
        .map(|p| {
            let d = *p - c;
            (libm::atan2(d.dot(&v), d.dot(&u)), d)
        })
        .collect();
    angles.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut twice = 0.0;
    for i in 0..angles.len() {
        let p = &angles[i].1;
        let q = &angles[(i + 1) % angles.len()].1;
        twice += n.dot(&p.cross(q));
    }
    0.5 * twice.abs()
}

/// Intersection over union of two oriented boxes.
pub fn iou3d(a: &Pose9D, b: &Pose9D) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub continuous_samples: usize,
    /// Categories with fewer ground-truth samples are left out.
    pub min_category_count: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: PI / 6.0,
            continuous_samples: DEFAULT_CONTINUOUS_SAMPLES,
            min_category_count: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScore {
    pub sym_error: f64,
    pub plain_error: f64,
    pub iou: f64,
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReport {
    pub samples: usize,
    pub missing: usize,
    pub acc_aware: f64,
    pub acc_unaware: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_category: BTreeMap<String, CategoryReport>,
    /// Unweighted means over retained categories.
    pub acc_aware: f64,
    pub acc_unaware: f64,
    pub mean_iou: f64,
    pub samples: usize,
    pub excluded_categories: Vec<String>,
}

pub fn score_sample(
    pred: Option<&Pose9D>,
    gt: &Pose9D,
    spec: &SymmetrySpec,
    continuous_samples: usize,
) -> SampleScore {
    match pred {
        None => SampleScore {
            sym_error: PI,
            plain_error: PI,
            iou: 0.0,
            missing: true,
        },
        Some(p) => SampleScore {
            sym_error: sym_error(p.rotation(), gt.rotation(), spec, continuous_samples),
            plain_error: geodesic_distance(p.rotation(), gt.rotation()),
            iou: iou3d(p, gt),
            missing: false,
        },
    }
}

/// Scores every ground-truth sample and aggregates per category, then
/// macro-averages over categories. Categories without a symmetry entry are
/// treated as asymmetric; samples without a category fall under `""`.
pub fn evaluate(
    pred: &BTreeMap<String, Pose9D>,
    gt: &BTreeMap<String, Pose9D>,
    symmetry: &BTreeMap<String, SymmetrySpec>,
    categories: &BTreeMap<String, String>,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if gt.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut grouped: BTreeMap<String, Vec<SampleScore>> = BTreeMap::new();
    for (id, truth) in gt {
        let category = categories.get(id).cloned().unwrap_or_default();
        let asymmetric;
        let spec = match symmetry.get(&category) {
            Some(s) => s,
            None => {
                asymmetric = SymmetrySpec::none(category.clone());
                &asymmetric
            }
        };
        let score = score_sample(pred.get(id), truth, spec, options.continuous_samples);
        grouped.entry(category).or_default().push(score);
    }
    let mut per_category = BTreeMap::new();
    let mut excluded_categories = Vec::new();
    for (category, scores) in grouped {
        if scores.len() < options.min_category_count {
            excluded_categories.push(category);
            continue;
        }
        let aware: Vec<f64> = scores.iter().map(|s| s.sym_error).collect();
        let unaware: Vec<f64> = scores.iter().map(|s| s.plain_error).collect();
        per_category.insert(
            category,
            CategoryReport {
                samples: scores.len(),
                missing: scores.iter().filter(|s| s.missing).count(),
                acc_aware: acc_at(&aware, options.threshold)?,
                acc_unaware: acc_at(&unaware, options.threshold)?,
                mean_iou: scores.iter().map(|s| s.iou).sum::<f64>() / scores.len() as f64,
            },
        );
    }
    if per_category.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let m = per_category.len() as f64;
    let mean = |f: fn(&CategoryReport) -> f64| per_category.values().map(f).sum::<f64>() / m;
    Ok(EvalReport {
        acc_aware: mean(|c| c.acc_aware),
        acc_unaware: mean(|c| c.acc_unaware),
        mean_iou: mean(|c| c.mean_iou),
        samples: per_category.values().map(|c| c.samples).sum(),
        per_category,
        excluded_categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::FRAC_PI_2;

    fn triple(left: &str, back: &str, top: &str) -> RuleTriple {
        RuleTriple {
            left: left.into(),
            back: back.into(),
            top: top.into(),
        }
    }

    fn cube(center: Vector3<f64>) -> Pose9D {
        Pose9D::new(Matrix3::identity(), center, Vector3::repeat(1.0)).unwrap()
    }

    #[test]
    fn inventory_counts() {
        assert_eq!(ORIENTATION_RULES.len(), 43);
        for (i, (a, _)) in ORIENTATION_RULES.iter().enumerate() {
            assert!(ORIENTATION_RULES[i + 1..].iter().all(|(b, _)| a != b));
        }
    }

    #[test]
    fn compiled_examples() {
        let vase = compile_symmetry("vase", &triple("-", "-", "stand upward")).unwrap();
        assert_eq!(vase.kind, SymmetryKind::Continuous);
        assert_eq!(vase.axis, Vector3::z());
        assert_eq!(vase.flip_axis, None);
        let board = compile_symmetry(
            "ironing board",
            &triple("-", "toward and away from user", "contain or support upward"),
        )
        .unwrap();
        assert_eq!(board.kind, SymmetryKind::Discrete(2));
        assert_eq!(board.axis, Vector3::z());
        let car = compile_symmetry("car", &triple("-", "move backward", "move upward")).unwrap();
        assert_eq!(car.kind, SymmetryKind::None);
        let ball = compile_symmetry("ball", &triple("-", "-", "-")).unwrap();
        assert_eq!(ball.kind, SymmetryKind::Full);
        let log = compile_symmetry("log", &triple("-", "-", "sprout upward and downward")).unwrap();
        assert_eq!(log.kind, SymmetryKind::Continuous);
        assert!(log.flip_axis.is_some());
        assert_eq!(
            compile_symmetry("x", &triple("-", "upside", "-")),
            Err(EvalError::UnknownRule("upside".into()))
        );
    }

    #[test]
    fn group_elements() {
        let none = SymmetrySpec::none("c");
        assert_eq!(symmetry_rotations(&none, 720), vec![Matrix3::identity()]);
        let d2 = SymmetrySpec::new("c", Vector3::z(), SymmetryKind::Discrete(2), None).unwrap();
        let g = symmetry_rotations(&d2, 720);
        assert_eq!(g.len(), 2);
        assert!((g[1] - rotation_about(&Vector3::z(), PI)).amax() < 1e-12);
        let cont = SymmetrySpec::new("c", Vector3::z(), SymmetryKind::Continuous, None).unwrap();
        let g = symmetry_rotations(&cont, 360);
        assert_eq!(g.len(), 360);
        for w in g.windows(2) {
            assert!((geodesic_distance(&w[0], &w[1]) - PI / 180.0).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_errors() {
        let cont = SymmetrySpec::new("c", Vector3::z(), SymmetryKind::Continuous, None).unwrap();
        let gt = rotation_about(&Vector3::new(1.0, 2.0, 0.5), 0.7);
        let pred = gt * rotation_about(&Vector3::z(), FRAC_PI_2);
        assert!(sym_error(&pred, &gt, &cont, 720) <= PI / 720.0 + 1e-12);
        let d2 = SymmetrySpec::new("c", Vector3::z(), SymmetryKind::Discrete(2), None).unwrap();
        let flipped = gt * rotation_about(&Vector3::z(), PI);
        assert!(sym_error(&flipped, &gt, &d2, 720) < 1e-7);
    }

    #[test]
    fn accuracy_threshold() {
        let t = PI / 6.0;
        assert_eq!(acc_at(&[0.0; 4], t), Ok(1.0));
        assert_eq!(acc_at(&[10f64.to_radians(), 40f64.to_radians()], t), Ok(0.5));
        assert_eq!(acc_at(&[t], t), Ok(0.0));
        assert_eq!(acc_at(&[], t), Err(EvalError::EmptyInput));
    }

    #[test]
    fn iou_analytic_cases() {
        let a = cube(Vector3::zeros());
        assert!((iou3d(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(iou3d(&a, &cube(Vector3::new(3.0, 0.0, 0.0))), 0.0);
        let half = iou3d(&a, &cube(Vector3::new(0.5, 0.0, 0.0)));
        assert!((half - 1.0 / 3.0).abs() < 1e-9);
        let r = Pose9D::new(
            rotation_about(&Vector3::z(), PI / 4.0),
            Vector3::zeros(),
            Vector3::repeat(1.0),
        )
        .unwrap();
        // square rotated 45° inside itself: octagon of area 2(√2 − 1)
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        assert!((intersection_volume(&a, &r) - inter).abs() < 1e-9);
    }
}
