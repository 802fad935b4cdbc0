//! JSON encodings of transforms, poses, cameras and orientation rules.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use canon9d_core::canonical::{CameraFrame, CanonicalError};
use canon9d_core::eval::{compile_table, EvalError, RuleTriple, SymmetrySpec};
use canon9d_core::geometry::{GeometryError, Pose9D, SimilarityTransform};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Camera(#[from] CanonicalError),
    #[error(transparent)]
    Rules(#[from] EvalError),
    #[error("camera frame ids must strictly increase, got {next} after {prev}")]
    FrameOrder { prev: u64, next: u64 },
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RecordError> {
    let text = fs::read_to_string(path).map_err(|source| RecordError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| RecordError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RecordError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable records");
    text.push('\n');
    fs::write(path, text).map_err(|source| RecordError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A similarity as row-major `[R | t]` plus scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformJson {
    pub rt: [f64; 12],
    pub scale: f64,
}

impl From<&SimilarityTransform> for TransformJson {
    fn from(t: &SimilarityTransform) -> Self {
        Self {
            rt: t.to_rt12(),
            scale: t.scale(),
        }
    }
}

impl TryFrom<&TransformJson> for SimilarityTransform {
    type Error = GeometryError;

    fn try_from(t: &TransformJson) -> Result<Self, GeometryError> {
        SimilarityTransform::from_rt12(&t.rt, t.scale)
    }
}

/// Output of `align`: the instance-to-reference transform and its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentJson {
    #[serde(flatten)]
    pub transform: TransformJson,
    pub score: f64,
}

/// Rotation (9, row-major), center (3), extents (3).
pub type Pose15 = [f64; 15];

pub fn pose_to_json(p: &Pose9D) -> Pose15 {
    p.to_array15()
}

pub fn pose_from_json(a: &Pose15) -> Result<Pose9D, GeometryError> {
    Pose9D::from_array15(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    Manual,
    Propagated,
}

/// A box pose of an object in its own reconstruction frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub object_id: String,
    pub pose: Pose15,
    pub source: PoseSource,
    #[serde(default)]
    pub annotator_id: String,
    #[serde(default)]
    pub cross_verified: bool,
}

impl PoseRecord {
    pub fn pose9d(&self) -> Result<Pose9D, GeometryError> {
        pose_from_json(&self.pose)
    }

    /// Usable as a cluster reference.
    pub fn is_verified_reference(&self) -> bool {
        self.source == PoseSource::Manual && self.cross_verified
    }
}

/// Reads JSON Lines of pose records; blank lines are skipped.
pub fn read_pose_records(path: &Path) -> Result<Vec<PoseRecord>, RecordError> {
    let text = fs::read_to_string(path).map_err(|source| RecordError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| RecordError::Json {
                path: path.display().to_string(),
                source,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CameraJson {
    Bare([f64; 12]),
    Framed {
        frame_id: u64,
        world_to_camera: [f64; 12],
    },
}

/// Parses a trajectory; bare entries take their array index as frame id.
pub fn cameras_from_json(entries: &[CameraJson]) -> Result<Vec<CameraFrame>, RecordError> {
    let mut out: Vec<CameraFrame> = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let (id, rt) = match e {
            CameraJson::Bare(rt) => (i as u64, rt),
            CameraJson::Framed {
                frame_id,
                world_to_camera,
            } => (*frame_id, world_to_camera),
        };
        if let Some(prev) = out.last() {
            if id <= prev.frame_id {
                return Err(RecordError::FrameOrder {
                    prev: prev.frame_id,
                    next: id,
                });
            }
        }
        out.push(CameraFrame::new(id, SimilarityTransform::from_rt12(rt, 1.0)?)?);
    }
    Ok(out)
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraFrame>, RecordError> {
    let entries: Vec<CameraJson> = read_json(path)?;
    cameras_from_json(&entries)
}

pub fn cameras_to_json(frames: &[CameraFrame]) -> Vec<CameraJson> {
    frames
        .iter()
        .map(|f| CameraJson::Framed {
            frame_id: f.frame_id,
            world_to_camera: f.world_to_camera().to_rt12(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    pub frame_id: u64,
    pub pose: Pose15,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePoses {
    pub object_id: String,
    pub world_pose: Pose15,
    pub frames: Vec<FramePose>,
}

/// Ground-truth or predicted box for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalEntry {
    Bare(Pose15),
    Tagged {
        pose: Pose15,
        #[serde(default)]
        category: Option<String>,
    },
}

impl EvalEntry {
    pub fn pose(&self) -> &Pose15 {
        match self {
            EvalEntry::Bare(p) | EvalEntry::Tagged { pose: p, .. } => p,
        }
    }

    pub fn category(&self) -> Option<&str> {
        match self {
            EvalEntry::Bare(_) => None,
            EvalEntry::Tagged { category, .. } => category.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleGroup {
    pub left: String,
    pub back: String,
    pub top: String,
    pub categories: Vec<String>,
}

impl RuleGroup {
    pub fn triple(&self) -> RuleTriple {
        RuleTriple {
            left: self.left.clone(),
            back: self.back.clone(),
            top: self.top.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulesFile {
    pub groups: Vec<RuleGroup>,
}

/// The orientation-rule groups shipped with the crate.
pub const BUILTIN_RULES: &str = include_str!("../data/orientation_rules.json");

pub fn builtin_rules() -> RulesFile {
    serde_json::from_str(BUILTIN_RULES).expect("shipped rules file parses")
}

pub fn compile_rules(rules: &RulesFile) -> Result<BTreeMap<String, SymmetrySpec>, RecordError> {
    let triples: Vec<RuleTriple> = rules.groups.iter().map(RuleGroup::triple).collect();
    Ok(compile_table(
        triples
            .iter()
            .zip(&rules.groups)
            .map(|(t, g)| (t, g.categories.as_slice())),
    )?)
}
