//! Synthetic datasets with planted transforms.
//!
//! Writes, into one directory: an FPC surface, a camera trajectory and a
//! frame-embedding file per object, `manifest.jsonl`, `truth.json` (planted
//! transforms and true boxes, readable as evaluation ground truth) and
//! `annotations.jsonl` (verified manual boxes for every object).

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use canon9d_core::canonical::{fit_box, CameraFrame, CanonicalError, DEFAULT_ROBUST_QUANTILE};
use canon9d_core::geometry::{GeometryError, SimilarityTransform};
use canon9d_core::synthetic::{gaussian, make_instance, random_rotation, random_similarity, InstanceParams, SyntheticShape};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fpc::{write_fpc, FpcError};
use crate::manifest::{render_manifest, ObjectRecord, Status};
use crate::records::{cameras_to_json, pose_to_json, write_json, Pose15, PoseRecord, PoseSource, RecordError, TransformJson};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRUTH_FILE: &str = "truth.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Fpc(#[from] FpcError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub shapes: usize,
    pub instances_per_shape: usize,
    pub points: usize,
    pub feature_dim: usize,
    pub scale_range: (f64, f64),
    pub max_translation: f64,
    /// Vertex noise as a fraction of the object extent.
    pub noise: f64,
    /// Dropout drawn uniformly from `[0, max_dropout]` per instance.
    pub max_dropout: f64,
    pub feature_noise: f64,
    pub frames: usize,
    pub embedding_dim: usize,
    pub embedding_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shapes: 10,
            instances_per_shape: 20,
            points: 2048,
            feature_dim: 16,
            scale_range: (0.5, 2.0),
            max_translation: 2.0,
            noise: 0.01,
            max_dropout: 0.3,
            feature_noise: 0.02,
            frames: 8,
            embedding_dim: 64,
            embedding_noise: 0.05,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub shape: usize,
    pub category: String,
    /// Shape frame to object frame.
    pub transform: TransformJson,
    /// True box in the object frame.
    pub pose: Pose15,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dir: PathBuf,
    pub records: Vec<ObjectRecord>,
    pub truth: BTreeMap<String, TruthEntry>,
}

impl SynthDataset {
    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.dir.join(ANNOTATIONS_FILE)
    }

    pub fn truth_path(&self) -> PathBuf {
        self.dir.join(TRUTH_FILE)
    }

    /// A verified manual box for `id` from the planted truth.
    pub fn annotation(&self, id: &str) -> Option<PoseRecord> {
        self.truth.get(id).map(|t| PoseRecord {
            object_id: id.to_string(),
            pose: t.pose,
            source: PoseSource::Manual,
            annotator_id: "synth".into(),
            cross_verified: true,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn random_trajectory<R: Rng>(rng: &mut R, frames: usize) -> Result<Vec<CameraFrame>, SynthError> {
    (0..frames)
        .map(|i| {
            let t = Vector3::new(gaussian(rng), gaussian(rng), 3.0 + gaussian(rng));
            let cam = SimilarityTransform::rigid(random_rotation(rng), t)?;
            Ok(CameraFrame::new(10 * i as u64, cam)?)
        })
        .collect()
}

pub fn generate(dir: &Path, cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut truth = BTreeMap::new();
    let mut annotations = String::new();
    for s in 0..cfg.shapes {
        let shape = SyntheticShape::random(&mut rng, cfg.feature_dim);
        let extent = shape.extent(&mut rng);
        let dense = shape.sample_points(&mut rng, 20_000);
        let shape_box = fit_box(&dense, DEFAULT_ROBUST_QUANTILE)?;
        let base = unit((0..cfg.embedding_dim).map(|_| gaussian(&mut rng)).collect());
        for i in 0..cfg.instances_per_shape {
            let id = format!("s{s:02}_i{i:03}");
            let transform = random_similarity(&mut rng, cfg.scale_range, cfg.max_translation);
            let params = InstanceParams {
                transform,
                noise: cfg.noise,
                dropout: rng.random_range(0.0..=cfg.max_dropout),
                feature_noise: cfg.feature_noise,
                ..InstanceParams::default()
            };
            let surface = make_instance(&shape, &mut rng, cfg.points, extent, &params);
            let surface_file = format!("{id}.fpc");
            write_fpc(&surface, &dir.join(&surface_file))?;

            let camera_file = format!("{id}.cameras.json");
            let frames = random_trajectory(&mut rng, cfg.frames)?;
            write_json(&dir.join(&camera_file), &cameras_to_json(&frames))?;

            let embedding_file = format!("{id}.emb.json");
            let frame_vectors: Vec<Vec<f64>> = (0..cfg.frames.max(1))
                .map(|_| unit(base.iter().map(|b| b + cfg.embedding_noise * gaussian(&mut rng)).collect()))
                .collect();
            write_json(&dir.join(&embedding_file), &frame_vectors)?;

            let entry = TruthEntry {
                shape: s,
                category: format!("shape{s:02}"),
                transform: (&transform).into(),
                pose: pose_to_json(&shape_box.transformed(&transform)),
            };
            let record = PoseRecord {
                object_id: id.clone(),
                pose: entry.pose,
                source: PoseSource::Manual,
                annotator_id: "synth".into(),
                cross_verified: true,
            };
            annotations.push_str(&serde_json::to_string(&record).expect("serializable"));
            annotations.push('\n');
            truth.insert(id.clone(), entry);
            records.push(ObjectRecord {
                id,
                surface: surface_file.into(),
                camera: Some(camera_file.into()),
                category_hint: Some(format!("shape{s:02}")),
                embedding: Some(embedding_file.into()),
                status: Status::Pending,
            });
        }
    }
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, render_manifest(&records)).map_err(io_err(&manifest))?;
    let ann = dir.join(ANNOTATIONS_FILE);
    fs::write(&ann, annotations).map_err(io_err(&ann))?;
    write_json(&dir.join(TRUTH_FILE), &truth)?;
    let records = records
        .into_iter()
        .map(|mut r| {
            r.surface = dir.join(&r.surface);
            r.camera = r.camera.map(|p| dir.join(p));
            r.embedding = r.embedding.map(|p| dir.join(p));
            r
        })
        .collect();
    Ok(SynthDataset {
        dir: dir.to_path_buf(),
        records,
        truth,
    })
}
