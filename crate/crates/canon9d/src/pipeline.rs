//! Resumable cluster → annotate → align → verify loop.
//!
//! All progress lives in a state directory: `state.json` (rewritten
//! atomically after every mutation), `ledger.tsv` (append-only verdicts) and
//! `poses/` (per-frame boxes of accepted objects). Human steps are
//! asynchronous boundaries: [`Pipeline::advance`] moves every cluster as far
//! as the recorded annotations and verdicts allow and reports what it is
//! waiting for.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use canon9d_core::align::{align, AlignConfig, AlignError};
use canon9d_core::canonical::{make_canonical_pose, propagate, CanonicalError, CanonicalPose, DEFAULT_ROBUST_QUANTILE};
use canon9d_core::cluster::{aggregate_embedding, default_k, kmeans_cosine, medoid, ClusterError, ObjectEmbedding, DEFAULT_MAX_ITERS};
use canon9d_core::geometry::{GeometryError, SimilarityTransform};
use canon9d_core::surface::FeaturedSurface;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fpc::{read_fpc, FpcError};
use crate::ledger::{append_verdict, read_ledger, verdicts_for_iteration, LedgerEntry, LedgerError, Verdict, VerdictCounts};
use crate::manifest::{ObjectRecord, Status};
use crate::records::{
    pose_to_json, read_cameras, read_json, write_json, AlignmentJson, FramePose, FramePoses, Pose15, PoseRecord,
    RecordError, TransformJson,
};

pub const STATE_FILE: &str = "state.json";
pub const LEDGER_FILE: &str = "ledger.tsv";
pub const POSES_DIR: &str = "poses";
pub const AUTO_REVIEWER: &str = "auto";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Fpc(#[from] FpcError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("no pending or skipped objects left to process")]
    NoPending,
    #[error("iteration cap of {0} reached")]
    IterationCap(u32),
    #[error("state already exists in {0}; resume instead")]
    StateExists(String),
    #[error("no pipeline state in {0}")]
    NoState(String),
    #[error("unknown object {0:?}")]
    UnknownObject(String),
    #[error("object {0:?} is filtered")]
    Filtered(String),
    #[error("object {0:?} is not awaiting verification")]
    NotAwaitingVerification(String),
    #[error("object {0:?} has no pose to show yet")]
    NoPose(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializable mirror of [`AlignConfig`]; omitted fields keep defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignSettings {
    pub alpha: f64,
    pub ransac_iters: usize,
    pub inlier_threshold: f64,
    pub refine_max_iters: usize,
    pub refine_tol: f64,
    pub cycle_tau: f64,
    pub max_vertices: usize,
}

impl Default for AlignSettings {
    fn default() -> Self {
        AlignConfig::default().into()
    }
}

impl From<AlignConfig> for AlignSettings {
    fn from(c: AlignConfig) -> Self {
        Self {
            alpha: c.alpha,
            ransac_iters: c.ransac_iters,
            inlier_threshold: c.inlier_threshold,
            refine_max_iters: c.refine_max_iters,
            refine_tol: c.refine_tol,
            cycle_tau: c.cycle_tau,
            max_vertices: c.max_vertices,
        }
    }
}

impl From<AlignSettings> for AlignConfig {
    fn from(s: AlignSettings) -> Self {
        AlignConfig {
            alpha: s.alpha,
            ransac_iters: s.ransac_iters,
            inlier_threshold: s.inlier_threshold,
            refine_max_iters: s.refine_max_iters,
            refine_tol: s.refine_tol,
            cycle_tau: s.cycle_tau,
            max_vertices: s.max_vertices,
            ..AlignConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Clusters per iteration; `None` uses one per hundred objects.
    pub k: Option<usize>,
    pub seed: u64,
    pub max_iterations: u32,
    pub kmeans_max_iters: usize,
    pub robust_quantile: f64,
    /// Accept members whose alignment score is below this, skip the rest.
    pub auto_verify: Option<f64>,
    pub align: AlignSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: None,
            seed: 0,
            max_iterations: 3,
            kmeans_max_iters: DEFAULT_MAX_ITERS,
            robust_quantile: DEFAULT_ROBUST_QUANTILE,
            auto_verify: None,
            align: AlignSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingAnnotation,
    AwaitingVerification,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub index: usize,
    pub medoid: String,
    pub members: Vec<String>,
    pub phase: Phase,
    /// Member → reference transform; absent when alignment failed.
    #[serde(default)]
    pub alignments: BTreeMap<String, Option<AlignmentJson>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub record: ObjectRecord,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalRecord {
    pub iteration: u32,
    pub reference: String,
    pub world_to_canonical: TransformJson,
    pub extents: [f64; 3],
    /// The canonical box in the object's world frame.
    pub world_pose: Pose15,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: u32,
    pub clusters: usize,
    pub counts: VerdictCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    /// The iteration in progress, or the next one when no clusters are open.
    pub iteration: u32,
    pub seed: u64,
    pub objects: BTreeMap<String, ObjectEntry>,
    pub clusters: Vec<ClusterState>,
    pub references: BTreeMap<String, PoseRecord>,
    pub canonical: BTreeMap<String, CanonicalRecord>,
    pub history: Vec<IterationStats>,
}

impl PipelineState {
    pub fn new(records: Vec<ObjectRecord>, seed: u64) -> Self {
        let objects = records
            .into_iter()
            .map(|r| {
                let status = r.status;
                (r.id.clone(), ObjectEntry { record: r, status })
            })
            .collect();
        Self {
            iteration: 1,
            seed,
            objects,
            clusters: Vec::new(),
            references: BTreeMap::new(),
            canonical: BTreeMap::new(),
            history: Vec::new(),
        }
    }

    pub fn ids_with(&self, status: Status) -> BTreeSet<String> {
        self.objects
            .iter()
            .filter(|(_, e)| e.status == status)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn status(&self, id: &str) -> Option<Status> {
        self.objects.get(id).map(|e| e.status)
    }

    pub fn cluster_of(&self, id: &str) -> Option<&ClusterState> {
        self.clusters.iter().find(|c| c.members.iter().any(|m| m == id))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable state");
        s.push('\n');
        s
    }
}

/// What the pipeline is waiting for after an advance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Progress {
    /// The iteration finished; the next one can start.
    Completed { iteration: u32 },
    /// Clusters wait on a verified reference pose (medoid ids listed) or on
    /// verdicts (member ids listed).
    Blocked {
        iteration: u32,
        awaiting_annotation: Vec<String>,
        awaiting_verification: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub counts: VerdictCounts,
    /// Accept, skip, filter in percent of this row's processed objects.
    pub percent: [f64; 3],
}

impl From<VerdictCounts> for StatsRow {
    fn from(counts: VerdictCounts) -> Self {
        Self {
            counts,
            percent: counts.percentages(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_iteration: BTreeMap<u32, StatsRow>,
    pub total: StatsRow,
    pub pending: usize,
    pub objects: usize,
}

/// Per-iteration verdict shares from history and totals from final statuses.
pub fn summarize(state: &PipelineState) -> Summary {
    let mut total = VerdictCounts::default();
    for e in state.objects.values() {
        match e.status {
            Status::Accepted => total.add(Verdict::Accept),
            Status::Skipped => total.add(Verdict::Skip),
            Status::Filtered => total.add(Verdict::Filter),
            Status::Pending => {}
        }
    }
    Summary {
        per_iteration: state
            .history
            .iter()
            .map(|h| (h.iteration, h.counts.into()))
            .collect(),
        total: total.into(),
        pending: state.ids_with(Status::Pending).len(),
        objects: state.objects.len(),
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn align_seed(seed: u64, iteration: u32, id: &str) -> u64 {
    mix(seed ^ mix(iteration as u64) ^ fnv1a(id))
}

pub fn now_timestamp() -> String {
    let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}.{:03}", d.as_secs(), d.subsec_millis())
}

/// Embedding from the object's frame features, or from all of its surface
/// features when no embedding file is given.
pub fn object_embedding(record: &ObjectRecord, surface: &FeaturedSurface) -> Result<ObjectEmbedding, PipelineError> {
    let vector = match &record.embedding {
        Some(path) => {
            let frames: Vec<Vec<f64>> = read_json(path)?;
            aggregate_embedding(&frames)?
        }
        None => {
            let frames: Vec<Vec<f64>> = surface
                .feature_block()
                .chunks_exact(surface.feature_dim())
                .map(|f| f.iter().map(|v| *v as f64).collect())
                .collect();
            aggregate_embedding(&frames)?
        }
    };
    Ok(ObjectEmbedding::new(record.id.clone(), vector)?)
}

pub struct Pipeline {
    dir: PathBuf,
    config: PipelineConfig,
    state: PipelineState,
    surfaces: HashMap<String, Arc<FeaturedSurface>>,
}

impl Pipeline {
    /// Starts a fresh state directory for `records`.
    pub fn create(dir: &Path, records: Vec<ObjectRecord>, config: PipelineConfig) -> Result<Self, PipelineError> {
        let state_path = dir.join(STATE_FILE);
        if state_path.exists() {
            return Err(PipelineError::StateExists(dir.display().to_string()));
        }
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let state = PipelineState::new(records, config.seed);
        let p = Self {
            dir: dir.to_path_buf(),
            config,
            state,
            surfaces: HashMap::new(),
        };
        p.persist()?;
        Ok(p)
    }

    pub fn open(dir: &Path, config: PipelineConfig) -> Result<Self, PipelineError> {
        let state_path = dir.join(STATE_FILE);
        if !state_path.exists() {
            return Err(PipelineError::NoState(dir.display().to_string()));
        }
        let state: PipelineState = read_json(&state_path)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            state,
            surfaces: HashMap::new(),
        })
    }

    pub fn state(&self) -> &PipelineState {
        &self.state
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.dir.join(LEDGER_FILE)
    }

    pub fn summarize(&self) -> Summary {
        summarize(&self.state)
    }

    fn persist(&self) -> Result<(), PipelineError> {
        let path = self.dir.join(STATE_FILE);
        let tmp = self.dir.join(format!("{STATE_FILE}.tmp"));
        fs::write(&tmp, self.state.to_json()).map_err(io_err(&tmp))?;
        fs::File::open(&tmp).and_then(|f| f.sync_all()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(())
    }

    pub fn surface(&mut self, id: &str) -> Result<Arc<FeaturedSurface>, PipelineError> {
        if let Some(s) = self.surfaces.get(id) {
            return Ok(s.clone());
        }
        let entry = self
            .state
            .objects
            .get(id)
            .ok_or_else(|| PipelineError::UnknownObject(id.to_string()))?;
        let s = Arc::new(read_fpc(&entry.record.surface)?);
        self.surfaces.insert(id.to_string(), s.clone());
        Ok(s)
    }

    fn entry(&self, id: &str) -> Result<&ObjectEntry, PipelineError> {
        self.state
            .objects
            .get(id)
            .ok_or_else(|| PipelineError::UnknownObject(id.to_string()))
    }

    /// Records a reference pose for an object.
    pub fn submit_pose(&mut self, record: PoseRecord) -> Result<(), PipelineError> {
        let entry = self.entry(&record.object_id)?;
        if entry.status == Status::Filtered {
            return Err(PipelineError::Filtered(record.object_id));
        }
        record
            .pose9d()
            .map_err(|e| PipelineError::InvalidPose(e.to_string()))?;
        self.state.references.insert(record.object_id.clone(), record);
        self.persist()
    }

    /// Appends a verdict for a member of a cluster under verification.
    pub fn submit_verdict(
        &mut self,
        id: &str,
        verdict: Verdict,
        reviewer: &str,
        timestamp: &str,
    ) -> Result<(), PipelineError> {
        self.entry(id)?;
        let awaiting = self
            .state
            .cluster_of(id)
            .is_some_and(|c| c.phase == Phase::AwaitingVerification);
        if !awaiting {
            if self.state.status(id) == Some(Status::Filtered) {
                return Err(PipelineError::Filtered(id.to_string()));
            }
            return Err(PipelineError::NotAwaitingVerification(id.to_string()));
        }
        let entry = LedgerEntry {
            timestamp: timestamp.to_string(),
            iteration: self.state.iteration,
            object_id: id.to_string(),
            verdict,
            reviewer: reviewer.to_string(),
        };
        let known: BTreeSet<String> = self.state.objects.keys().cloned().collect();
        append_verdict(&self.ledger_path(), &known, &entry).map_err(|e| match e {
            LedgerError::IllegalTransition { object_id, .. } => PipelineError::Filtered(object_id),
            other => other.into(),
        })
    }

    /// Opens the next iteration if none is in progress, then advances it.
    pub fn run_iteration(&mut self) -> Result<Progress, PipelineError> {
        if self.state.clusters.is_empty() {
            self.start_iteration()?;
        }
        self.advance()
    }

    fn start_iteration(&mut self) -> Result<(), PipelineError> {
        if self.state.iteration > self.config.max_iterations {
            return Err(PipelineError::IterationCap(self.config.max_iterations));
        }
        let queue: Vec<String> = self
            .state
            .objects
            .iter()
            .filter(|(_, e)| matches!(e.status, Status::Pending | Status::Skipped))
            .map(|(id, _)| id.clone())
            .collect();
        if queue.is_empty() {
            return Err(PipelineError::NoPending);
        }
        let records: Vec<ObjectRecord> = queue.iter().map(|id| self.state.objects[id].record.clone()).collect();
        for id in &queue {
            self.surface(id)?;
        }
        let embeddings: Vec<ObjectEmbedding> = records
            .par_iter()
            .map(|r| object_embedding(r, &self.surfaces[&r.id]))
            .collect::<Result<_, _>>()?;
        let n = embeddings.len();
        let k = self.config.k.unwrap_or_else(|| default_k(n)).clamp(1, n);
        let seed = mix(self.state.seed ^ mix(self.state.iteration as u64));
        let clustering = kmeans_cosine(&embeddings, k, seed, self.config.kmeans_max_iters)?;
        let by_id: BTreeMap<&str, &ObjectEmbedding> = embeddings.iter().map(|e| (e.id(), e)).collect();
        let mut clusters = Vec::with_capacity(k);
        for c in 0..k {
            let members = clustering.members(c);
            let member_embs: Vec<ObjectEmbedding> = members.iter().map(|m| by_id[m.as_str()].clone()).collect();
            clusters.push(ClusterState {
                index: c,
                medoid: medoid(&member_embs)?,
                members,
                phase: Phase::AwaitingAnnotation,
                alignments: BTreeMap::new(),
            });
        }
        for id in &queue {
            self.state.objects.get_mut(id).expect("queued id").status = Status::Pending;
        }
        log::info!("iteration {}: {} objects in {} clusters", self.state.iteration, n, k);
        self.state.clusters = clusters;
        self.persist()
    }

    /// Moves every open cluster forward as far as recorded inputs allow.
    pub fn advance(&mut self) -> Result<Progress, PipelineError> {
        if self.state.clusters.is_empty() {
            return Err(PipelineError::NoPending);
        }
        self.align_ready_clusters()?;
        if let Some(threshold) = self.config.auto_verify {
            self.auto_verify(threshold)?;
        }
        self.apply_verdicts()?;
        let iteration = self.state.iteration;
        if self.state.clusters.iter().all(|c| c.phase == Phase::Done) {
            let mut counts = VerdictCounts::default();
            let verdicts = verdicts_for_iteration(&read_ledger(&self.ledger_path())?, iteration);
            let mut applied = 0;
            for c in &self.state.clusters {
                for m in &c.members {
                    applied += 1;
                    match self.state.objects[m].status {
                        Status::Accepted => counts.add(Verdict::Accept),
                        Status::Filtered => counts.add(Verdict::Filter),
                        _ => counts.add(Verdict::Skip),
                    }
                }
            }
            debug_assert!(applied <= verdicts.len());
            self.state.history.push(IterationStats {
                iteration,
                clusters: self.state.clusters.len(),
                counts,
            });
            self.state.clusters.clear();
            self.state.iteration += 1;
            self.persist()?;
            log::info!("iteration {iteration} complete: {counts:?}");
            return Ok(Progress::Completed { iteration });
        }
        let mut awaiting_annotation = Vec::new();
        let mut awaiting_verification = Vec::new();
        for c in &self.state.clusters {
            match c.phase {
                Phase::AwaitingAnnotation => awaiting_annotation.push(c.medoid.clone()),
                Phase::AwaitingVerification => awaiting_verification.extend(c.members.iter().cloned()),
                Phase::Done => {}
            }
        }
        if !awaiting_annotation.is_empty() {
            log::warn!("no verified reference for medoids {awaiting_annotation:?}");
        }
        Ok(Progress::Blocked {
            iteration,
            awaiting_annotation,
            awaiting_verification,
        })
    }

    /// Runs iterations until blocked, out of objects or at the cap.
    pub fn run_until_blocked(&mut self) -> Result<Progress, PipelineError> {
        loop {
            match self.run_iteration() {
                Ok(Progress::Completed { iteration }) => {
                    let queued = !self.state.ids_with(Status::Skipped).is_empty()
                        || !self.state.ids_with(Status::Pending).is_empty();
                    if !queued || self.state.iteration > self.config.max_iterations {
                        return Ok(Progress::Completed { iteration });
                    }
                }
                other => return other,
            }
        }
    }

    /// Like [`Self::run_until_blocked`], supplying reference poses from
    /// `annotations` whenever a medoid needs one.
    pub fn run_with_annotations(
        &mut self,
        annotations: &BTreeMap<String, PoseRecord>,
    ) -> Result<Progress, PipelineError> {
        loop {
            let progress = self.run_until_blocked()?;
            let Progress::Blocked {
                awaiting_annotation, ..
            } = &progress
            else {
                return Ok(progress);
            };
            let supplied: Vec<PoseRecord> = awaiting_annotation
                .iter()
                .filter_map(|id| annotations.get(id))
                .filter(|r| r.is_verified_reference())
                .cloned()
                .collect();
            if supplied.is_empty() {
                return Ok(progress);
            }
            for r in supplied {
                self.submit_pose(r)?;
            }
        }
    }

    fn verified_reference(&self, id: &str) -> Option<&PoseRecord> {
        self.state.references.get(id).filter(|r| r.is_verified_reference())
    }

    fn align_ready_clusters(&mut self) -> Result<(), PipelineError> {
        let ready: Vec<usize> = self
            .state
            .clusters
            .iter()
            .enumerate()
            .filter(|(_, c)| c.phase == Phase::AwaitingAnnotation && self.verified_reference(&c.medoid).is_some())
            .map(|(i, _)| i)
            .collect();
        if ready.is_empty() {
            return Ok(());
        }
        let mut jobs = Vec::new();
        for &ci in &ready {
            let c = &self.state.clusters[ci];
            let (medoid, members) = (c.medoid.clone(), c.members.clone());
            let reference = self.surface(&medoid)?;
            for m in members {
                let instance = self.surface(&m)?;
                jobs.push((ci, m, instance, reference.clone(), medoid.clone()));
            }
        }
        let cfg: AlignConfig = self.config.align.into();
        let (seed, iteration) = (self.state.seed, self.state.iteration);
        let results: Vec<(usize, String, Option<AlignmentJson>)> = jobs
            .into_par_iter()
            .map(|(ci, m, instance, reference, medoid)| {
                if m == medoid {
                    let t = SimilarityTransform::identity();
                    return (ci, m, Some(AlignmentJson { transform: (&t).into(), score: 0.0 }));
                }
                let out = match align(&instance, &reference, &cfg, align_seed(seed, iteration, &m)) {
                    Ok(a) => Some(AlignmentJson {
                        transform: (&a.transform).into(),
                        score: a.score,
                    }),
                    Err(e) => {
                        log::warn!("alignment of {m} to {medoid} failed: {e}");
                        None
                    }
                };
                (ci, m, out)
            })
            .collect();
        for (ci, m, a) in results {
            self.state.clusters[ci].alignments.insert(m, a);
        }
        for ci in ready {
            self.state.clusters[ci].phase = Phase::AwaitingVerification;
        }
        self.persist()
    }

    fn auto_verify(&mut self, threshold: f64) -> Result<(), PipelineError> {
        let existing = verdicts_for_iteration(&read_ledger(&self.ledger_path())?, self.state.iteration);
        let mut pending = Vec::new();
        for c in &self.state.clusters {
            if c.phase != Phase::AwaitingVerification {
                continue;
            }
            for m in &c.members {
                if existing.contains_key(m) {
                    continue;
                }
                let ok = c.alignments.get(m).and_then(|a| a.as_ref()).is_some_and(|a| a.score < threshold);
                pending.push((m.clone(), if ok { Verdict::Accept } else { Verdict::Skip }));
            }
        }
        for (m, v) in pending {
            self.submit_verdict(&m, v, AUTO_REVIEWER, &now_timestamp())?;
        }
        Ok(())
    }

    /// Canonical pose proposed for a member of a cluster under verification.
    pub fn proposal(&mut self, id: &str) -> Result<CanonicalPose, PipelineError> {
        let c = self
            .state
            .cluster_of(id)
            .filter(|c| c.phase == Phase::AwaitingVerification)
            .ok_or_else(|| PipelineError::NoPose(id.to_string()))?;
        let alignment = c
            .alignments
            .get(id)
            .and_then(|a| a.clone())
            .ok_or_else(|| PipelineError::NoPose(id.to_string()))?;
        let reference = self
            .verified_reference(&c.medoid)
            .ok_or_else(|| PipelineError::NoPose(id.to_string()))?
            .pose9d()?;
        let t = SimilarityTransform::try_from(&alignment.transform)?;
        let surface = self.surface(id)?;
        Ok(make_canonical_pose(&surface, &t, &reference, self.config.robust_quantile)?)
    }

    fn apply_verdicts(&mut self) -> Result<(), PipelineError> {
        let verdicts = verdicts_for_iteration(&read_ledger(&self.ledger_path())?, self.state.iteration);
        let mut changed = false;
        for ci in 0..self.state.clusters.len() {
            let c = &self.state.clusters[ci];
            if c.phase != Phase::AwaitingVerification || !c.members.iter().all(|m| verdicts.contains_key(m)) {
                continue;
            }
            let members = c.members.clone();
            let reference_filtered = verdicts[&c.medoid] == Verdict::Filter;
            for m in &members {
                let mut v = verdicts[m];
                if reference_filtered && v == Verdict::Accept {
                    v = Verdict::Skip;
                }
                let status = match v {
                    Verdict::Accept => match self.accept(ci, m) {
                        Ok(()) => Status::Accepted,
                        Err(e) => {
                            log::warn!("accepted object {m} cannot be canonicalized ({e}); skipping");
                            Status::Skipped
                        }
                    },
                    Verdict::Skip => Status::Skipped,
                    Verdict::Filter => Status::Filtered,
                };
                self.state.objects.get_mut(m).expect("member").status = status;
            }
            self.state.clusters[ci].phase = Phase::Done;
            changed = true;
        }
        if changed {
            self.persist()?;
        }
        Ok(())
    }

    fn accept(&mut self, ci: usize, id: &str) -> Result<(), PipelineError> {
        let canonical = self.proposal(id)?;
        let c = &self.state.clusters[ci];
        let score = c.alignments[id].as_ref().map_or(f64::INFINITY, |a| a.score);
        let world = canonical.world_pose();
        let record = CanonicalRecord {
            iteration: self.state.iteration,
            reference: c.medoid.clone(),
            world_to_canonical: (&canonical.world_to_canonical).into(),
            extents: (*canonical.canonical_box.extents()).into(),
            world_pose: pose_to_json(&world),
            score,
        };
        if let Some(camera) = self.state.objects[id].record.camera.clone() {
            let frames = read_cameras(&camera)?;
            let poses = FramePoses {
                object_id: id.to_string(),
                world_pose: pose_to_json(&world),
                frames: propagate(&canonical, &frames)
                    .iter()
                    .zip(&frames)
                    .map(|(p, f)| FramePose {
                        frame_id: f.frame_id,
                        pose: pose_to_json(p),
                    })
                    .collect(),
            };
            let dir = self.dir.join(POSES_DIR);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            write_json(&dir.join(format!("{id}.json")), &poses)?;
        }
        self.state.canonical.insert(id.to_string(), record);
        Ok(())
    }
}

/// World boxes of accepted objects, keyed by id.
pub fn predictions(state: &PipelineState) -> BTreeMap<String, Pose15> {
    state
        .canonical
        .iter()
        .map(|(id, c)| (id.clone(), c.world_pose))
        .collect()
}
