use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use canon9d::evaluation::{evaluate_files, ReportJson};
use canon9d::fpc::read_fpc;
use canon9d::manifest::load_manifest;
use canon9d::pipeline::{object_embedding, predictions, summarize, Pipeline, PipelineConfig, Progress};
use canon9d::records::{
    builtin_rules, pose_from_json, pose_to_json, read_cameras, read_json, read_pose_records, write_json,
    AlignmentJson, FramePose, FramePoses, Pose15, PoseRecord, RulesFile, TransformJson,
};
use canon9d::service;
use canon9d::synth::{generate, SynthConfig};
use canon9d_core::align::{align, AlignConfig};
use canon9d_core::canonical::{make_canonical_pose, propagate, DEFAULT_ROBUST_QUANTILE};
use canon9d_core::cluster::{default_k, kmeans_cosine, medoid, ObjectEmbedding, DEFAULT_MAX_ITERS};
use canon9d_core::eval::EvalOptions;
use canon9d_core::geometry::SimilarityTransform;
use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

/// Auto-verify score threshold when `--auto-verify` is given without one.
const DEFAULT_AUTO_THRESHOLD: f64 = 0.2;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Parser)]
#[command(name = "canon9d", version, about = "Canonical 9-DoF boxes for featured object reconstructions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest and every surface it references.
    Validate { manifest: PathBuf },
    /// Cluster a manifest's objects by embedding.
    Cluster {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align an instance surface to a reference surface.
    Align {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Canonicalize an aligned instance and propagate its box to camera frames.
    Pose {
        #[arg(long)]
        surface: PathBuf,
        /// Alignment or transform JSON (instance to reference).
        #[arg(long)]
        transform: PathBuf,
        /// Reference box: a pose record or a bare 15-number array.
        #[arg(long)]
        reference_pose: PathBuf,
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_ROBUST_QUANTILE)]
        robust_quantile: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted boxes against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Orientation rules file; the shipped table when omitted.
        #[arg(long)]
        symmetry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
    },
    /// Run or resume the annotation pipeline.
    Pipeline {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "canon9d-state")]
        state: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Accept alignments scoring below the threshold, skip the rest.
        #[arg(long, num_args = 0..=1, default_missing_value = "0.2")]
        auto_verify: Option<f64>,
        /// Pose records used as references when a medoid needs one.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Write accepted world boxes here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Serve the annotation HTTP API over a pipeline state.
    Serve {
        #[arg(long, default_value = "canon9d-state")]
        state: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Print per-iteration and total verdict shares.
    Stats {
        #[arg(long, default_value = "canon9d-state")]
        state: PathBuf,
    },
    /// Generate a synthetic dataset with planted transforms.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        shapes: Option<usize>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReferenceInput {
    Record(PoseRecord),
    Bare(Pose15),
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, BoxError> {
    Ok(match path {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    })
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), BoxError> {
    match cli.command {
        Command::Validate { manifest } => {
            let records = load_manifest(&manifest)?;
            let mut vertices = 0;
            for r in &records {
                let s = read_fpc(&r.surface).map_err(|e| format!("{}: {e}", r.surface.display()))?;
                vertices += s.len();
                if let Some(c) = &r.camera {
                    read_cameras(c)?;
                }
            }
            print_json(&json!({ "objects": records.len(), "vertices": vertices, "valid": true }));
        }
        Command::Cluster { manifest, k, seed, out } => {
            let records = load_manifest(&manifest)?;
            let embeddings = records
                .iter()
                .map(|r| Ok(object_embedding(r, &read_fpc(&r.surface)?)?))
                .collect::<Result<Vec<ObjectEmbedding>, BoxError>>()?;
            let k = k.unwrap_or_else(|| default_k(embeddings.len()));
            let clustering = kmeans_cosine(&embeddings, k, seed, DEFAULT_MAX_ITERS)?;
            let mut clusters = Vec::new();
            for c in 0..k {
                let members = clustering.members(c);
                let embs: Vec<ObjectEmbedding> = embeddings
                    .iter()
                    .filter(|e| members.iter().any(|m| m == e.id()))
                    .cloned()
                    .collect();
                clusters.push(json!({ "index": c, "medoid": medoid(&embs)?, "members": members }));
            }
            write_json(
                &out,
                &json!({
                    "k": k,
                    "seed": seed,
                    "iterations": clustering.iterations,
                    "objective_history": clustering.objective_history,
                    "clusters": clusters,
                }),
            )?;
        }
        Command::Align { reference, instance, alpha, seed, out } => {
            let mut cfg = AlignConfig::default();
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            let a = align(&read_fpc(&instance)?, &read_fpc(&reference)?, &cfg, seed)?;
            log::info!("score {:.4}, {} ransac inliers", a.score, a.ransac_inliers);
            write_json(&out, &AlignmentJson { transform: (&a.transform).into(), score: a.score })?;
        }
        Command::Pose { surface, transform, reference_pose, cameras, robust_quantile, out } => {
            let t: TransformJson = read_json(&transform)?;
            let t = SimilarityTransform::try_from(&t)?;
            let reference = match read_json::<ReferenceInput>(&reference_pose)? {
                ReferenceInput::Record(r) => r.pose9d()?,
                ReferenceInput::Bare(p) => pose_from_json(&p)?,
            };
            let canonical = make_canonical_pose(&read_fpc(&surface)?, &t, &reference, robust_quantile)?;
            let frames = match &cameras {
                Some(c) => read_cameras(c)?,
                None => Vec::new(),
            };
            let poses = FramePoses {
                object_id: surface.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                world_pose: pose_to_json(&canonical.world_pose()),
                frames: propagate(&canonical, &frames)
                    .iter()
                    .zip(&frames)
                    .map(|(p, f)| FramePose { frame_id: f.frame_id, pose: pose_to_json(p) })
                    .collect(),
            };
            write_json(&out, &poses)?;
        }
        Command::Eval { pred, gt, symmetry, out, min_count } => {
            let rules: RulesFile = match &symmetry {
                Some(p) => read_json(p)?,
                None => builtin_rules(),
            };
            let options = EvalOptions { min_category_count: min_count, ..EvalOptions::default() };
            let report = ReportJson::from(&evaluate_files(&pred, &gt, &rules, &options)?);
            write_json(&out, &report)?;
            print_json(&json!({
                "acc_aware": report.acc_aware,
                "acc_unaware": report.acc_unaware,
                "mean_iou": report.mean_iou,
                "samples": report.samples,
            }));
        }
        Command::Pipeline { manifest, config, state, resume, auto_verify, annotations, predictions: pred_out } => {
            let mut cfg = load_config(config.as_deref())?;
            if auto_verify.is_some() {
                cfg.auto_verify = auto_verify;
            }
            let mut pipeline = if resume {
                Pipeline::open(&state, cfg)?
            } else {
                let manifest = manifest.ok_or("--manifest is required unless --resume is given")?;
                Pipeline::create(&state, load_manifest(&manifest)?, cfg)?
            };
            let annotations: BTreeMap<String, PoseRecord> = match &annotations {
                Some(p) => read_pose_records(p)?.into_iter().map(|r| (r.object_id.clone(), r)).collect(),
                None => BTreeMap::new(),
            };
            let progress = pipeline.run_with_annotations(&annotations)?;
            if let Some(out) = pred_out {
                write_json(&out, &predictions(pipeline.state()))?;
            }
            if let Progress::Blocked { awaiting_annotation, awaiting_verification, .. } = &progress {
                log::info!(
                    "waiting on {} reference annotations and {} verdicts",
                    awaiting_annotation.len(),
                    awaiting_verification.len()
                );
            }
            print_json(&json!({ "progress": progress, "summary": summarize(pipeline.state()) }));
        }
        Command::Serve { state, config, port, host } => {
            let pipeline = Pipeline::open(&state, load_config(config.as_deref())?)?;
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            tokio::runtime::Runtime::new()?.block_on(service::serve(pipeline, addr))?;
        }
        Command::Stats { state } => {
            let pipeline = Pipeline::open(&state, PipelineConfig::default())?;
            print_json(&summarize(pipeline.state()));
        }
        Command::Synth { out, config, shapes, instances, seed } => {
            let mut cfg: SynthConfig = match &config {
                Some(p) => read_json(p)?,
                None => SynthConfig::default(),
            };
            cfg.shapes = shapes.unwrap_or(cfg.shapes);
            cfg.instances_per_shape = instances.unwrap_or(cfg.instances_per_shape);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let ds = generate(&out, &cfg)?;
            print_json(&json!({
                "objects": ds.records.len(),
                "manifest": ds.manifest_path(),
                "annotations": ds.annotations_path(),
                "truth": ds.truth_path(),
                "auto_verify_threshold": DEFAULT_AUTO_THRESHOLD,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
