use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use canon9d::fpc::{read_fpc, write_fpc};
use canon9d::ledger::Verdict;
use canon9d::manifest::{ObjectRecord, Status};
use canon9d::pipeline::{Phase, Pipeline, PipelineConfig, PipelineError, Progress, STATE_FILE};
use canon9d::records::{pose_from_json, PoseRecord, PoseSource};
use canon9d::synth::{generate, SynthConfig, SynthDataset};
use canon9d_core::geometry::geodesic_distance;

fn small(dir: &Path, shapes: usize, instances: usize, seed: u64) -> SynthDataset {
    let cfg = SynthConfig {
        shapes,
        instances_per_shape: instances,
        points: 600,
        seed,
        ..SynthConfig::default()
    };
    generate(dir, &cfg).unwrap()
}

fn annotations(ds: &SynthDataset) -> BTreeMap<String, PoseRecord> {
    ds.truth.keys().map(|id| (id.clone(), ds.annotation(id).unwrap())).collect()
}

fn config(k: usize, auto: Option<f64>) -> PipelineConfig {
    PipelineConfig {
        k: Some(k),
        auto_verify: auto,
        seed: 11,
        ..PipelineConfig::default()
    }
}

#[test]
fn clones_share_the_reference_box() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(&dir.path().join("data"), 1, 1, 3);
    let source = &ds.records[0];
    let surface = read_fpc(&source.surface).unwrap();
    let mut records = Vec::new();
    for i in 0..5 {
        let path = dir.path().join(format!("clone{i}.fpc"));
        write_fpc(&surface, &path).unwrap();
        records.push(ObjectRecord {
            id: format!("clone{i}"),
            surface: path,
            embedding: source.embedding.clone(),
            ..source.clone()
        });
    }
    let mut p = Pipeline::create(&dir.path().join("state"), records, config(1, Some(0.2))).unwrap();
    let Progress::Blocked { awaiting_annotation, .. } = p.run_iteration().unwrap() else {
        panic!("expected a cluster waiting for its reference");
    };
    let medoid = awaiting_annotation[0].clone();
    let truth = ds.annotation(&source.id).unwrap();
    p.submit_pose(PoseRecord { object_id: medoid, ..truth.clone() }).unwrap();
    assert_eq!(p.advance().unwrap(), Progress::Completed { iteration: 1 });
    let state = p.state();
    assert_eq!(state.ids_with(Status::Accepted).len(), 5);
    let first = &state.canonical["clone0"];
    for c in state.canonical.values() {
        let t = &c.world_to_canonical;
        assert!(c.score < 0.05, "score {}", c.score);
        for (a, b) in t.rt.iter().zip(&first.world_to_canonical.rt) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in c.world_pose.iter().zip(&first.world_pose) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
    let pose = pose_from_json(&first.world_pose).unwrap();
    let gt = truth.pose9d().unwrap();
    assert!(geodesic_distance(pose.rotation(), gt.rotation()) < 1e-6);
}

#[test]
fn outsiders_are_skipped_then_accepted_next_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        shapes: 2,
        instances_per_shape: 4,
        points: 600,
        seed: 5,
        ..SynthConfig::default()
    };
    let ds = generate(&dir.path().join("data"), &cfg).unwrap();
    // Drop one instance of the second shape so the first population wins the
    // single cluster's medoid.
    let records: Vec<ObjectRecord> = ds.records.iter().filter(|r| r.id != "s01_i003").cloned().collect();
    let mut p = Pipeline::create(&dir.path().join("state"), records, config(1, Some(0.2))).unwrap();
    let ann = annotations(&ds);

    p.run_iteration().unwrap();
    let medoid = p.state().clusters[0].medoid.clone();
    assert!(medoid.starts_with("s00"), "medoid {medoid}");
    assert_eq!(p.run_with_annotations(&ann).unwrap(), Progress::Completed { iteration: 2 });
    let h = &p.state().history;
    assert_eq!((h[0].counts.accepted, h[0].counts.skipped), (4, 3));
    assert_eq!((h[1].counts.accepted, h[1].counts.skipped), (3, 0));
    assert_eq!(p.state().ids_with(Status::Accepted).len(), 7);
    for (id, c) in &p.state().canonical {
        let pred = pose_from_json(&c.world_pose).unwrap();
        let gt = pose_from_json(&ds.truth[id].pose).unwrap();
        assert!(geodesic_distance(pred.rotation(), gt.rotation()).to_degrees() < 5.0, "{id}");
    }
    assert!(dir.path().join("state/poses/s01_i000.json").is_file());
}

#[test]
fn empty_queue_is_an_error_and_leaves_state_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(&dir.path().join("data"), 1, 3, 9);
    let mut p = Pipeline::create(&dir.path().join("state"), ds.records.clone(), config(1, Some(0.2))).unwrap();
    assert_eq!(p.run_with_annotations(&annotations(&ds)).unwrap(), Progress::Completed { iteration: 1 });
    let before = fs::read(dir.path().join("state").join(STATE_FILE)).unwrap();
    assert!(matches!(p.run_iteration(), Err(PipelineError::NoPending)));
    assert_eq!(fs::read(dir.path().join("state").join(STATE_FILE)).unwrap(), before);
}

#[test]
fn blocked_without_verified_reference_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let state_dir = dir.path().join("state");
    let ds = small(&dir.path().join("data"), 1, 3, 13);
    let mut p = Pipeline::create(&state_dir, ds.records.clone(), config(1, None)).unwrap();
    let Progress::Blocked { awaiting_annotation, awaiting_verification, .. } = p.run_iteration().unwrap() else {
        panic!("expected blocked");
    };
    assert!(awaiting_verification.is_empty());
    let medoid = awaiting_annotation[0].clone();

    let mut unverified = ds.annotation(&medoid).unwrap();
    unverified.cross_verified = false;
    p.submit_pose(unverified.clone()).unwrap();
    assert!(matches!(p.advance().unwrap(), Progress::Blocked { ref awaiting_annotation, .. } if awaiting_annotation.len() == 1));
    p.submit_pose(PoseRecord { source: PoseSource::Propagated, cross_verified: true, ..unverified }).unwrap();
    assert_eq!(p.state().clusters[0].phase, Phase::AwaitingAnnotation);
    drop(p);

    let mut p = Pipeline::open(&state_dir, config(1, None)).unwrap();
    p.submit_pose(ds.annotation(&medoid).unwrap()).unwrap();
    let Progress::Blocked { awaiting_verification, .. } = p.advance().unwrap() else {
        panic!("expected verification wait");
    };
    assert_eq!(awaiting_verification.len(), 3);
    drop(p);

    let mut p = Pipeline::open(&state_dir, config(1, None)).unwrap();
    for (i, id) in awaiting_verification.iter().enumerate() {
        let v = if i == 0 { Verdict::Filter } else { Verdict::Accept };
        p.submit_verdict(id, v, "alice", "t").unwrap();
    }
    assert_eq!(p.advance().unwrap(), Progress::Completed { iteration: 1 });
    assert!(matches!(
        p.submit_verdict(&awaiting_verification[0], Verdict::Accept, "bob", "t"),
        Err(PipelineError::Filtered(_))
    ));
    assert!(matches!(
        p.submit_pose(ds.annotation(&awaiting_verification[0]).unwrap()),
        Err(PipelineError::Filtered(_))
    ));
    assert!(matches!(p.submit_verdict("nope", Verdict::Accept, "bob", "t"), Err(PipelineError::UnknownObject(_))));
}

#[test]
fn filtered_reference_voids_cluster_acceptances() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(&dir.path().join("data"), 1, 4, 17);
    let mut p = Pipeline::create(&dir.path().join("state"), ds.records.clone(), config(1, None)).unwrap();
    let Progress::Blocked { awaiting_verification, .. } = p.run_with_annotations(&annotations(&ds)).unwrap() else {
        panic!("expected verification wait");
    };
    let medoid = p.state().clusters[0].medoid.clone();
    for id in &awaiting_verification {
        let v = if *id == medoid { Verdict::Filter } else { Verdict::Accept };
        p.submit_verdict(id, v, "alice", "t").unwrap();
    }
    assert_eq!(p.advance().unwrap(), Progress::Completed { iteration: 1 });
    assert_eq!(p.state().ids_with(Status::Filtered).len(), 1);
    assert_eq!(p.state().ids_with(Status::Skipped).len(), 3);
    assert!(p.state().canonical.is_empty());
}

#[test]
fn iteration_cap_stops_requeueing() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(&dir.path().join("data"), 2, 3, 19);
    let cfg = PipelineConfig {
        max_iterations: 1,
        ..config(1, Some(0.2))
    };
    let mut p = Pipeline::create(&dir.path().join("state"), ds.records.clone(), cfg).unwrap();
    assert_eq!(p.run_with_annotations(&annotations(&ds)).unwrap(), Progress::Completed { iteration: 1 });
    assert!(!p.state().ids_with(Status::Skipped).is_empty());
    assert!(matches!(p.run_iteration(), Err(PipelineError::IterationCap(1))));
}
