//! Short training runs on a small corpus. The full-size run lives in the
//! acceptance target.

mod common;

use crsllm::corpus::{generate_synthetic_corpus, SyntheticSpec};
use crsllm::crs::{
    train_two_stage, CrsSettings, Stage, TrainingData, TrainingSchedule, UnifiedCrs,
};
use crsllm::tasks::build_instances;
use crsllm::TaskKind;

fn setup() -> (UnifiedCrs, TrainingData, Vec<crsllm::TaskInstance>) {
    let spec = SyntheticSpec {
        dialogues: 60,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap().remove(0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for kind in TaskKind::ALL {
        train.extend(
            build_instances(
                &corpus.split.train,
                &corpus.catalog,
                kind,
                common::CANDIDATE_SEED,
            )
            .unwrap(),
        );
        test.extend(
            build_instances(
                &corpus.split.test,
                &corpus.catalog,
                kind,
                common::CANDIDATE_SEED,
            )
            .unwrap(),
        );
    }
    let data = TrainingData::from_instances(&train).unwrap();
    (
        UnifiedCrs::tiny([&corpus.catalog], CrsSettings::default()),
        data,
        test,
    )
}

#[test]
fn report_has_both_stages_and_warmup_only_tracks_l_r() {
    let (mut crs, data, _) = setup();
    let schedule = TrainingSchedule {
        warmup_epochs: 2,
        joint_epochs: 2,
        ..Default::default()
    };
    let report = train_two_stage(&mut crs, &data, &schedule).unwrap();
    assert_eq!(report.epochs.len(), 4);
    assert_eq!(report.warmup_curve().len(), 2);
    for e in &report.epochs {
        assert!(e.l_r.is_finite() && e.l_r >= 0.0);
        match e.stage {
            Stage::Warmup => assert!(e.l_theta.is_none()),
            Stage::Joint => assert!(e.l_theta.is_some()),
        }
    }
    let curve = report.warmup_curve();
    assert!(curve[1] < curve[0], "warm-up loss did not fall: {curve:?}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curves.jsonl");
    report.write_curves(&path).unwrap();
    assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), 4);
}

#[test]
fn same_seed_same_model() {
    let schedule = TrainingSchedule {
        warmup_epochs: 1,
        joint_epochs: 1,
        ..Default::default()
    };
    let (mut a, data, test) = setup();
    let (mut b, _, _) = setup();
    let ra = train_two_stage(&mut a, &data, &schedule).unwrap();
    let rb = train_two_stage(&mut b, &data, &schedule).unwrap();
    assert_eq!(ra, rb);
    for inst in test.iter().take(40) {
        assert_eq!(a.predict(inst).unwrap(), b.predict(inst).unwrap());
    }
}

#[test]
fn checkpoint_reload_predicts_identically() {
    let (mut crs, data, test) = setup();
    let schedule = TrainingSchedule {
        warmup_epochs: 1,
        joint_epochs: 1,
        ..Default::default()
    };
    train_two_stage(&mut crs, &data, &schedule).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("crs.json");
    crs.save(&path).unwrap();
    let back = UnifiedCrs::load(&path).unwrap();
    for inst in test.iter().take(40) {
        assert_eq!(crs.predict(inst).unwrap(), back.predict(inst).unwrap());
    }
}
