use memaudit_core::attacks::logs::run_log_attack;
use memaudit_core::attacks::{AttackConfig, CLASSIFICATION_ATTACKS, SEQUENCE_ATTACKS};
use memaudit_core::eval::auroc_of;
use memaudit_core::harness::{
    emit_logs, plan_splits, seq_fixture, synth_dataset, train_models, ModelSpec, SeqFixtureSpec, SynthSpec,
};
use memaudit_core::record::{load_prediction_log, write_prediction_log};
use memaudit_core::{Manifest, Paradigm};

#[test]
fn log_attacks_survive_a_disk_round_trip() {
    let ds = synth_dataset(&SynthSpec {
        n: 240,
        dim: 8,
        classes: 3,
        class_sep: 1.0,
        noise: 1.0,
        seed: 11,
    })
    .unwrap();
    let plan = plan_splits(&ds.ids, 8, 11).unwrap();
    let spec = ModelSpec {
        overfit_level: Some(0.5),
        ..ModelSpec::default()
    };
    let models = train_models(&ds, &plan, &spec, true, 11).unwrap();
    let (records, manifest) = emit_logs(&ds, &plan, &models, spec.kind, "synth").unwrap();

    let dir = tempfile::tempdir().unwrap();
    write_prediction_log(dir.path().join("log.jsonl"), &records).unwrap();
    manifest.save(dir.path().join("manifest.json")).unwrap();
    let records = load_prediction_log(dir.path().join("log.jsonl")).unwrap();
    let manifest = Manifest::load(dir.path().join("manifest.json")).unwrap();
    let samples = ds.sample_index().unwrap();

    let config = AttackConfig::default();
    for attack in CLASSIFICATION_ATTACKS.iter().filter(|a| a.paradigm() != Paradigm::Query) {
        let scores = run_log_attack(*attack, &records, &manifest, &samples, &config)
            .unwrap_or_else(|e| panic!("{}: {e}", attack.name()));
        assert_eq!(scores.entries.len(), plan.target_ids.len(), "{}", attack.name());
        let a = auroc_of(&scores).unwrap();
        assert!((0.0..=1.0).contains(&a), "{}: {a}", attack.name());
    }
}

#[test]
fn query_attacks_need_an_oracle() {
    let f = seq_fixture(&SeqFixtureSpec {
        n_per_class: 20,
        ..SeqFixtureSpec::default()
    })
    .unwrap();
    let query = CLASSIFICATION_ATTACKS.iter().find(|a| a.paradigm() == Paradigm::Query).unwrap();
    assert!(run_log_attack(*query, &f.records, &f.manifest, &f.samples, &AttackConfig::default()).is_err());
}

#[test]
fn sequence_detectors_separate_the_fixture() {
    let f = seq_fixture(&SeqFixtureSpec {
        n_per_class: 200,
        neighbors: 4,
        ..SeqFixtureSpec::default()
    })
    .unwrap();
    for attack in SEQUENCE_ATTACKS {
        let scores = run_log_attack(attack, &f.records, &f.manifest, &f.samples, &AttackConfig::default()).unwrap();
        assert_eq!(scores.entries.len(), 400);
        let a = auroc_of(&scores).unwrap();
        assert!(a > 0.5, "{}: {a}", attack.name());
    }
}
