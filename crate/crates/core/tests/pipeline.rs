mod common;

use std::fs;
use std::path::Path;

use kgprompt::config::KvConfig;
use kgprompt::data::synth::SynthConfig;
use kgprompt::data::Dataset;
use kgprompt::eval::{evaluate_checkpoint, mean_recall_at_10, scarcity_sweep, BACKBONE_FILES};
use kgprompt::model::Crs;
use kgprompt::training::{metrics_file, run_stage, DataConfig, Experiment, StageKind};
use kgprompt::Error;

const TINY: &str = "\
d_model = 16
n_layers = 1
n_heads = 2
max_ctx = 160
enc_layers = 1
prompt_len_gen = 4
prompt_len_rec = 2
max_new_tokens = 12
backbone.steps = 6
fuse.steps = 6
gen.steps = 4
gen.batch_size = 4
rec.steps = 4
rec.batch_size = 4
";

fn setup(root: &Path) -> (Dataset, KvConfig, Experiment) {
    let cfg = SynthConfig {
        n_dialogs: 40,
        n_items: 10,
        n_entities: 24,
        n_relations: 2,
        seed: 3,
    };
    let (ds, data_dir) = common::synth_dataset(root, &cfg);
    let mut kv = KvConfig::parse(TINY).unwrap();
    kv.set("data_dir", data_dir.display());
    let exp = Experiment::from_dataset(ds.clone(), &DataConfig::from_kv(&kv).unwrap());
    (ds, kv, exp)
}

const STAGES: [StageKind; 4] = [StageKind::Backbone, StageKind::Fuse, StageKind::Gen, StageKind::Rec];

#[test]
fn stages_refuse_to_run_out_of_order() {
    let root = tempfile::tempdir().unwrap();
    let (_, kv, exp) = setup(root.path());
    let dir = root.path().join("run");
    for kind in [StageKind::Fuse, StageKind::Gen, StageKind::Rec] {
        let err = run_stage(&exp, &kv, kind, 0, &dir).unwrap_err();
        assert!(matches!(err, Error::Staging { ref stage, .. } if stage == kind.name()), "{kind}: {err}");
    }
    run_stage(&exp, &kv, StageKind::Backbone, 0, &dir).unwrap();
    for kind in [StageKind::Gen, StageKind::Rec] {
        let err = run_stage(&exp, &kv, kind, 0, &dir).unwrap_err();
        assert!(matches!(err, Error::Staging { .. }), "{kind}: {err}");
    }
    run_stage(&exp, &kv, StageKind::Fuse, 0, &dir).unwrap();
    let err = run_stage(&exp, &kv, StageKind::Rec, 0, &dir).unwrap_err();
    assert!(matches!(err, Error::Staging { ref missing, .. } if missing.ends_with("gen.tsa")), "{err}");
}

#[test]
fn full_pipeline_writes_a_loadable_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let (_, kv, exp) = setup(root.path());
    let dir = root.path().join("run");
    let mut digests = Vec::new();
    for kind in STAGES {
        let s = run_stage(&exp, &kv, kind, 1, &dir).unwrap();
        assert_eq!(s.stage, kind);
        assert!(s.losses.iter().all(|l| l.is_finite()));
        let lines = fs::read_to_string(metrics_file(&dir, kind)).unwrap().lines().count();
        assert_eq!(lines, s.steps);
        assert!(dir.join(format!("run_{}.cfg", kind.name())).exists());
        digests.push(s.backbone_digest);
    }
    assert!(digests.windows(2).all(|w| w[0] == w[1]));
    for f in BACKBONE_FILES.iter().chain(&["fusion.tsa", "gen.tsa", "rec.tsa", "model.cfg"]) {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let crs = Crs::<f32>::load(&dir).unwrap();
    assert_eq!(crs.backbone.digest(), digests[0]);

    let report = evaluate_checkpoint(&dir, &exp, "test").unwrap();
    assert!(report.recalls_consistent());
    assert_eq!(report.conversations, exp.splits.test.conversations.len());
    assert!(report.rec_instances <= report.gen_instances);
    assert!(report.dist_2 >= 0.0 && report.dist_3 >= 0.0 && report.dist_4 >= 0.0);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    for key in ["recall@1", "recall@10", "recall@50", "dist-2", "dist-3", "dist-4", "config_digest"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert!(evaluate_checkpoint(&dir, &exp, "holdout").is_err());
}

#[test]
fn validation_tracks_the_best_step() {
    let root = tempfile::tempdir().unwrap();
    let (_, mut kv, exp) = setup(root.path());
    let dir = root.path().join("run");
    kv.set("gen.steps", 8);
    kv.set("gen.eval_every", 2);
    kv.set("gen.patience", 100);
    kv.set("gen.max_valid", 8);
    for kind in [StageKind::Backbone, StageKind::Fuse] {
        run_stage(&exp, &kv, kind, 0, &dir).unwrap();
    }
    let s = run_stage(&exp, &kv, StageKind::Gen, 0, &dir).unwrap();
    let step = s.best_step.expect("validation ran");
    assert!(step % 2 == 0 && step <= 8);
    assert_eq!(s.best_score.unwrap().len(), 1);
    assert!(!s.stopped_early);
}

#[test]
fn same_seed_same_logs() {
    let root = tempfile::tempdir().unwrap();
    let (_, kv, exp) = setup(root.path());
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = root.path().join(name);
            for kind in STAGES {
                run_stage(&exp, &kv, kind, 9, &dir).unwrap();
            }
            let logs: Vec<Vec<u8>> = STAGES.iter().map(|&k| fs::read(metrics_file(&dir, k)).unwrap()).collect();
            (logs, evaluate_checkpoint(&dir, &exp, "test").unwrap())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn sweep_covers_every_proportion_and_seed() {
    let root = tempfile::tempdir().unwrap();
    let (ds, kv, exp) = setup(root.path());
    let backbone = root.path().join("backbone");
    run_stage(&exp, &kv, StageKind::Backbone, 0, &backbone).unwrap();

    let work = root.path().join("sweep");
    let props = [0.5, 1.0];
    let rows = scarcity_sweep(&ds, &kv, &backbone, &work, &props, 2).unwrap();
    let keys: Vec<_> = rows.iter().map(|r| (r.proportion, r.seed)).collect();
    assert_eq!(keys, vec![(0.5, 0), (1.0, 0), (0.5, 1), (1.0, 1)]);
    for r in &rows {
        let report = r.report.as_ref().expect("run completed");
        assert!(report.recalls_consistent());
        assert!(r.skipped.is_none());
        assert!(work.join(format!("p{}_s{}", r.proportion, r.seed)).join("rec.tsa").exists());
    }
    let means = mean_recall_at_10(&rows, &props);
    assert_eq!(means.len(), 2);
    assert!(means.iter().all(|(_, m)| m.is_some()));

    assert!(scarcity_sweep(&ds, &kv, &backbone, &work, &[0.0], 1).is_err());
    assert!(scarcity_sweep(&ds, &kv, &backbone, &work, &[1.5], 1).is_err());
    let err = scarcity_sweep(&ds, &kv, &root.path().join("nothing"), &work, &props, 1).unwrap_err();
    assert!(matches!(err, Error::Staging { .. }));
}
