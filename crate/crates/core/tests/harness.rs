mod common;

use common::{runs, snapshot, tiny_config};
use fedrel_core::checkpoint::{self, Container};
use fedrel_core::data;
use fedrel_core::harness::config::{ExperimentConfig, MethodName};
use fedrel_core::harness::run::{self, EvalTarget, RunDir, RunManifest, TrainOptions};
use fedrel_core::harness::{pipeline, Suite};
use fedrel_core::metrics::{self, CalibrationReport};
use fedrel_core::Error;

fn fresh(cfg: &ExperimentConfig) -> (tempfile::TempDir, RunDir) {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path().join("run"));
    run::gen_data(cfg, &run).unwrap();
    (dir, run)
}

#[test]
fn gen_data_is_deterministic() {
    let cfg = tiny_config(1);
    let (_a, ra) = fresh(&cfg);
    let (_b, rb) = fresh(&cfg);
    let skip = ["manifest.json", "manifest_timing.json"];
    assert_eq!(snapshot(ra.root(), &skip), snapshot(rb.root(), &skip));
    assert_eq!(
        std::fs::read(ra.manifest()).unwrap(),
        std::fs::read(rb.manifest()).unwrap()
    );
}

#[test]
fn single_round_run_logs_one_record() {
    let mut cfg = tiny_config(2);
    cfg.fed.rounds = 1;
    let (_d, r) = fresh(&cfg);
    let out = run::train(&cfg, &r, TrainOptions::default()).unwrap();
    assert!(out.finished);
    let text = std::fs::read_to_string(r.rounds_log()).unwrap();
    assert_eq!(text.lines().count(), 1);
    let log: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(log["round"], 1);
    assert!(r.global_model().exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    runs::resume_is_bitwise(dir.path()).unwrap();
}

#[test]
fn manifest_lists_existing_files_and_evaluation_is_repeatable() {
    let cfg = tiny_config(4);
    let (_d, r) = fresh(&cfg);
    run::train(&cfg, &r, TrainOptions::default()).unwrap();
    run::aph(&cfg, &r, None).unwrap();
    let first = run::evaluate(&cfg, &r, EvalTarget::All, None).unwrap();
    let bytes: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let second = run::evaluate(&cfg, &r, EvalTarget::All, None).unwrap();
    assert_eq!(first, second);
    for (p, b) in second.iter().zip(&bytes) {
        assert_eq!(&std::fs::read(p).unwrap(), b, "{}", p.display());
    }

    let m = RunManifest::load(&r.manifest()).unwrap().unwrap();
    assert_eq!(m.config_hash, cfg.hash());
    for cmd in ["gen-data", "train", "aph", "evaluate"] {
        assert!(!m.artifacts[cmd].is_empty(), "{cmd}");
    }
    assert!(m.missing(r.root()).is_empty());
    for name in ["global", "finetune", "aph"] {
        assert!(r.reports().join(format!("{name}_in_domain.json")).exists());
        assert!(r.reports().join(format!("{name}_ood.json")).exists());
    }
}

#[test]
fn reported_f_ece_equals_direct_metric_call() {
    let cfg = tiny_config(5);
    let (_d, r) = fresh(&cfg);
    run::train(&cfg, &r, TrainOptions::default()).unwrap();
    run::evaluate(&cfg, &r, EvalTarget::Global, None).unwrap();
    let report: CalibrationReport =
        serde_json::from_str(&std::fs::read_to_string(r.reports().join("global_in_domain.json")).unwrap()).unwrap();

    let prep = run::load_prepared(&cfg, &r).unwrap();
    let (spec, state) = run::load_trained(&r).unwrap();
    let sets: Vec<_> = prep
        .clients
        .iter()
        .map(|c| {
            let probs = fedrel_core::nn::predict_proba(&spec, &state.global, &c.test.inputs).unwrap();
            metrics::PredictionSet::new(c.client_id, probs, c.test.labels.clone(), "fedavg").unwrap()
        })
        .collect();
    let (want, _) = metrics::f_ece(&sets, cfg.metrics.bins).unwrap();
    assert_eq!(report.f_ece, want);
}

#[test]
fn degenerate_ensemble_reproduces_checkpoint() {
    // one head, no fine-tuning, negligible noise: the ensemble is the prior model
    let mut cfg = tiny_config(6);
    {
        let a = cfg.aph.as_mut().unwrap();
        a.heads = 1;
        a.epochs = 0;
        a.lambda = Some(-30.0);
    }
    let (_d, r) = fresh(&cfg);
    run::train(&cfg, &r, TrainOptions::default()).unwrap();
    let ens = run::aph(&cfg, &r, Some(&r.global_model())).unwrap();
    let (spec, global) = checkpoint::read_model(&Container::read(&r.global_model()).unwrap()).unwrap();
    let prep = run::load_prepared(&cfg, &r).unwrap();
    for (e, c) in ens.iter().zip(&prep.clients) {
        let a = e.predict(&c.test.inputs).unwrap();
        let b = fedrel_core::nn::predict_proba(&spec, &global, &c.test.inputs).unwrap();
        for i in 0..a.rows() {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn betas_audit_lists_every_head_within_bounds() {
    let cfg = tiny_config(7);
    let (_d, r) = fresh(&cfg);
    run::train(&cfg, &r, TrainOptions::default()).unwrap();
    let ens = run::aph(&cfg, &r, None).unwrap();
    let a = cfg.aph.as_ref().unwrap();
    let mut rdr = csv::Reader::from_path(r.betas_csv()).unwrap();
    let rows: Vec<(usize, usize, f64)> = rdr.deserialize().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), cfg.fed.clients * a.heads);
    for (c, m, b) in rows {
        assert!(b >= a.beta_low && b <= a.beta_high, "{b}");
        assert_eq!(ens[c].betas[m], b);
    }

    // same seed, fresh directory: byte-identical ensembles
    let (_d2, r2) = fresh(&cfg);
    run::train(&cfg, &r2, TrainOptions::default()).unwrap();
    run::aph(&cfg, &r2, None).unwrap();
    for c in 0..cfg.fed.clients {
        assert_eq!(
            std::fs::read(r.ensemble(c)).unwrap(),
            std::fs::read(r2.ensemble(c)).unwrap()
        );
    }
    assert_eq!(run::load_ensembles(&cfg, &r2).unwrap(), ens);
}

#[test]
fn unknown_config_key_is_rejected_with_its_location() {
    let text = tiny_config(0).to_toml().replace("[fed]\n", "[fed]\nclient = 3\n");
    match ExperimentConfig::from_toml(&text) {
        Err(Error::Config { path, message }) => {
            assert!(path.starts_with("byte "), "{path}");
            assert!(message.contains("client"), "{message}");
        }
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn training_before_gen_data_names_the_missing_input() {
    let cfg = tiny_config(0);
    let dir = tempfile::tempdir().unwrap();
    let r = RunDir::new(dir.path());
    match run::train(&cfg, &r, TrainOptions::default()) {
        Err(Error::MissingInput { path, .. }) => assert_eq!(path, r.dataset()),
        other => panic!("expected missing input, got {other:?}"),
    }
    assert!(matches!(run::aph(&cfg, &r, None), Err(Error::MissingInput { .. })));
}

#[test]
fn fedprox_zero_run_logs_match_fedavg() {
    let cfg = tiny_config(8);
    let mut prox = cfg.clone();
    prox.fed.method = MethodName::Fedprox;
    prox.fed.mu_prox = Some(0.0);
    let (_a, ra) = fresh(&cfg);
    let (_b, rb) = fresh(&prox);
    run::train(&cfg, &ra, TrainOptions::default()).unwrap();
    run::train(&prox, &rb, TrainOptions::default()).unwrap();
    assert_eq!(
        std::fs::read(ra.rounds_log()).unwrap(),
        std::fs::read(rb.rounds_log()).unwrap()
    );
}

#[test]
fn partition_histogram_matches_direct_computation() {
    let mut cfg = tiny_config(9);
    cfg.data.alpha = Some(0.1);
    cfg.fed.clients = 5;
    let (_d, r) = fresh(&cfg);

    let ds = data::gen_synthetic(
        cfg.data.classes,
        cfg.data.dim,
        cfg.data.samples_per_class,
        cfg.data.class_separation,
        cfg.stream_seed("data"),
    )
    .unwrap();
    let parts = data::partition(&ds, &pipeline::partition_plan(&cfg)).unwrap();
    let mut want = String::from("client,class,train,test\n");
    for p in &parts {
        let c = data::train_test_split(p, cfg.data.test_fraction, cfg.stream_seed("split")).unwrap();
        let (tr, te) = (c.train.class_counts(), c.test.class_counts());
        for k in 0..cfg.data.classes {
            want.push_str(&format!("{},{k},{},{}\n", c.client_id, tr[k], te[k]));
        }
    }
    assert_eq!(std::fs::read_to_string(r.partition_csv()).unwrap(), want);
}

#[test]
fn config_is_pinned_to_the_run_directory() {
    let cfg = tiny_config(10);
    let (_d, r) = fresh(&cfg);
    let mut other = cfg.clone();
    other.fed.lr = 0.01;
    assert!(matches!(
        run::train(&other, &r, TrainOptions::default()),
        Err(Error::Config { .. })
    ));
}

#[test]
fn suite_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    runs::suite_rerun_is_identical(dir.path(), Suite::ParticipationSweep, &[0, 1]).unwrap();
}
