//! On-disk reproducibility checks shared by the harness tests and the acceptance target.

use std::path::Path;

use fedrel_core::harness::run::{self, RunDir, TrainOptions};
use fedrel_core::harness::Suite;

use super::{snapshot, tiny_config};

const TRAIN_FILES: [&str; 3] = ["train/rounds.jsonl", "train/state.fbin", "train/global.fbin"];

fn read(dir: &Path, rel: &str) -> Result<Vec<u8>, String> {
    std::fs::read(dir.join(rel)).map_err(|e| format!("{rel}: {e}"))
}

/// Interrupt a 30-round run after round 10, resume it, and compare with an uninterrupted run.
pub fn resume_is_bitwise(scratch: &Path) -> Result<(), String> {
    let mut cfg = tiny_config(3);
    cfg.fed.rounds = 30;
    cfg.fed.local_epochs = 1;
    cfg.fed.participation = 0.5;
    let straight = RunDir::new(scratch.join("straight"));
    let split = RunDir::new(scratch.join("split"));
    let err = |e: fedrel_core::Error| e.to_string();
    for r in [&straight, &split] {
        run::gen_data(&cfg, r).map_err(err)?;
    }
    run::train(&cfg, &straight, TrainOptions::default()).map_err(err)?;
    let partial = run::train(
        &cfg,
        &split,
        TrainOptions {
            resume: false,
            stop_after: Some(10),
        },
    )
    .map_err(err)?;
    if partial.finished || partial.result.logs.len() != 10 || split.global_model().exists() {
        return Err("interrupted run did not stop after round 10".into());
    }
    run::train(
        &cfg,
        &split,
        TrainOptions {
            resume: true,
            stop_after: None,
        },
    )
    .map_err(err)?;
    for rel in TRAIN_FILES {
        if read(straight.root(), rel)? != read(split.root(), rel)? {
            return Err(format!("{rel} differs after resume"));
        }
    }
    Ok(())
}

/// Run a suite twice into separate directories; every output byte must match.
pub fn suite_rerun_is_identical(scratch: &Path, suite: Suite, seeds: &[u64]) -> Result<(), String> {
    let mut cfg = tiny_config(0);
    cfg.fed.rounds = 3;
    let mut outs = Vec::new();
    for name in ["first", "second"] {
        let r = RunDir::new(scratch.join(name));
        run::run_suite(&cfg, &r, suite, seeds).map_err(|e| e.to_string())?;
        outs.push(snapshot(&r.suite_dir(suite), &[]));
    }
    if outs[0].is_empty() {
        return Err("suite wrote no files".into());
    }
    if outs[0] != outs[1] {
        let names: Vec<&str> = outs[0]
            .iter()
            .zip(&outs[1])
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0.as_str())
            .collect();
        return Err(format!("rerun differs in {names:?}"));
    }
    Ok(())
}
