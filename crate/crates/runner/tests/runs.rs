use std::fs;
use std::path::Path;
use std::process::Command;

use crhlab::analysis::{analyze, tables, AnalysisParams, ALIGNMENTS_CSV, PAH_CSV};
use crhlab::config::{parse_config, ExperimentConfig};
use crhlab::experiment::{run_experiment, CSV_FILES};
use crhlab::persist::{read_csv, read_status, snapshot_steps, RunState};
use crhlab::report::{emit_report, load_snapshot, phase_scan};
use crhlab::{RunOptions, RunOutcome};

const TINY: &str = r#"
name = "tiny"
seed = 3

[task]
kind = "teacher"
input_dim = 6
units = 8
output_dim = 1

[model]
width = 8
depth = 3
activation = "relu"

[train]
learning_rate = 0.05
weight_decay = 1e-3
batch_size = 16
steps = 40

[probe]
snapshot_every = 10
eval_samples = 64
"#;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = parse_config(TINY).unwrap();
    c.output = out.to_path_buf();
    c
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    CSV_FILES
        .iter()
        .filter(|f| dir.join(f).exists())
        .map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap()))
        .collect()
}

#[test]
fn zero_steps_writes_only_the_initial_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny(tmp.path());
    c.train.steps = 0;
    c.probe.snapshot_every = 0;
    let runs = run_experiment(&c, 1, &RunOptions::default()).unwrap();
    assert_eq!(runs[0].outcome, RunOutcome::Complete);
    assert_eq!(snapshot_steps(&runs[0].dir).unwrap(), vec![0]);
    let (_, rows) = read_csv(&runs[0].dir.join(ALIGNMENTS_CSV)).unwrap();
    assert!(rows.iter().all(|r| r[0] == "0"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&tiny(a.path()), 1, &RunOptions::default()).unwrap();
    let rb = run_experiment(&tiny(b.path()), 1, &RunOptions::default()).unwrap();
    let (da, db) = (csv_bytes(&ra[0].dir), csv_bytes(&rb[0].dir));
    assert!(da.len() >= 6);
    assert_eq!(da, db);
    assert_eq!(snapshot_steps(&ra[0].dir).unwrap(), vec![0, 10, 20, 30, 40]);
}

#[test]
fn reloaded_snapshots_reproduce_recorded_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny(tmp.path());
    let run = &run_experiment(&c, 1, &RunOptions::default()).unwrap()[0];
    let point = &c.grid().unwrap()[0].config;
    let params = AnalysisParams::from_config(point);
    let prev = load_snapshot(&run.dir, point, 30).unwrap();
    let last = load_snapshot(&run.dir, point, 40).unwrap();
    let t = tables(&params, &analyze(&params, &last, Some(&prev)).unwrap());
    let (_, rows) = read_csv(&run.dir.join(ALIGNMENTS_CSV)).unwrap();
    let recorded: Vec<_> = rows.into_iter().filter(|r| r[0] == "40").collect();
    assert_eq!(recorded, t.alignments);
    let (_, rows) = read_csv(&run.dir.join(PAH_CSV)).unwrap();
    let recorded: Vec<_> = rows.into_iter().filter(|r| r[0] == "40").collect();
    assert_eq!(recorded, t.pah);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let whole = run_experiment(&tiny(a.path()), 1, &RunOptions::default()).unwrap();
    let cb = tiny(b.path());
    let halted = run_experiment(&cb, 1, &RunOptions { fresh: false, halt_after: Some(20) }).unwrap();
    assert_eq!(halted[0].outcome, RunOutcome::Halted { step: 20 });
    assert_eq!(read_status(&halted[0].dir).unwrap().unwrap().state, RunState::Halted);
    // a snapshot written after the kill point is discarded along with its rows
    fs::remove_dir_all(halted[0].dir.join("snapshots/step-20")).unwrap();
    let resumed = run_experiment(&cb, 1, &RunOptions::default()).unwrap();
    assert_eq!(resumed[0].outcome, RunOutcome::Complete);
    assert_eq!(csv_bytes(&whole[0].dir), csv_bytes(&resumed[0].dir));
    let again = run_experiment(&cb, 1, &RunOptions::default()).unwrap();
    assert_eq!(again[0].outcome, RunOutcome::AlreadyComplete);
}

#[test]
fn changed_config_needs_fresh() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny(tmp.path());
    run_experiment(&c, 1, &RunOptions::default()).unwrap();
    let mut d = c.clone();
    d.train.learning_rate = 0.02;
    assert!(run_experiment(&d, 1, &RunOptions::default()).is_err());
    let r = run_experiment(&d, 1, &RunOptions { fresh: true, halt_after: None }).unwrap();
    assert_eq!(r[0].outcome, RunOutcome::Complete);
}

#[test]
fn report_orders_gamma_sweep_and_lists_every_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny(tmp.path());
    c.sweep.weight_decay = Some(vec![1e-2, 1e-5, 1e-3]);
    let runs = run_experiment(&c, 2, &RunOptions::default()).unwrap();
    let dirs: Vec<_> = runs.iter().map(|r| r.dir.clone()).collect();
    let out = tmp.path().join("report");
    let single = emit_report(&dirs[..1], &out).unwrap();
    assert_eq!(single.rows, 3);
    let rep = emit_report(&dirs, &out).unwrap();
    assert_eq!(rep.rows, 9);
    let (header, rows) = read_csv(&rep.summary).unwrap();
    let col = header.iter().position(|h| h == "weight_decay").unwrap();
    let gammas: Vec<f64> = rows.iter().map(|r| r[col].parse().unwrap()).collect();
    assert!(gammas.windows(2).all(|w| w[0] <= w[1]), "{gammas:?}");
    assert!(out.join("spectra.gp").exists() && out.join("alpha_vs_gamma.dat").exists());
    assert!(emit_report(&[], &out).is_err());

    let scan = phase_scan(&dirs[0], Some(0.5)).unwrap();
    assert_eq!(scan.len(), 5 * 3);
}

#[test]
fn divergence_is_recorded_and_keeps_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny(tmp.path());
    c.train.learning_rate = 200.0;
    let r = &run_experiment(&c, 1, &RunOptions::default()).unwrap()[0];
    assert!(matches!(r.outcome, RunOutcome::Diverged { .. }), "{:?}", r.outcome);
    assert_eq!(read_status(&r.dir).unwrap().unwrap().state, RunState::Diverged);
    assert!(r.dir.join(ALIGNMENTS_CSV).exists());
}

fn crhlab(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_crhlab")).args(args).current_dir(cwd).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert_eq!(crhlab(&["frobnicate"], p).0, 1);
    assert_eq!(crhlab(&["--help"], p).0, 0);

    fs::write(p.join("bad.toml"), TINY.replace("learning_rate = 0.05\n", "")).unwrap();
    let (code, text) = crhlab(&["train", "bad.toml"], p);
    assert_eq!(code, 1);
    assert!(text.contains("learning_rate"), "{text}");

    fs::write(p.join("tiny.toml"), TINY).unwrap();
    let (code, text) = crhlab(&["train", "tiny.toml", "--out", "runs", "--snapshot-every", "20", "--seed", "5"], p);
    assert_eq!(code, 0, "{text}");
    assert_eq!(snapshot_steps(&p.join("runs/base")).unwrap(), vec![0, 20, 40]);
    assert_eq!(crhlab(&["report", "runs", "--out", "rep"], p).0, 0);
    assert!(p.join("rep/summary.csv").exists());
    assert_eq!(crhlab(&["phase-scan", "runs/base", "--tau", "0.8"], p).0, 0);

    fs::write(p.join("hot.toml"), TINY.replace("learning_rate = 0.05", "learning_rate = 200.0")).unwrap();
    assert_eq!(crhlab(&["train", "hot.toml", "--out", "hot"], p).0, 2);

    let (code, text) = crhlab(&["verify-theorems", "--phase", "3", "--seed", "1", "--out", "thm"], p);
    assert_eq!(code, 0, "{text}");
    let (header, rows) = read_csv(&p.join("thm/theorems.csv")).unwrap();
    assert_eq!(header, vec!["theorem", "phase", "seed", "relation", "measured", "pass"]);
    assert!(!rows.is_empty() && rows.iter().all(|r| r[5] == "true"));
    assert_eq!(crhlab(&["verify-theorems", "--phase", "12"], p).0, 1);
}

#[test]
fn a_locked_run_dir_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny(tmp.path());
    let dir = tmp.path().join("base");
    fs::create_dir_all(&dir).unwrap();
    let held = fs::File::create(dir.join(crhlab::experiment::LOCK)).unwrap();
    held.lock().unwrap();
    let err = run_experiment(&c, 1, &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("in use"), "{err}");
    held.unlock().unwrap();
    assert_eq!(run_experiment(&c, 1, &RunOptions::default()).unwrap()[0].outcome, RunOutcome::Complete);
}
