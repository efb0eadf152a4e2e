//! Training runs with scheduled probes, checkpointing and resume.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crhlab_core::netcore::{init_mlp, train_step, Loss, MlpModel, OptimizerState, Targets, TrainConfig};
use crhlab_core::probes::{conjugate_set, MomentMode};
use crhlab_core::tasks::{
    class_blob_range, class_blob_sample, mixed_teacher_range, teacher_range, ClassBlobSpec, InputMixSpec, TeacherSpec,
};
use crhlab_core::theoremlab::nc_check;
use crhlab_core::CrhError;
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, analyze, fmt_f, fmt_opt, tables, AnalysisParams};
use crate::config::{ExperimentConfig, GridPoint, TaskConfig};
use crate::error::{RunnerError, RunnerResult};
use crate::persist::{self, RunSnapshot, RunState, Status, MANIFEST, MODES};

/// Seed offsets of the derived random streams.
pub const TEACHER_SEED_OFFSET: u64 = 1000;
pub const MIX_SEED_OFFSET: u64 = 2000;
pub const EVAL_SEED_OFFSET: u64 = 99;

pub const FORMAT_VERSION: u32 = 1;

pub const CSV_FILES: [&str; 7] = [
    analysis::ALIGNMENTS_CSV,
    analysis::PHASES_CSV,
    analysis::FDT_CSV,
    analysis::PAH_CSV,
    analysis::STATIONARITY_CSV,
    analysis::METRICS_CSV,
    analysis::NC_CSV,
];

pub const METRICS_HEADER: [&str; 3] = ["step", "train_loss", "eval_loss"];

pub const NC_HEADER: [&str; 15] = [
    "step",
    "accuracy",
    "nc1",
    "nc2",
    "nc3",
    "nc4",
    "zeta",
    "interpolation_error",
    "b_isotropy",
    "hg_a",
    "hz_a",
    "gz_a",
    "hg_b",
    "hz_b",
    "gz_b",
];

/// Training and probe data for one run; every batch is a pure function of
/// its step.
pub enum DataSource {
    Teacher {
        spec: TeacherSpec<f64>,
        mix: Option<InputMixSpec<f64>>,
        seed: u64,
    },
    Blobs {
        spec: ClassBlobSpec<f64>,
        x: Array2<f64>,
        labels: Vec<usize>,
    },
}

impl DataSource {
    pub fn new(c: &ExperimentConfig) -> RunnerResult<Self> {
        let seed = c.seed;
        Ok(match &c.task {
            TaskConfig::Teacher { input_dim, units, output_dim, teacher_seed } => Self::Teacher {
                spec: TeacherSpec::new(*input_dim, *units, *output_dim, teacher_seed.unwrap_or(TEACHER_SEED_OFFSET + seed))?,
                mix: None,
                seed,
            },
            TaskConfig::MixedTeacher { input_dim, units, output_dim, phi, teacher_seed, mix_seed } => Self::Teacher {
                spec: TeacherSpec::new(*input_dim, *units, *output_dim, teacher_seed.unwrap_or(TEACHER_SEED_OFFSET + seed))?,
                mix: Some(InputMixSpec::new(*input_dim, *phi, mix_seed.unwrap_or(MIX_SEED_OFFSET + seed))?),
                seed,
            },
            TaskConfig::ClassBlob { classes, input_dim, sigma, separation, n_per_class, spec_seed } => {
                let spec = ClassBlobSpec::new(*classes, *input_dim, *sigma, *separation, spec_seed.unwrap_or(seed))?;
                let (x, labels) = class_blob_sample(&spec, *n_per_class, seed);
                Self::Blobs { spec, x, labels }
            }
        })
    }

    fn teacher_rows(&self, start: u64, n: usize, seed: u64) -> RunnerResult<(Array2<f64>, Targets<f64>)> {
        match self {
            Self::Teacher { spec, mix: None, .. } => {
                let (x, y) = teacher_range(spec, start, n, seed);
                Ok((x, Targets::Regression(y)))
            }
            Self::Teacher { spec, mix: Some(m), .. } => {
                let (x, y) = mixed_teacher_range(spec, m, start, n, seed)?;
                Ok((x, Targets::Regression(y)))
            }
            Self::Blobs { .. } => unreachable!("teacher rows of a blob task"),
        }
    }

    /// Batch consumed by the update at `step`.
    pub fn train_batch(&self, step: u64, batch: usize) -> RunnerResult<(Array2<f64>, Targets<f64>)> {
        match self {
            Self::Teacher { seed, .. } => self.teacher_rows(step * batch as u64, batch, *seed),
            Self::Blobs { x, labels, .. } => {
                let n = labels.len();
                if batch >= n {
                    return Ok((x.clone(), Targets::Classes(labels.clone())));
                }
                let idx: Vec<usize> = (0..batch).map(|i| ((step * batch as u64 + i as u64) % n as u64) as usize).collect();
                Ok((x.select(Axis(0), &idx), Targets::Classes(idx.iter().map(|i| labels[*i]).collect())))
            }
        }
    }

    /// Samples the conjugate matrices are estimated on.
    pub fn probe_set(&self, c: &ExperimentConfig) -> RunnerResult<(Array2<f64>, Targets<f64>)> {
        let n = c.probe.eval_samples;
        let eval_seed = EVAL_SEED_OFFSET + c.seed;
        match self {
            Self::Teacher { seed, .. } => {
                if c.probe.holdout {
                    self.teacher_rows(0, n, eval_seed)
                } else {
                    self.teacher_rows(0, n, *seed)
                }
            }
            Self::Blobs { spec, x, labels } => {
                if c.probe.holdout {
                    let (x, l) = class_blob_range(spec, 0, n, eval_seed);
                    Ok((x, Targets::Classes(l)))
                } else {
                    Ok((x.clone(), Targets::Classes(labels.clone())))
                }
            }
        }
    }

    pub fn training_set(&self) -> Option<(&Array2<f64>, &[usize])> {
        match self {
            Self::Blobs { x, labels, .. } => Some((x, labels)),
            Self::Teacher { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub label: String,
    pub seed: u64,
    pub config_sha256: String,
    pub started_unix: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<u64>,
    /// sha256 of each output file at completion.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outputs: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

pub fn read_manifest(dir: &Path) -> RunnerResult<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| RunnerError::io(&path, e))?;
    toml::from_str(&text).map_err(|e| RunnerError::corrupt(&path, e.to_string()))
}

fn write_manifest(dir: &Path, m: &Manifest) -> RunnerResult<()> {
    persist::write_atomic(&dir.join(MANIFEST), &toml::to_string(m).expect("manifest serializes"))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Discard any existing outputs in the run directory.
    pub fresh: bool,
    /// Stop right after the snapshot at this step, as if killed.
    pub halt_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Complete,
    AlreadyComplete,
    Halted { step: u64 },
    Diverged { step: u64, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub dir: PathBuf,
    pub outcome: RunOutcome,
}

/// Runs every grid point of `config` on a pool of `jobs` workers, one
/// single-threaded run per directory `output/<label>`.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize, opts: &RunOptions) -> RunnerResult<Vec<RunSummary>> {
    let grid = config.grid()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| RunnerError::Usage(format!("worker pool: {e}")))?;
    pool.install(|| {
        grid.par_iter()
            .map(|p| {
                let dir = config.output.join(&p.label);
                let outcome = run_single(p, &dir, opts)?;
                Ok(RunSummary { label: p.label.clone(), dir, outcome })
            })
            .collect()
    })
}

/// Numerical blow-ups, and networks so dead that normalized moments have no samples left.
fn is_divergence(e: &CrhError) -> bool {
    matches!(
        e,
        CrhError::NonFinite { .. }
            | CrhError::NonFiniteActivation { .. }
            | CrhError::NonFiniteUpdate { .. }
            | CrhError::Empty(_)
    )
}

struct Run<'a> {
    point: &'a GridPoint,
    dir: &'a Path,
    train: TrainConfig<f64>,
    params: AnalysisParams,
    data: DataSource,
    probe_x: Array2<f64>,
    probe_t: Targets<f64>,
}

impl Run<'_> {
    fn config(&self) -> &ExperimentConfig {
        &self.point.config
    }

    fn due(&self, step: u64) -> bool {
        let every = self.config().probe.snapshot_every;
        step == 0 || step == self.train.steps || (every > 0 && step.is_multiple_of(every))
    }

    fn probe(&self, model: &MlpModel<f64>, optimizer: &OptimizerState<f64>, step: u64, train_loss: f64) -> Result<RunSnapshot, CrhError> {
        let record = model.forward_capture(self.probe_x.view())?;
        let back = model.backward_capture(&record, &self.probe_t, self.train.loss)?;
        let sets = (0..model.depth())
            .map(|l| -> Result<_, CrhError> {
                Ok([
                    conjugate_set(model, &back.tapes, l, MODES[0])?,
                    conjugate_set(model, &back.tapes, l, MODES[1])?,
                ])
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RunSnapshot {
            step,
            train_loss,
            eval_loss: back.loss.value,
            sets,
            model: model.clone(),
            optimizer: optimizer.clone(),
        })
    }

    fn nc_rows(&self, model: &MlpModel<f64>, step: u64) -> RunnerResult<Vec<Vec<String>>> {
        let Some((x, labels)) = self.data.training_set() else {
            return Ok(Vec::new());
        };
        let mode: MomentMode = self.config().probe.moment_mode.into();
        let r = nc_check(model, x.view(), labels, self.train.loss, self.train.loss == Loss::Mse, mode)?;
        let mut row = vec![
            step.to_string(),
            fmt_f(r.accuracy),
            fmt_f(r.nc1),
            fmt_f(r.nc2),
            fmt_opt(r.nc3),
            fmt_f(r.nc4),
            fmt_f(r.zeta),
            fmt_f(r.interpolation_error),
            fmt_opt(r.b_isotropy),
        ];
        row.extend(crhlab_core::crhkit::Relation::ALL.iter().map(|rel| fmt_opt(r.alignments.score(*rel))));
        Ok(vec![row])
    }

    /// Appends the rows of `snap`, then persists it.
    fn record(&self, snap: &RunSnapshot, prev: Option<&RunSnapshot>) -> RunnerResult<()> {
        let layers = analyze(&self.params, snap, prev)?;
        let t = tables(&self.params, &layers);
        let d = self.dir;
        let ah = analysis::alignments_header();
        let ah: Vec<&str> = ah.iter().map(String::as_str).collect();
        persist::append_csv(&d.join(analysis::ALIGNMENTS_CSV), &ah, &t.alignments)?;
        persist::append_csv(&d.join(analysis::PHASES_CSV), &analysis::PHASES_HEADER, &t.phases)?;
        persist::append_csv(&d.join(analysis::FDT_CSV), &analysis::FDT_HEADER, &t.fdt)?;
        persist::append_csv(&d.join(analysis::PAH_CSV), &analysis::PAH_HEADER, &t.pah)?;
        persist::append_csv(&d.join(analysis::STATIONARITY_CSV), &analysis::STATIONARITY_HEADER, &t.stationarity)?;
        let metrics = vec![vec![snap.step.to_string(), fmt_f(snap.train_loss), fmt_f(snap.eval_loss)]];
        persist::append_csv(&d.join(analysis::METRICS_CSV), &METRICS_HEADER, &metrics)?;
        if self.config().task.is_classification() {
            let nc = self.nc_rows(&snap.model, snap.step)?;
            persist::append_csv(&d.join(analysis::NC_CSV), &NC_HEADER, &nc)?;
        }
        persist::write_snapshot(d, snap)?;
        Ok(())
    }

    fn status(&self, state: RunState, step: u64, message: Option<String>) -> RunnerResult<()> {
        persist::write_status(self.dir, &Status { state, last_step: step, message })
    }

    fn diverged(&self, step: u64, e: &CrhError) -> RunnerResult<RunOutcome> {
        let message = e.to_string();
        log::warn!("{}: diverged at step {step}: {message}", self.point.label);
        self.status(RunState::Diverged, step, Some(message.clone()))?;
        Ok(RunOutcome::Diverged { step, message })
    }
}

/// Latest snapshot that loads cleanly; damaged ones are removed.
fn latest_snapshot(dir: &Path, c: &ExperimentConfig) -> RunnerResult<Option<RunSnapshot>> {
    for step in persist::snapshot_steps(dir)?.into_iter().rev() {
        let path = persist::snapshot_dir(dir, step);
        match persist::read_snapshot(&path, c.model.activation.into()) {
            Ok(s) => return Ok(Some(s)),
            Err(e) => {
                log::warn!("discarding unreadable snapshot {}: {e}", path.display());
                fs::remove_dir_all(&path).map_err(|e| RunnerError::io(&path, e))?;
            }
        }
    }
    Ok(None)
}

/// Advisory lock held for the life of a run; the OS drops it if the process dies.
pub const LOCK: &str = ".lock";

fn lock_run_dir(dir: &Path) -> RunnerResult<fs::File> {
    let path = dir.join(LOCK);
    let file = fs::OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(|e| RunnerError::io(&path, e))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(fs::TryLockError::WouldBlock) => {
            Err(RunnerError::Usage(format!("{} is in use by another process", dir.display())))
        }
        Err(fs::TryLockError::Error(e)) => Err(RunnerError::io(&path, e)),
    }
}

pub fn run_single(point: &GridPoint, dir: &Path, opts: &RunOptions) -> RunnerResult<RunOutcome> {
    let c = &point.config;
    c.validate()?;
    fs::create_dir_all(dir).map_err(|e| RunnerError::io(dir, e))?;
    let _lock = lock_run_dir(dir)?;
    if opts.fresh {
        for entry in fs::read_dir(dir).map_err(|e| RunnerError::io(dir, e))? {
            let path = entry.map_err(|e| RunnerError::io(dir, e))?.path();
            if path.file_name() == Some(LOCK.as_ref()) {
                continue;
            }
            let removed = if path.is_dir() { fs::remove_dir_all(&path) } else { fs::remove_file(&path) };
            removed.map_err(|e| RunnerError::io(&path, e))?;
        }
    }
    let config_sha = persist::sha256_hex(c.to_toml().as_bytes());

    let existing = if dir.join(MANIFEST).exists() { Some(read_manifest(dir)?) } else { None };
    if let Some(m) = &existing {
        if m.config_sha256 != config_sha {
            return Err(RunnerError::Usage(format!(
                "{} holds a run of a different config; rerun with --fresh to replace it",
                dir.display()
            )));
        }
        match persist::read_status(dir)? {
            Some(Status { state: RunState::Complete, .. }) => return Ok(RunOutcome::AlreadyComplete),
            Some(Status { state: RunState::Diverged, last_step, message }) => {
                return Ok(RunOutcome::Diverged { step: last_step, message: message.unwrap_or_default() })
            }
            _ => {}
        }
    }

    let data = DataSource::new(c)?;
    let (probe_x, probe_t) = data.probe_set(c)?;
    let run = Run {
        point,
        dir,
        train: c.train_config(),
        params: AnalysisParams::from_config(c),
        data,
        probe_x,
        probe_t,
    };

    let resumed = if existing.is_some() { latest_snapshot(dir, c)? } else { None };
    let mut manifest = existing.unwrap_or_else(|| Manifest {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        label: point.label.clone(),
        seed: c.seed,
        config_sha256: config_sha,
        started_unix: unix_now(),
        finished_unix: None,
        outputs: BTreeMap::new(),
        config: c.clone(),
    });

    let (mut model, mut optimizer, mut prev) = match resumed {
        Some(s) => {
            log::info!("{}: resuming from step {}", point.label, s.step);
            for f in CSV_FILES {
                persist::truncate_csv(&dir.join(f), s.step)?;
            }
            (s.model.clone(), s.optimizer.clone(), s)
        }
        None => {
            for f in CSV_FILES {
                let p = dir.join(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| RunnerError::io(&p, e))?;
                }
            }
            let snaps = dir.join(persist::SNAPSHOTS);
            if snaps.exists() {
                fs::remove_dir_all(&snaps).map_err(|e| RunnerError::io(&snaps, e))?;
            }
            write_manifest(dir, &manifest)?;
            let model = init_mlp::<f64>(&c.dims(), c.model.activation.into(), c.model.bias, c.seed)?;
            let optimizer = OptimizerState::new(&model);
            let snap = match run.probe(&model, &optimizer, 0, f64::NAN) {
                Ok(s) => s,
                Err(e) if is_divergence(&e) => return run.diverged(0, &e),
                Err(e) => return Err(e.into()),
            };
            run.record(&snap, None)?;
            (model, optimizer, snap)
        }
    };
    run.status(RunState::Running, prev.step, None)?;
    if opts.halt_after == Some(prev.step) && prev.step < run.train.steps {
        run.status(RunState::Halted, prev.step, None)?;
        return Ok(RunOutcome::Halted { step: prev.step });
    }

    let mut step = prev.step;
    while step < run.train.steps {
        let (x, t) = run.data.train_batch(step, run.train.batch_size)?;
        let train_loss = match train_step(&mut model, x.view(), &t, &run.train, &mut optimizer) {
            Ok(l) => l,
            Err(e) if is_divergence(&e) => return run.diverged(step, &e),
            Err(e) => return Err(e.into()),
        };
        step += 1;
        if run.due(step) {
            let snap = match run.probe(&model, &optimizer, step, train_loss) {
                Ok(s) => s,
                Err(e) if is_divergence(&e) => return run.diverged(step, &e),
                Err(e) => return Err(e.into()),
            };
            run.record(&snap, Some(&prev))?;
            prev = snap;
            run.status(RunState::Running, step, None)?;
            if opts.halt_after == Some(step) && step < run.train.steps {
                run.status(RunState::Halted, step, None)?;
                return Ok(RunOutcome::Halted { step });
            }
        }
    }

    manifest.finished_unix = Some(unix_now());
    manifest.outputs = CSV_FILES
        .iter()
        .filter(|f| dir.join(f).exists())
        .map(|f| Ok((f.to_string(), persist::file_sha256(&dir.join(f))?)))
        .collect::<RunnerResult<_>>()?;
    write_manifest(dir, &manifest)?;
    run.status(RunState::Complete, step, None)?;
    Ok(RunOutcome::Complete)
}
