//! Cross-run summaries, phase scans, theorem verification and plot scripts.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crhlab_core::crhkit::{classify_phase, spearman, PhaseId, Relation, Side};
use crhlab_core::linalg::eigh;
use crhlab_core::probes::MomentMode;
use crhlab_core::theoremlab::{check_master, synth_phase_instance};

use crate::analysis::{analyze, fmt_f, fmt_opt, relation_columns, AnalysisParams, LayerAnalysis, ALIGNMENTS_CSV};
use crate::config::{ExperimentConfig, TaskConfig};
use crate::error::{RunnerError, RunnerResult};
use crate::experiment::read_manifest;
use crate::persist::{self, RunSnapshot};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const RANK_STATS_CSV: &str = "rank_stats.csv";
pub const THEOREMS_CSV: &str = "theorems.csv";
pub const PHASE_SCAN_CSV: &str = "phase_scan.csv";

/// A completed run loaded back from disk.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub label: String,
    pub config: ExperimentConfig,
    pub snapshot: RunSnapshot,
    pub layers: Vec<LayerAnalysis>,
}

impl LoadedRun {
    pub fn phi(&self) -> Option<f64> {
        match self.config.task {
            TaskConfig::MixedTeacher { phi, .. } => Some(phi),
            _ => None,
        }
    }

    fn sort_key(&self) -> (f64, usize, usize, usize, f64, u64) {
        let c = &self.config;
        (
            c.train.weight_decay,
            c.train.batch_size,
            c.model.width,
            c.model.depth,
            self.phi().unwrap_or(0.0),
            c.seed,
        )
    }
}

pub fn load_snapshot(dir: &Path, config: &ExperimentConfig, step: u64) -> RunnerResult<RunSnapshot> {
    persist::read_snapshot(&persist::snapshot_dir(dir, step), config.model.activation.into())
}

/// Loads the final snapshot of a run and recomputes its reports.
pub fn load_run(dir: &Path) -> RunnerResult<LoadedRun> {
    let manifest = read_manifest(dir)?;
    let config = manifest.config;
    let steps = persist::snapshot_steps(dir)?;
    let last = *steps.last().ok_or_else(|| RunnerError::corrupt(dir, "no snapshots"))?;
    let snapshot = load_snapshot(dir, &config, last)?;
    let prev = match steps.len() {
        n if n >= 2 => Some(load_snapshot(dir, &config, steps[n - 2])?),
        _ => None,
    };
    let layers = analyze(&AnalysisParams::from_config(&config), &snapshot, prev.as_ref())?;
    Ok(LoadedRun { dir: dir.to_path_buf(), label: manifest.label, config, snapshot, layers })
}

pub fn summary_header() -> Vec<String> {
    let mut h: Vec<String> = ["run", "weight_decay", "batch_size", "width", "depth", "phi", "seed", "step", "layer", "mode"]
        .map(String::from)
        .to_vec();
    h.extend(relation_columns());
    h.extend(
        ["phase", "rank_ha", "rank_hb", "pah_hg_b", "pah_hg_b_r2", "fdt_forward", "fdt_backward", "eval_loss"]
            .map(String::from),
    );
    h
}

fn summary_rows(run: &LoadedRun) -> Vec<Vec<String>> {
    let c = &run.config;
    let mode: MomentMode = c.probe.moment_mode.into();
    let idx = persist::mode_index(mode);
    run.layers
        .iter()
        .map(|l| {
            let mut row = vec![
                run.label.clone(),
                fmt_f(c.train.weight_decay),
                c.train.batch_size.to_string(),
                c.model.width.to_string(),
                c.model.depth.to_string(),
                fmt_opt(run.phi()),
                c.seed.to_string(),
                l.step.to_string(),
                l.layer.to_string(),
                mode.name().to_string(),
            ];
            row.extend(Relation::ALL.iter().map(|r| fmt_opt(l.score(mode, *r))));
            let hg_b = l.pah.entry(Side::B, crhlab_core::crhkit::Pair::HG).and_then(|e| e.fit);
            row.extend([
                l.phase.phase.name(),
                l.ranks[idx].0.to_string(),
                l.ranks[idx].1.to_string(),
                fmt_opt(hg_b.map(|f| f.exponent)),
                fmt_opt(hg_b.map(|f| f.r2)),
                fmt_f(l.fdt[1].relative_residual),
                fmt_f(l.fdt[0].relative_residual),
                fmt_f(run.snapshot.eval_loss),
            ]);
            row
        })
        .collect()
}

/// Spearman correlation of the effective rank of raw `H_a` with the backward
/// alignment in the configured mode, over every (run, layer).
pub fn rank_alignment_pairs(runs: &[LoadedRun]) -> Vec<(f64, f64)> {
    let mut pairs = Vec::new();
    for run in runs {
        let mode: MomentMode = run.config.probe.moment_mode.into();
        for l in &run.layers {
            if let Some(a) = l.score(mode, Relation::ALL[0]) {
                pairs.push((l.ranks[persist::mode_index(MomentMode::Raw)].0 as f64, a));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub summary: PathBuf,
    pub rows: usize,
    pub rank_spearman: Option<f64>,
    pub files: Vec<PathBuf>,
}

/// Writes the summary table, rank statistics, plot data and gnuplot scripts
/// for `dirs` into `out`.
pub fn emit_report(dirs: &[PathBuf], out: &Path) -> RunnerResult<ReportOutput> {
    if dirs.is_empty() {
        return Err(RunnerError::Usage("report needs at least one run directory".into()));
    }
    let mut runs = dirs.iter().map(|d| load_run(d)).collect::<RunnerResult<Vec<_>>>()?;
    runs.sort_by(|a, b| {
        a.sort_key()
            .partial_cmp(&b.sort_key())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.label.cmp(&b.label))
    });
    fs::create_dir_all(out).map_err(|e| RunnerError::io(out, e))?;
    let mut files = Vec::new();

    let rows: Vec<Vec<String>> = runs.iter().flat_map(summary_rows).collect();
    let summary = out.join(SUMMARY_CSV);
    if summary.exists() {
        fs::remove_file(&summary).map_err(|e| RunnerError::io(&summary, e))?;
    }
    let header = summary_header();
    persist::append_csv(&summary, &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    files.push(summary.clone());

    let pairs = rank_alignment_pairs(&runs);
    let (rx, ay): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let rank_spearman = spearman(&rx, &ay).ok();
    let rank_path = out.join(RANK_STATS_CSV);
    persist::write_text(
        &rank_path,
        &format!("pairs,spearman_rank_vs_hg_a\n{},{}\n", pairs.len(), fmt_opt(rank_spearman)),
    )?;
    files.push(rank_path);

    files.extend(plot_files(&runs, out)?);
    Ok(ReportOutput { summary, rows: rows.len(), rank_spearman, files })
}

fn plot_files(runs: &[LoadedRun], out: &Path) -> RunnerResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut spectra_plots = String::from("set logscale xy\nset xlabel 'eigenvalue of G'\nset ylabel 'eigenvalue of H'\n");
    for (i, run) in runs.iter().enumerate() {
        for (layer, pair) in run.snapshot.sets.iter().enumerate() {
            let set = &pair[persist::mode_index(MomentMode::Raw)];
            let mut text = String::from("# rank h_a g_a z_a h_b g_b z_b\n");
            let spec = |m: &crhlab_core::linalg::SymMatrix<f64>| eigh(m).map(|d| d.eigenvalues.to_vec());
            let s = [
                spec(&set.h_a)?,
                spec(&set.g_a)?,
                spec(&set.z_a)?,
                spec(&set.h_b)?,
                spec(&set.g_b)?,
                spec(&set.z_b)?,
            ];
            let n = s.iter().map(Vec::len).max().unwrap_or(0);
            for k in 0..n {
                write!(text, "{k}").expect("string write");
                for v in &s {
                    let cell = v.get(k).map(|x| fmt_f(*x)).unwrap_or_else(|| "NaN".into());
                    write!(text, " {cell}").expect("string write");
                }
                text.push('\n');
            }
            let name = format!("spectra-{i}-L{layer}.dat");
            persist::write_text(&out.join(&name), &text)?;
            files.push(out.join(&name));
            writeln!(
                spectra_plots,
                "set title '{} layer {layer}'\nplot '{name}' using 6:5 title 'H_b vs G_b', '' using 3:2 title 'H_a vs G_a'\npause -1",
                run.label
            )
            .expect("string write");
        }
    }
    let p = out.join("spectra.gp");
    persist::write_text(&p, &spectra_plots)?;
    files.push(p);

    let mut step_plot = String::from("set datafile separator ','\nset xlabel 'step'\nset ylabel 'alpha HG_a'\n");
    for run in runs {
        let csv = run.dir.join(ALIGNMENTS_CSV);
        let mode = run.config.probe.moment_mode;
        let mode: MomentMode = mode.into();
        for l in &run.layers {
            writeln!(
                step_plot,
                "plot '{}' using 1:(($2=={} && strcol(3) eq '{}') ? $4 : 1/0) title '{} L{}'\npause -1",
                csv.display(),
                l.layer,
                mode.name(),
                run.label,
                l.layer
            )
            .expect("string write");
        }
    }
    let p = out.join("alpha_vs_step.gp");
    persist::write_text(&p, &step_plot)?;
    files.push(p);

    let mut gamma = String::from("# weight_decay layer hg_a hz_a gz_a hg_b hz_b gz_b\n");
    for run in runs {
        let mode: MomentMode = run.config.probe.moment_mode.into();
        for l in &run.layers {
            write!(gamma, "{} {}", fmt_f(run.config.train.weight_decay), l.layer).expect("string write");
            for r in Relation::ALL {
                write!(gamma, " {}", l.score(mode, r).map(fmt_f).unwrap_or_else(|| "NaN".into())).expect("string write");
            }
            gamma.push('\n');
        }
    }
    let p = out.join("alpha_vs_gamma.dat");
    persist::write_text(&p, &gamma)?;
    files.push(p);
    let p = out.join("alpha_vs_gamma.gp");
    persist::write_text(
        &p,
        "set logscale x\nset xlabel 'weight decay'\nset ylabel 'alpha HG_a'\nplot 'alpha_vs_gamma.dat' using 1:3 with points title 'HG_a'\npause -1\n",
    )?;
    files.push(p);
    Ok(files)
}

/// Reclassifies every snapshot of a run at threshold `tau`.
pub fn phase_scan(dir: &Path, tau: Option<f64>) -> RunnerResult<Vec<Vec<String>>> {
    let manifest = read_manifest(dir)?;
    let config = manifest.config;
    let mode: MomentMode = config.probe.moment_mode.into();
    let tau = tau.unwrap_or(config.tau);
    let mut rows = Vec::new();
    for step in persist::snapshot_steps(dir)? {
        let snap = load_snapshot(dir, &config, step)?;
        for layer in 0..snap.sets.len() {
            let mut report = crhlab_core::crhkit::six_alignments(snap.set(layer, mode));
            report.step = step;
            let label = classify_phase(&report, tau)?;
            let mut row = vec![step.to_string(), layer.to_string(), label.phase.name()];
            row.push(label.held.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" "));
            row.extend(Relation::ALL.iter().map(|r| fmt_opt(report.score(*r))));
            rows.push(row);
        }
    }
    let mut header: Vec<String> = ["step", "layer", "phase", "held"].map(String::from).to_vec();
    header.extend(relation_columns());
    let path = dir.join(PHASE_SCAN_CSV);
    if path.exists() {
        fs::remove_file(&path).map_err(|e| RunnerError::io(&path, e))?;
    }
    persist::append_csv(&path, &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    Ok(rows)
}

pub const THEOREM_DIMS: (usize, usize) = (12, 12);
pub const THEOREM_SEEDS: u64 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremRow {
    pub theorem: String,
    pub phase: PhaseId,
    pub seed: u64,
    pub relation: String,
    pub measured: f64,
    pub pass: bool,
}

/// Synthetic instances of each phase, checked against every predicted
/// relation; rows are written to `out/theorems.csv`.
pub fn verify_theorems(phase: Option<PhaseId>, seed: Option<u64>, rel_tol: f64, out: &Path) -> RunnerResult<Vec<TheoremRow>> {
    let phases = match phase {
        Some(p) => vec![p],
        None => PhaseId::table(),
    };
    let seeds: Vec<u64> = match seed {
        Some(s) => vec![s],
        None => (0..THEOREM_SEEDS).collect(),
    };
    let mut rows = Vec::new();
    for p in &phases {
        for s in &seeds {
            let inst = synth_phase_instance::<f64>(*p, THEOREM_DIMS.0, THEOREM_DIMS.1, *s)?;
            let check = check_master(&inst, rel_tol)?;
            for c in &check.checks {
                rows.push(TheoremRow {
                    theorem: format!("master.{}", c.part),
                    phase: *p,
                    seed: *s,
                    relation: c.relation.clone(),
                    measured: c.measured,
                    pass: c.pass,
                });
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| RunnerError::io(out, e))?;
    let path = out.join(THEOREMS_CSV);
    if path.exists() {
        fs::remove_file(&path).map_err(|e| RunnerError::io(&path, e))?;
    }
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.theorem.clone(),
                r.phase.name(),
                r.seed.to_string(),
                r.relation.clone(),
                fmt_f(r.measured),
                r.pass.to_string(),
            ]
        })
        .collect();
    persist::append_csv(&path, &["theorem", "phase", "seed", "relation", "measured", "pass"], &records)?;
    Ok(rows)
}
