//! Acceptance criteria evaluated on the desk presets. Each criterion yields a
//! verdict with the measured values; [`run_all`] evaluates all eleven.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crhlab::analysis::{FDT_CSV, NC_CSV};
use crhlab::config::{preset, ExperimentConfig};
use crhlab::experiment::{run_experiment, CSV_FILES};
use crhlab::persist::{read_csv, snapshot_steps};
use crhlab::report::{load_run, load_snapshot, rank_alignment_pairs, verify_theorems, LoadedRun};
use crhlab::analysis::{analyze, tables, AnalysisParams, ALIGNMENTS_CSV};
use crhlab::{RunOptions, RunOutcome};
use crhlab_core::crhkit::{spearman, Pair, PhaseId, Relation, Side, PAH_BAND};
use crhlab_core::linalg::{eigh, mat_pow, pearson_alignment, pinv, SymMatrix, DEFAULT_REL_TOL};
use crhlab_core::netcore::{init_mlp, Activation, Loss, Targets};
use crhlab_core::probes::MomentMode;
use crhlab_core::tasks::gaussian_rows;
use crhlab_core::theoremlab::{collapse_instance, nc_check, nfa_check};
use ndarray::Array2;

/// `Ok((pass, detail))`, or an error that prevented measuring.
pub type Outcome = Result<(bool, String), String>;

const CN: MomentMode = MomentMode::CenteredNormalized;
const HG_A: Relation = Relation::new(Side::A, Pair::HG);

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(elapsed: Duration, limit_s: u64) -> (bool, String) {
    (elapsed.as_secs_f64() < limit_s as f64, format!("{:.1}s of {limit_s}s", elapsed.as_secs_f64()))
}

/// Symmetric matrix of rank `rank` built from a deterministic Gaussian stream.
fn low_rank(dim: usize, rank: usize, psd: bool, seed: u64) -> SymMatrix<f64> {
    let g = gaussian_rows::<f64>(dim, 0, dim + 1, seed);
    let basis = eigh(&SymMatrix::gram_rows(g.slice(ndarray::s![..dim, ..]))).unwrap().eigenvectors;
    let lam: Vec<f64> = (0..dim)
        .map(|i| {
            if i >= rank {
                return 0.0;
            }
            let u = g[[dim, i]];
            let mag = 10f64.powf(u.tanh());
            if psd || u.fract().abs() > 0.5 { mag } else { -mag }
        })
        .collect();
    SymMatrix::from_diag(&lam).congruence(basis.view())
}

fn fro(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn c1_linear_algebra() -> Outcome {
    let start = Instant::now();
    let mut worst = [0f64; 3];
    for i in 0..100u64 {
        let dim = 2 + (i as usize * 7) % 31;
        let rank = 1 + (i as usize * 5) % dim;
        let a = low_rank(dim, rank, false, 1000 + i);
        let p = pinv(&a, 1e-10).map_err(err)?;
        let (aa, pp) = (a.as_array(), p.as_array());
        let ap = aa.dot(pp);
        let pa = pp.dot(aa);
        let mp = [
            fro(&(ap.dot(aa) - aa)) / fro(aa).max(1.0),
            fro(&(pa.dot(pp) - pp)) / fro(pp).max(1.0),
            fro(&(&ap - &ap.t())),
            fro(&(&pa - &pa.t())),
        ];
        worst[0] = mp.iter().fold(worst[0], |m, v| m.max(*v));

        let s = low_rank(dim, rank, true, 2000 + i);
        let proj = mat_pow(&s, 0, 1e-10).map_err(err)?;
        let proj = proj.as_array();
        for m in -2..=2 {
            for k in -2..=2 {
                let lhs = mat_pow(&s, m, 1e-10).map_err(err)?.as_array().dot(mat_pow(&s, k, 1e-10).map_err(err)?.as_array());
                let rhs = mat_pow(&s, m + k, 1e-10).map_err(err)?;
                let rhs = proj.dot(rhs.as_array()).dot(proj);
                let e = fro(&(proj.dot(&lhs).dot(proj) - &rhs)) / fro(&rhs).max(1.0);
                worst[1] = worst[1].max(e);
            }
        }

        let d = eigh(&a).map_err(err)?;
        let scale = 1e-9 * dim as f64 * a.max_abs();
        let rec = (d.reconstruct().into_array() - aa).iter().fold(0f64, |m, v| m.max(v.abs()));
        let tr = (d.eigenvalues.iter().sum::<f64>() - a.trace()).abs();
        worst[2] = worst[2].max(rec.max(tr) / scale);
    }
    let (fast, time) = within(start.elapsed(), 10);
    let ok = worst[0] <= 1e-9 && worst[1] <= 1e-8 && worst[2] <= 1.0 && fast;
    Ok((
        ok,
        format!(
            "Moore-Penrose worst {:.1e} (tol 1e-9), group law worst {:.1e} (tol 1e-8), eigh worst {:.2} of tolerance, {time}",
            worst[0], worst[1], worst[2]
        ),
    ))
}

pub fn c2_alignment_metric() -> Outcome {
    let mut self_err = 0f64;
    let mut affine_err = 0f64;
    for i in 0..50u64 {
        let dim = 2 + (i as usize) % 20;
        let a = low_rank(dim, dim, false, 3000 + i);
        self_err = self_err.max((pearson_alignment(&a, &a).map_err(err)?.value() - 1.0).abs());
        let g = gaussian_rows::<f64>(2, 0, 1, 4000 + i);
        let (c, b) = (g[[0, 0]] * 3.0, g[[0, 1]] * 5.0);
        let moved = SymMatrix::new(a.as_array() * c + b).map_err(err)?;
        let got = pearson_alignment(&a, &moved).map_err(err)?.value();
        affine_err = affine_err.max((got - c.signum()).abs());
    }
    let worked: f64 = pearson_alignment(&SymMatrix::from_diag(&[1.0, 0.0]), &SymMatrix::from_diag(&[0.0, 1.0])).map_err(err)?.value();
    let worked_err = (worked + 1.0 / 3.0).abs();
    Ok((
        self_err <= 1e-12 && affine_err <= 1e-10 && worked_err <= 1e-12,
        format!("self {self_err:.1e}, affine {affine_err:.1e}, 2x2 example {worked:.15}"),
    ))
}

pub fn c3_master_theorem(tmp: &Path) -> Outcome {
    let start = Instant::now();
    let rows = verify_theorems(None, None, DEFAULT_REL_TOL, tmp).map_err(err)?;
    let (fast, time) = within(start.elapsed(), 30);
    let failed: Vec<_> = rows.iter().filter(|r| !r.pass).collect();
    let covered = PhaseId::table().iter().all(|p| rows.iter().any(|r| r.phase == *p));
    let detail = match failed.first() {
        Some(f) => format!("first failure {} {} seed {}: {} = {}", f.theorem, f.phase.name(), f.seed, f.relation, f.measured),
        None => "no failures".into(),
    };
    Ok((
        failed.is_empty() && covered && fast,
        format!("{} checks over {} phases x 20 seeds, {} failed ({detail}), {time}", rows.len(), PhaseId::table().len(), failed.len()),
    ))
}

pub fn run_preset(name: &str, out: &Path) -> Result<(Vec<PathBuf>, Duration), String> {
    let mut c = preset(name).map_err(err)?;
    c.output = out.join(name);
    let start = Instant::now();
    let runs = run_experiment(&c, 1, &RunOptions::default()).map_err(err)?;
    let elapsed = start.elapsed();
    for r in &runs {
        if r.outcome != RunOutcome::Complete {
            return Err(format!("{}: {:?}", r.dir.display(), r.outcome));
        }
    }
    Ok((runs.into_iter().map(|r| r.dir).collect(), elapsed))
}

fn output_hg(run: &LoadedRun) -> f64 {
    run.layers.last().and_then(|l| l.score(CN, HG_A)).unwrap_or(f64::NAN)
}

/// Seed medians keyed by the weight decay's bit pattern, which keeps the order.
fn by_gamma(runs: &[LoadedRun]) -> BTreeMap<u64, Vec<&LoadedRun>> {
    let mut m: BTreeMap<u64, Vec<&LoadedRun>> = BTreeMap::new();
    for r in runs {
        m.entry(r.config.train.weight_decay.to_bits()).or_default().push(r);
    }
    m
}

pub fn c4_gamma_monotone(runs: &[LoadedRun], elapsed: Duration) -> Outcome {
    let meds: Vec<(f64, f64)> = by_gamma(runs)
        .into_iter()
        .map(|(g, rs)| (f64::from_bits(g), median(rs.iter().map(|r| output_hg(r)).collect())))
        .collect();
    let increasing = meds.len() == 3 && meds.windows(2).all(|w| w[1].1 > w[0].1);
    let (fast, time) = within(elapsed, 600);
    let list: Vec<_> = meds.iter().map(|(g, a)| format!("γ={g:e}: {a:.3}")).collect();
    Ok((increasing && fast, format!("median output-layer α_HG(a) {}; sweep {time}", list.join(", "))))
}

pub fn c5_gradual(runs: &[LoadedRun]) -> Outcome {
    let group = by_gamma(runs).remove(&1e-4f64.to_bits()).ok_or("no γ=1e-4 runs")?;
    let depth = group[0].layers.len();
    let meds: Vec<f64> = (0..depth)
        .map(|l| median(group.iter().map(|r| r.layers[l].score(CN, HG_A).unwrap_or(f64::NAN)).collect()))
        .collect();
    let idx: Vec<f64> = (0..depth).map(|l| l as f64).collect();
    let rho = spearman(&idx, &meds).map_err(err)?;
    let list: Vec<_> = meds.iter().map(|a| format!("{a:.3}")).collect();
    Ok((rho > 0.0, format!("γ=1e-4 per-layer median α_HG(a) [{}], spearman {rho:.3}", list.join(", "))))
}

pub fn c6_rank_alignment(runs: &[LoadedRun]) -> Outcome {
    let pairs = rank_alignment_pairs(runs);
    let (r, a): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let rho = spearman(&r, &a).map_err(err)?;
    Ok((rho < 0.0, format!("{} (run, layer) entries, spearman(rank H_a, α_HG(a)) = {rho:.3}", pairs.len())))
}

pub fn c7_pah_band(dir: &Path) -> Outcome {
    let run = load_run(dir).map_err(err)?;
    let mut fits = Vec::new();
    for l in &run.layers {
        if let Some(f) = l.pah.entry(Side::B, Pair::HG).and_then(|e| e.fit) {
            fits.push((l.layer, f.exponent, f.r2));
        }
    }
    let strong: Vec<_> = fits.iter().filter(|f| f.2 > 0.8).collect();
    let bad: Vec<_> = strong.iter().filter(|f| f.1 < PAH_BAND.0 || f.1 > PAH_BAND.1).collect();
    let list: Vec<_> = fits.iter().map(|(l, e, r2)| format!("L{l} e={e:.3} r²={r2:.3}")).collect();
    Ok((
        !strong.is_empty() && bad.is_empty(),
        format!("{} of {} HG_b fits with r²>0.8, {} outside [1/4, 4]: {}", strong.len(), fits.len(), bad.len(), list.join("; ")),
    ))
}

/// Median over layers of the forward relative residual at `step`.
fn forward_residual(dir: &Path, step: u64) -> Result<f64, String> {
    let (header, rows) = read_csv(&dir.join(FDT_CSV)).map_err(err)?;
    let col = |n: &str| header.iter().position(|h| h == n).ok_or(format!("no {n} column"));
    let (s, side, rel) = (col("step")?, col("side")?, col("relative_residual")?);
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r[s] == step.to_string() && r[side] == "forward")
        .map(|r| r[rel].parse().unwrap_or(f64::NAN))
        .collect();
    if vals.is_empty() {
        return Err(format!("{}: no forward rows at step {step}", dir.display()));
    }
    Ok(median(vals))
}

pub fn c8_fdt(runs: &[LoadedRun]) -> Outcome {
    let mut decreasing = true;
    let mut small = true;
    let mut parts = Vec::new();
    for r in runs {
        let steps = r.config.train.steps;
        let early = forward_residual(&r.dir, steps / 10)?;
        let last = forward_residual(&r.dir, steps)?;
        decreasing &= last < early;
        if r.config.train.weight_decay == 1e-3 {
            small &= last < 0.5;
        }
        parts.push(format!("{} {early:.3}→{last:.3}", r.label));
    }
    Ok((decreasing && small, format!("median forward residual at 10% → final: {}", parts.join(", "))))
}

pub fn c9_collapse(blobs: &Path, elapsed: Duration) -> Outcome {
    let (model, x, labels) = collapse_instance::<f64>(4, 10, 0.8, 5, 17).map_err(err)?;
    let r = nc_check(&model, x.view(), &labels, Loss::Mse, true, MomentMode::Raw).map_err(err)?;
    let back: Vec<f64> = Relation::ALL.iter().filter(|rel| rel.side == Side::A).map(|rel| r.alignments.score(*rel).unwrap_or(f64::NAN)).collect();
    // Class means are averages of identical rows, so NC1 is zero up to rounding.
    let exact = r.nc1 <= 1e-24
        && r.nc2 <= 1e-10
        && r.nc3.is_some_and(|v| (v - 1.0).abs() <= 1e-12)
        && back.iter().all(|a| (a - 1.0).abs() <= 1e-12);

    let (header, rows) = read_csv(&blobs.join(NC_CSV)).map_err(err)?;
    let last = rows.last().ok_or("empty nc.csv")?;
    let get = |n: &str| -> Result<f64, String> {
        let i = header.iter().position(|h| h == n).ok_or(format!("no {n} column"))?;
        last[i].parse().map_err(err)
    };
    let (acc, nc1, nc2) = (get("accuracy")?, get("nc1")?, get("nc2")?);
    let trained: Vec<f64> = ["hg_a", "hz_a", "gz_a"].iter().map(|n| get(n)).collect::<Result<_, _>>()?;
    let (fast, time) = within(elapsed, 180);
    let learned = acc == 1.0 && nc1 < 0.1 && nc2 < 0.15 && trained.iter().all(|a| *a > 0.85) && fast;
    Ok((
        exact && learned,
        format!(
            "construction NC1 {:.1e} NC2 {:.1e} NC3 {:.12} back α min {:.12}; blobs acc {acc} NC1 {nc1:.3} NC2 {nc2:.3} back α [{:.3}, {:.3}, {:.3}], {time}",
            r.nc1,
            r.nc2,
            r.nc3.unwrap_or(f64::NAN),
            back.iter().fold(f64::INFINITY, |m, v| m.min(*v)),
            trained[0],
            trained[1],
            trained[2]
        ),
    ))
}

pub fn c10_enfa(fc2: &Path) -> Outcome {
    let model = init_mlp::<f64>(&[12, 16, 16, 8], Activation::Relu, true, 5).map_err(err)?;
    let x = gaussian_rows::<f64>(12, 0, 400, 6);
    let y = gaussian_rows::<f64>(8, 0, 400, 7);
    let b = SymMatrix::<f64>::identity(8).scaled(2.5);
    let mut gap = 0f64;
    for layer in 0..model.depth() {
        let r = nfa_check(&model, x.view(), &Targets::Regression(y.clone()), Loss::Mse, layer, Some(&b)).map_err(err)?;
        let (n, e) = (r.alpha_nfa.ok_or("no nfa score")?, r.alpha_enfa_backward.ok_or("no enfa score")?);
        gap = gap.max((n - e).abs());
    }

    let run = load_run(fc2).map_err(err)?;
    let hidden = &run.layers[1..];
    let mut meds: Vec<(Relation, f64)> = Relation::ALL
        .iter()
        .map(|rel| (*rel, median(hidden.iter().map(|l| l.score(CN, *rel).unwrap_or(f64::NAN)).collect())))
        .collect();
    meds.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: Vec<Relation> = meds[..2].iter().map(|m| m.0).collect();
    let expected = [Relation::new(Side::B, Pair::HZ), Relation::new(Side::A, Pair::GZ)];
    let matched = expected.iter().all(|e| top.contains(e));
    let list: Vec<_> = meds.iter().map(|(r, v)| format!("{r} {v:.3}")).collect();
    Ok((
        gap <= 1e-8 && matched,
        format!("B∝I gap {gap:.1e}; fc2 γ=1e-5 layer-median scores {}", list.join(", ")),
    ))
}

fn short_fc1(out: &Path) -> Result<ExperimentConfig, String> {
    let mut c = preset("fc1-desk").map_err(err)?;
    c.sweep = Default::default();
    c.train.weight_decay = 1e-3;
    c.train.steps = 600;
    c.probe.snapshot_every = 100;
    c.probe.eval_samples = 600;
    c.output = out.to_path_buf();
    Ok(c)
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    CSV_FILES
        .iter()
        .filter(|f| dir.join(f).exists())
        .map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap_or_default()))
        .collect()
}

pub fn c11_determinism(tmp: &Path) -> Outcome {
    let once = |name: &str, opts: RunOptions| -> Result<PathBuf, String> {
        let c = short_fc1(&tmp.join(name))?;
        let r = run_experiment(&c, 1, &opts).map_err(err)?;
        Ok(r[0].dir.clone())
    };
    let a = once("a", RunOptions::default())?;
    let b = once("b", RunOptions::default())?;
    let identical = csv_bytes(&a) == csv_bytes(&b) && !csv_bytes(&a).is_empty();

    let c = short_fc1(&tmp.join("a"))?;
    let point = &c.grid().map_err(err)?[0].config;
    let params = AnalysisParams::from_config(point);
    let steps = snapshot_steps(&a).map_err(err)?;
    let (_, rows) = read_csv(&a.join(ALIGNMENTS_CSV)).map_err(err)?;
    let mut roundtrip = true;
    for w in steps.windows(2) {
        let prev = load_snapshot(&a, point, w[0]).map_err(err)?;
        let snap = load_snapshot(&a, point, w[1]).map_err(err)?;
        let t = tables(&params, &analyze(&params, &snap, Some(&prev)).map_err(err)?);
        let recorded: Vec<_> = rows.iter().filter(|r| r[0] == w[1].to_string()).cloned().collect();
        roundtrip &= recorded == t.alignments;
    }

    once("c", RunOptions { fresh: false, halt_after: Some(300) })?;
    let resumed = once("c", RunOptions::default())?;
    let resume_ok = csv_bytes(&a) == csv_bytes(&resumed);
    Ok((
        identical && roundtrip && resume_ok,
        format!("byte-identical {identical}, round trip over {} snapshots {roundtrip}, resume at 300 {resume_ok}", steps.len()),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub criterion: u32,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(criterion: u32, outcome: Outcome) -> Self {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        Self { criterion, pass, detail }
    }
}

/// Runs every criterion with scratch outputs under `root`, calling `each` as
/// verdicts arrive. The returned verdicts are ordered by criterion.
pub fn run_all(root: &Path, mut each: impl FnMut(&Verdict)) -> Vec<Verdict> {
    let mut out = Vec::new();
    let mut report = |n: u32, outcome: Outcome| {
        let v = Verdict::new(n, outcome);
        each(&v);
        out.push(v);
    };

    report(1, c1_linear_algebra());
    report(2, c2_alignment_metric());
    report(3, c3_master_theorem(root));

    let fc1 = run_preset("fc1-desk", root)
        .and_then(|(dirs, t)| dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>().map(|r| (r, t)).map_err(err));
    match fc1 {
        Ok((runs, elapsed)) => {
            report(4, c4_gamma_monotone(&runs, elapsed));
            report(5, c5_gradual(&runs));
            report(6, c6_rank_alignment(&runs));
            report(8, c8_fdt(&runs));
        }
        Err(e) => [4, 5, 6, 8].into_iter().for_each(|n| report(n, Err(e.clone()))),
    }
    report(7, run_preset("tanh-desk", root).and_then(|(d, _)| c7_pah_band(&d[0])));
    report(9, run_preset("blobs", root).and_then(|(d, t)| c9_collapse(&d[0], t)));
    report(10, run_preset("fc2-desk", root).and_then(|(d, _)| c10_enfa(&d[0])));
    report(11, c11_determinism(&root.join("determinism")));

    out.sort_by_key(|v| v.criterion);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_lists() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn generated_matrices_have_requested_rank() {
        for (dim, rank) in [(5, 2), (12, 12), (30, 7)] {
            let a = low_rank(dim, rank, true, 9);
            let d = eigh(&a).unwrap();
            let top = d.eigenvalues[0];
            assert_eq!(d.eigenvalues.iter().filter(|v| **v > 1e-9 * top).count(), rank);
        }
    }
}
