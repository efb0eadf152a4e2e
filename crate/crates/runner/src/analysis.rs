//! Per-snapshot reports. Live probes and reloaded snapshots both go through
//! [`analyze`], so regenerated tables match the recorded ones byte for byte.

use crhlab_core::crhkit::{
    classify_phase, fdt_residual, pah_scan, six_alignments, verify_power_law, AlignmentReport, FdtReport, PahTable,
    PhaseLabel, Relation, Side,
};
use crhlab_core::linalg::effective_rank;
use crhlab_core::probes::{stationarity_residual, MomentMode, StationarityResidual};

use crate::config::{ExperimentConfig, FdtEta};
use crate::error::RunnerResult;
use crate::persist::{RunSnapshot, MODES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisParams {
    pub fdt_eta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub rank_tol: f64,
    pub rel_tol: f64,
    pub pah_k: usize,
    pub pah_mode: MomentMode,
    pub mode: MomentMode,
}

impl AnalysisParams {
    pub fn from_config(c: &ExperimentConfig) -> Self {
        let lr = c.train.learning_rate;
        Self {
            fdt_eta: match c.probe.fdt_eta {
                FdtEta::PerSample => lr / c.train.batch_size as f64,
                FdtEta::Step => lr,
            },
            gamma: c.train.weight_decay,
            tau: c.tau,
            rank_tol: c.probe.rank_tol,
            rel_tol: c.tolerances.rel_tol,
            pah_k: c.probe.pah_k,
            pah_mode: c.probe.pah_mode.into(),
            mode: c.probe.moment_mode.into(),
        }
    }
}

/// Everything reported for one layer at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAnalysis {
    pub step: u64,
    pub layer: usize,
    /// Indexed like [`MODES`].
    pub alignments: [AlignmentReport<f64>; 2],
    /// Effective rank of `H_a` and `H_b`, indexed like [`MODES`].
    pub ranks: [(usize, usize); 2],
    pub phase: PhaseLabel<f64>,
    /// Backward then forward balance, on raw moments.
    pub fdt: [FdtReport<f64>; 2],
    pub asymmetry: (f64, f64),
    pub pah: PahTable<f64>,
    pub stationarity: Option<StationarityResidual<f64>>,
}

impl LayerAnalysis {
    pub fn alignment(&self, mode: MomentMode) -> &AlignmentReport<f64> {
        &self.alignments[crate::persist::mode_index(mode)]
    }

    pub fn score(&self, mode: MomentMode, r: Relation) -> Option<f64> {
        self.alignment(mode).score(r)
    }

    pub fn forward_fdt(&self) -> &FdtReport<f64> {
        &self.fdt[1]
    }
}

pub fn analyze(p: &AnalysisParams, snap: &RunSnapshot, prev: Option<&RunSnapshot>) -> RunnerResult<Vec<LayerAnalysis>> {
    let mut out = Vec::with_capacity(snap.sets.len());
    for (layer, pair) in snap.sets.iter().enumerate() {
        let alignments = pair.clone().map(|s| {
            let mut r = six_alignments(&s);
            r.step = snap.step;
            r
        });
        let mut ranks = [(0, 0); 2];
        for (i, s) in pair.iter().enumerate() {
            ranks[i] = (effective_rank(&s.h_a, p.rank_tol)?, effective_rank(&s.h_b, p.rank_tol)?);
        }
        let configured = snap.set(layer, p.mode);
        let mut phase = classify_phase(&alignments[crate::persist::mode_index(p.mode)], p.tau)?;
        if phase.predicted.is_some() {
            match verify_power_law(configured, phase.phase, p.rel_tol) {
                Ok(check) => phase.measured = Some(check),
                Err(e) => log::debug!("step {} layer {layer}: power-law check skipped: {e}", snap.step),
            }
        }
        let raw = snap.set(layer, MomentMode::Raw);
        let fdt = [
            fdt_residual(raw, p.fdt_eta, p.gamma, Side::A)?,
            fdt_residual(raw, p.fdt_eta, p.gamma, Side::B)?,
        ];
        let pah = pah_scan(snap.set(layer, p.pah_mode), p.pah_k)?;
        let stationarity = match prev {
            Some(q) => Some(stationarity_residual(configured, q.set(layer, p.mode))?),
            None => None,
        };
        out.push(LayerAnalysis {
            step: snap.step,
            layer,
            alignments,
            ranks,
            phase,
            fdt,
            asymmetry: (raw.asymmetry_f, raw.asymmetry_b),
            pah,
            stationarity,
        });
    }
    Ok(out)
}

/// Shortest round-trip decimal; empty for missing values.
pub fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v == 0.0 || (1e-4..1e6).contains(&v.abs()) || v.is_infinite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

pub fn relation_columns() -> Vec<String> {
    Relation::ALL.iter().map(|r| r.to_string().to_ascii_lowercase()).collect()
}

pub const ALIGNMENTS_CSV: &str = "alignments.csv";
pub const PHASES_CSV: &str = "phases.csv";
pub const FDT_CSV: &str = "fdt.csv";
pub const PAH_CSV: &str = "pah.csv";
pub const STATIONARITY_CSV: &str = "stationarity.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const NC_CSV: &str = "nc.csv";

pub fn alignments_header() -> Vec<String> {
    let mut h: Vec<String> = ["step", "layer", "mode"].map(String::from).to_vec();
    h.extend(relation_columns());
    h.extend(["cross_f", "cross_b", "rank_ha", "rank_hb"].map(String::from));
    h
}

pub const PHASES_HEADER: [&str; 8] = [
    "step",
    "layer",
    "phase",
    "held",
    "near_redundant",
    "min_power_law_alignment",
    "projector_rank_a",
    "projector_rank_b",
];

pub const FDT_HEADER: [&str; 14] = [
    "step",
    "layer",
    "side",
    "eta",
    "gamma",
    "relative_residual",
    "learning_norm",
    "decay_norm",
    "noise_norm",
    "c_lhs",
    "c_rhs",
    "constant_residual",
    "constant_violation",
    "asymmetry",
];

pub const PAH_HEADER: [&str; 9] = ["step", "layer", "mode", "side", "pair", "exponent", "r2", "pairs", "out_of_band"];

pub const STATIONARITY_HEADER: [&str; 8] = ["step", "layer", "h_a", "g_a", "z_a", "h_b", "g_b", "z_b"];

/// CSV rows of one snapshot, keyed by file name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tables {
    pub alignments: Vec<Vec<String>>,
    pub phases: Vec<Vec<String>>,
    pub fdt: Vec<Vec<String>>,
    pub pah: Vec<Vec<String>>,
    pub stationarity: Vec<Vec<String>>,
}

pub fn tables(p: &AnalysisParams, layers: &[LayerAnalysis]) -> Tables {
    let mut t = Tables::default();
    for l in layers {
        let head = [l.step.to_string(), l.layer.to_string()];
        for (i, mode) in MODES.iter().enumerate() {
            let r = &l.alignments[i];
            let mut row = head.to_vec();
            row.push(mode.name().to_string());
            row.extend(Relation::ALL.iter().map(|rel| fmt_opt(r.score(*rel))));
            row.push(fmt_opt(r.cross_f.map(|s| s.value())));
            row.push(fmt_opt(r.cross_b.map(|s| s.value())));
            row.push(l.ranks[i].0.to_string());
            row.push(l.ranks[i].1.to_string());
            t.alignments.push(row);
        }

        let ph = &l.phase;
        let join = |v: Vec<String>| v.join(" ");
        let mut row = head.to_vec();
        row.push(ph.phase.name());
        row.push(join(ph.held.iter().map(|r| r.to_string()).collect()));
        row.push(join(ph.near_redundant.iter().map(|s| s.suffix().to_string()).collect()));
        match &ph.measured {
            Some(m) => {
                row.push(fmt_f(m.min_alignment()));
                row.push(m.projector_rank[0].to_string());
                row.push(m.projector_rank[1].to_string());
            }
            None => row.extend([String::new(), String::new(), String::new()]),
        }
        t.phases.push(row);

        for f in &l.fdt {
            let mut row = head.to_vec();
            row.push(f.side.direction().to_string());
            row.push(fmt_f(p.fdt_eta));
            row.push(fmt_f(p.gamma));
            row.push(fmt_f(f.relative_residual));
            row.extend(f.term_norms.iter().map(|v| fmt_f(*v)));
            row.push(fmt_f(f.constants.c_lhs));
            row.push(fmt_f(f.constants.c_rhs));
            row.push(fmt_f(f.constants.relative_residual));
            row.push(f.constants.violation.to_string());
            row.push(fmt_f(match f.side {
                Side::A => l.asymmetry.1,
                Side::B => l.asymmetry.0,
            }));
            t.fdt.push(row);
        }

        for e in &l.pah.entries {
            let mut row = head.to_vec();
            row.push(p.pah_mode.name().to_string());
            row.push(e.side.suffix().to_string());
            row.push(e.pair.name().to_string());
            match &e.fit {
                Some(fit) => {
                    row.push(fmt_f(fit.exponent));
                    row.push(fmt_f(fit.r2));
                    row.push(fit.pairs.to_string());
                }
                None => row.extend([String::new(), String::new(), "0".into()]),
            }
            row.push(e.out_of_band.to_string());
            t.pah.push(row);
        }

        if let Some(s) = &l.stationarity {
            let mut row = head.to_vec();
            row.extend(s.values().iter().map(|v| fmt_f(*v)));
            t.stationarity.push(row);
        }
    }
    t
}
