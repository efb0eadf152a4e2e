//! Alignment scores, balance residuals, phase classification and spectral
//! exponent checks on top of a [`ConjugateSet`].

use std::fmt;

use crate::error::{CrhError, Result};
use crate::linalg::{eigh, mat_pow, pearson_alignment, power_law_fit, AlignmentScore, PowerLawFit, SymMatrix};
use crate::probes::{ConjugateSet, MomentMode};
use crate::scalar::Real;

/// `a` is the input side of a layer (backward relations), `b` the output side
/// (forward relations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::A, Side::B];

    pub fn suffix(self) -> &'static str {
        match self {
            Side::A => "a",
            Side::B => "b",
        }
    }

    pub fn direction(self) -> &'static str {
        match self {
            Side::A => "backward",
            Side::B => "forward",
        }
    }
}

/// One of the three conjugate matrices on a side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mat {
    H,
    Z,
    G,
}

impl Mat {
    pub fn symbol(self) -> &'static str {
        match self {
            Mat::H => "H",
            Mat::Z => "Z",
            Mat::G => "G",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pair {
    /// representation–gradient
    HG,
    /// representation–weight
    HZ,
    /// gradient–weight
    GZ,
}

impl Pair {
    pub const ALL: [Pair; 3] = [Pair::HG, Pair::HZ, Pair::GZ];

    pub fn mats(self) -> (Mat, Mat) {
        match self {
            Pair::HG => (Mat::H, Mat::G),
            Pair::HZ => (Mat::H, Mat::Z),
            Pair::GZ => (Mat::G, Mat::Z),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pair::HG => "HG",
            Pair::HZ => "HZ",
            Pair::GZ => "GZ",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Relation {
    pub side: Side,
    pub pair: Pair,
}

impl Relation {
    /// `HG_a, HZ_a, GZ_a, HG_b, HZ_b, GZ_b`, the column order of every report.
    pub const ALL: [Relation; 6] = [
        Relation::new(Side::A, Pair::HG),
        Relation::new(Side::A, Pair::HZ),
        Relation::new(Side::A, Pair::GZ),
        Relation::new(Side::B, Pair::HG),
        Relation::new(Side::B, Pair::HZ),
        Relation::new(Side::B, Pair::GZ),
    ];

    pub const fn new(side: Side, pair: Pair) -> Self {
        Self { side, pair }
    }

    fn slot(self) -> usize {
        let s = match self.side {
            Side::A => 0,
            Side::B => 3,
        };
        s + match self.pair {
            Pair::HG => 0,
            Pair::HZ => 1,
            Pair::GZ => 2,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.pair.name(), self.side.suffix())
    }
}

pub fn side_matrix<T: Real>(set: &ConjugateSet<T>, side: Side, m: Mat) -> &SymMatrix<T> {
    match (side, m) {
        (Side::A, Mat::H) => &set.h_a,
        (Side::A, Mat::Z) => &set.z_a,
        (Side::A, Mat::G) => &set.g_a,
        (Side::B, Mat::H) => &set.h_b,
        (Side::B, Mat::Z) => &set.z_b,
        (Side::B, Mat::G) => &set.g_b,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport<T> {
    pub layer_index: usize,
    pub step: u64,
    /// In [`Relation::ALL`] order; `None` when a matrix is degenerate.
    pub scores: [Option<AlignmentScore<T>>; 6],
    /// `α(sym E[g_b h_bᵀ], W'W'ᵀ)`, raw-mode sets only.
    pub cross_f: Option<AlignmentScore<T>>,
    /// `α(sym E[g_a h_aᵀ], W'ᵀW')`, raw-mode sets only.
    pub cross_b: Option<AlignmentScore<T>>,
}

impl<T: Real> AlignmentReport<T> {
    pub fn score(&self, r: Relation) -> Option<T> {
        self.scores[r.slot()].map(|s| s.value())
    }

    pub fn set_score(&mut self, r: Relation, v: Option<T>) {
        self.scores[r.slot()] = v.map(AlignmentScore::new);
    }

    /// A report with the given scores in [`Relation::ALL`] order.
    pub fn from_scores(layer_index: usize, step: u64, scores: [Option<T>; 6]) -> Self {
        Self {
            layer_index,
            step,
            scores: scores.map(|s| s.map(AlignmentScore::new)),
            cross_f: None,
            cross_b: None,
        }
    }
}

pub fn six_alignments<T: Real>(set: &ConjugateSet<T>) -> AlignmentReport<T> {
    let mut scores = [None; 6];
    for r in Relation::ALL {
        let (x, y) = r.pair.mats();
        let a = side_matrix(set, r.side, x);
        let b = side_matrix(set, r.side, y);
        match pearson_alignment(a, b) {
            Ok(s) => scores[r.slot()] = Some(s),
            Err(e) => log::debug!("layer {} {r}: {e}", set.layer_index),
        }
    }
    let (cross_f, cross_b) = if set.mode == MomentMode::Raw {
        (
            pearson_alignment(&set.cross_f, &set.z_b).ok(),
            pearson_alignment(&set.cross_b, &set.z_a).ok(),
        )
    } else {
        (None, None)
    };
    AlignmentReport {
        layer_index: set.layer_index,
        step: 0,
        scores,
        cross_f,
        cross_b,
    }
}

/// Nonnegative fit of `Z + c·X = c'·Y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantFit<T> {
    /// Coefficient on `X` (c₁ forward, c₃ backward).
    pub c_lhs: T,
    /// Coefficient on `Y` (c₂ forward, c₄ backward).
    pub c_rhs: T,
    /// Unconstrained least-squares solution.
    pub unconstrained: (T, T),
    /// `‖c'Y − cX − Z‖_F / ‖Z‖_F` at the nonnegative solution.
    pub relative_residual: T,
    /// True when the unconstrained optimum has a negative coefficient.
    pub violation: bool,
}

/// Minimizes `‖x₁u + x₂v − t‖²` over `x ≥ 0` by enumerating active sets.
fn nnls2<T: Real>(u: &[T], v: &[T], t: &[T]) -> ((T, T), (T, T), T) {
    let dot = |p: &[T], q: &[T]| p.iter().zip(q).map(|(a, b)| *a * *b).sum::<T>();
    let (uu, vv, uv) = (dot(u, u), dot(v, v), dot(u, v));
    let (ut, vt, tt) = (dot(u, t), dot(v, t), dot(t, t));
    let objective = |x1: T, x2: T| {
        tt - (x1 * ut + x2 * vt) * T::lit(2.0) + x1 * x1 * uu + x2 * x2 * vv + x1 * x2 * uv * T::lit(2.0)
    };
    let det = uu * vv - uv * uv;
    let free = if det.abs() > T::epsilon() * uu * vv {
        ((ut * vv - vt * uv) / det, (vt * uu - ut * uv) / det)
    } else if uu > T::zero() {
        (ut / uu, T::zero())
    } else if vv > T::zero() {
        (T::zero(), vt / vv)
    } else {
        (T::zero(), T::zero())
    };
    let mut candidates = vec![(T::zero(), T::zero())];
    if free.0 >= T::zero() && free.1 >= T::zero() {
        candidates.push(free);
    }
    if uu > T::zero() {
        candidates.push(((ut / uu).max(T::zero()), T::zero()));
    }
    if vv > T::zero() {
        candidates.push((T::zero(), (vt / vv).max(T::zero())));
    }
    let best = candidates
        .into_iter()
        .map(|(a, b)| (a, b, objective(a, b)))
        .fold(None::<(T, T, T)>, |acc, c| match acc {
            Some(a) if a.2 <= c.2 => Some(a),
            _ => Some(c),
        })
        .expect("at least one candidate");
    ((best.0, best.1), free, best.2.max(T::zero()))
}

/// Fits `Z + c·X = c'·Y` with `c, c' ≥ 0`.
pub fn fit_constants<T: Real>(z: &SymMatrix<T>, x: &SymMatrix<T>, y: &SymMatrix<T>) -> ConstantFit<T> {
    let zv = z.row_major();
    let u: Vec<T> = x.row_major().into_iter().map(|v| -v).collect();
    let v = y.row_major();
    let ((c_lhs, c_rhs), free, obj) = nnls2(&u, &v, &zv);
    let zn = z.frobenius();
    let relative_residual = if zn > T::zero() { obj.sqrt() / zn } else { obj.sqrt() };
    ConstantFit {
        c_lhs,
        c_rhs,
        unconstrained: free,
        relative_residual,
        violation: free.0 < T::zero() || free.1 < T::zero(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdtReport<T> {
    pub side: Side,
    pub residual: SymMatrix<T>,
    /// `‖R‖_F / max(‖learning‖, ‖regularization‖, ‖noise‖)`.
    pub relative_residual: T,
    /// Frobenius norms of the learning, regularization and noise terms.
    pub term_norms: [T; 3],
    pub constants: ConstantFit<T>,
}

/// Stationarity balance of the second moments under SGD with weight decay.
///
/// Forward: `R = 2 z_b sym E[g_b h_bᵀ] − 2γ H_b + η z_b² G_b` with
/// `z_b = E‖h_a‖²`. Backward: `R = 2 z_a sym E[g_a h_aᵀ] + η z_a² H_a − 2γ G_a`
/// with `z_a = E‖g_b‖²`. Constants are fitted to `Z_b + c₁G_b = c₂H_b`
/// (forward) and `Z_a + c₃H_a = c₄G_a` (backward).
pub fn fdt_residual<T: Real>(set: &ConjugateSet<T>, eta: T, gamma: T, side: Side) -> Result<FdtReport<T>> {
    if set.mode != MomentMode::Raw {
        return Err(CrhError::ModeMismatch(MomentMode::Raw, set.mode));
    }
    if !(eta > T::zero() && eta.is_finite()) {
        return Err(CrhError::InvalidArgument(format!("learning rate must be > 0, got {eta}")));
    }
    if !(gamma >= T::zero() && gamma.is_finite()) {
        return Err(CrhError::InvalidArgument(format!("weight decay must be >= 0, got {gamma}")));
    }
    let two = T::lit(2.0);
    let (learning, regularization, noise, constants) = match side {
        Side::B => {
            let z = set.norm_ha;
            (
                set.cross_f.scaled(two * z),
                set.h_b.scaled(two * gamma),
                set.g_b.scaled(eta * z * z),
                fit_constants(&set.z_b, &set.g_b, &set.h_b),
            )
        }
        Side::A => {
            let z = set.norm_gb;
            (
                set.cross_b.scaled(two * z),
                set.g_a.scaled(two * gamma),
                set.h_a.scaled(eta * z * z),
                fit_constants(&set.z_a, &set.h_a, &set.g_a),
            )
        }
    };
    let residual = learning.sub(&regularization).add(&noise);
    let term_norms = [learning.frobenius(), regularization.frobenius(), noise.frobenius()];
    let scale = term_norms.iter().fold(T::zero(), |m, v| m.max(*v));
    let rn = residual.frobenius();
    let relative_residual = if scale > T::zero() { rn / scale } else { T::zero() };
    Ok(FdtReport {
        side,
        residual,
        relative_residual,
        term_norms,
        constants,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhaseId {
    Crh,
    BackCrh,
    ForwCrh,
    /// Numbered phases 1 through 9.
    Numbered(u8),
    Partial,
    None,
}

impl PhaseId {
    /// Every phase with predicted power laws.
    pub fn table() -> Vec<PhaseId> {
        let mut v = vec![PhaseId::Crh, PhaseId::BackCrh, PhaseId::ForwCrh];
        v.extend((1..=9).map(PhaseId::Numbered));
        v
    }

    pub fn name(self) -> String {
        match self {
            PhaseId::Crh => "CRH".into(),
            PhaseId::BackCrh => "back-CRH".into(),
            PhaseId::ForwCrh => "forw-CRH".into(),
            PhaseId::Numbered(n) => n.to_string(),
            PhaseId::Partial => "partial".into(),
            PhaseId::None => "none".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "crh" => Some(PhaseId::Crh),
            "back-crh" | "back_crh" | "backcrh" => Some(PhaseId::BackCrh),
            "forw-crh" | "forw_crh" | "forwcrh" => Some(PhaseId::ForwCrh),
            "partial" => Some(PhaseId::Partial),
            "none" => Some(PhaseId::None),
            other => other
                .parse::<u8>()
                .ok()
                .filter(|n| (1..=9).contains(n))
                .map(PhaseId::Numbered),
        }
    }

    /// The assumed (backward, forward) relation of a numbered phase.
    pub fn assumed_pairs(self) -> Option<(Pair, Pair)> {
        use Pair::*;
        let p = match self {
            PhaseId::Numbered(1) => (HG, HG),
            PhaseId::Numbered(2) => (HZ, HZ),
            PhaseId::Numbered(3) => (GZ, GZ),
            PhaseId::Numbered(4) => (HG, HZ),
            PhaseId::Numbered(5) => (HZ, HG),
            PhaseId::Numbered(6) => (HG, GZ),
            PhaseId::Numbered(7) => (GZ, HG),
            PhaseId::Numbered(8) => (HZ, GZ),
            PhaseId::Numbered(9) => (GZ, HZ),
            _ => return None,
        };
        Some(p)
    }

    fn from_pairs(backward: Pair, forward: Pair) -> Self {
        (1..=9)
            .map(PhaseId::Numbered)
            .find(|p| p.assumed_pairs() == Some((backward, forward)))
            .expect("every pair combination is a numbered phase")
    }

    /// Predicted exponents `(p_H, p_Z, p_G)` with `H̃^{p_H} ∝ Z̃^{p_Z} ∝ G̃^{p_G}`
    /// for each side, `0` standing for the projector of the tilde matrix.
    /// `None` on a side the table leaves open.
    pub fn predicted(self) -> Option<PredictedLaws> {
        let l = |a: Option<[i8; 3]>, b: Option<[i8; 3]>, pa, pb| PredictedLaws {
            backward: a,
            forward: b,
            projector: [pa, pb],
        };
        use ProjectorKind::*;
        let laws = match self {
            PhaseId::Crh => l(Some([1, 1, 1]), Some([1, 1, 1]), Z, Z),
            PhaseId::BackCrh => l(None, Some([0, 0, 1]), Z, Z),
            PhaseId::ForwCrh => l(Some([1, 0, 0]), None, Z, Z),
            PhaseId::Numbered(1) => l(Some([0, 1, 0]), Some([0, 1, 0]), G, G),
            PhaseId::Numbered(2) => l(Some([1, 1, 0]), Some([1, 1, 0]), Z, Z),
            PhaseId::Numbered(3) => l(Some([0, 1, 1]), Some([0, 1, 1]), Z, Z),
            PhaseId::Numbered(4) => l(Some([1, 0, 1]), Some([1, 1, -1]), Z, Z),
            PhaseId::Numbered(5) => l(Some([3, 3, 1]), Some([1, 2, 1]), Z, Z),
            PhaseId::Numbered(6) => l(Some([1, 2, 1]), Some([1, 3, 3]), Z, Z),
            PhaseId::Numbered(7) => l(Some([-1, 1, 1]), Some([1, 0, 1]), Z, Z),
            PhaseId::Numbered(8) => l(Some([2, 2, 1]), Some([1, 2, 2]), Z, Z),
            PhaseId::Numbered(9) => l(Some([1, 0, 0]), Some([0, 0, 1]), Z, Z),
            _ => return None,
        };
        Some(laws)
    }

    /// Untilded side relations the table lists next to the directional CRH
    /// rows, as `(side, lhs, p, rhs, q)` meaning `lhs^p ∝ rhs^q`.
    pub fn extra_relations(self) -> Vec<(Side, Mat, i32, Mat, i32)> {
        match self {
            PhaseId::BackCrh => vec![(Side::B, Mat::H, 1, Mat::Z, 2)],
            PhaseId::ForwCrh => vec![(Side::A, Mat::Z, 2, Mat::G, 1)],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProjectorKind {
    /// `Z⁰`
    Z,
    /// `H⁰`
    H,
    /// `G⁰`
    G,
}

impl ProjectorKind {
    pub fn mat(self) -> Mat {
        match self {
            ProjectorKind::Z => Mat::Z,
            ProjectorKind::H => Mat::H,
            ProjectorKind::G => Mat::G,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictedLaws {
    pub backward: Option<[i8; 3]>,
    pub forward: Option<[i8; 3]>,
    /// Projector per side, `[a, b]`.
    pub projector: [ProjectorKind; 2],
}

impl PredictedLaws {
    pub fn side(&self, side: Side) -> Option<[i8; 3]> {
        match side {
            Side::A => self.backward,
            Side::B => self.forward,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLabel<T> {
    pub layer_index: usize,
    /// Relations with score at or above `τ`.
    pub held: Vec<Relation>,
    pub phase: PhaseId,
    pub predicted: Option<PredictedLaws>,
    /// Sides where two relations passed `τ` but the third stayed below
    /// `τ − 0.05`.
    pub near_redundant: Vec<Side>,
    pub tau: T,
    pub measured: Option<PowerLawCheck<T>>,
}

/// Margin below `τ` within which the third relation of a side still counts
/// once the other two hold.
pub const REDUNDANCY_MARGIN: f64 = 0.05;

pub const DEFAULT_TAU: f64 = 0.9;

enum SideState {
    Full,
    Single(Pair),
    Empty,
}

pub fn classify_phase<T: Real>(report: &AlignmentReport<T>, tau: T) -> Result<PhaseLabel<T>> {
    if !(tau > T::zero() && tau < T::one()) {
        return Err(CrhError::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let held: Vec<Relation> = Relation::ALL
        .into_iter()
        .filter(|r| report.score(*r).is_some_and(|s| s >= tau))
        .collect();
    let mut near_redundant = Vec::new();
    let mut state = |side: Side| {
        let mut on: Vec<(Pair, T)> = Pair::ALL
            .into_iter()
            .filter_map(|p| report.score(Relation::new(side, p)).map(|s| (p, s)))
            .filter(|(p, _)| held.contains(&Relation::new(side, *p)))
            .collect();
        match on.len() {
            3 => SideState::Full,
            2 => {
                let third = Pair::ALL
                    .into_iter()
                    .find(|p| on.iter().all(|(q, _)| q != p))
                    .expect("one relation left");
                let s3 = report.score(Relation::new(side, third));
                if s3.is_some_and(|s| s >= tau - T::lit(REDUNDANCY_MARGIN)) {
                    SideState::Full
                } else {
                    near_redundant.push(side);
                    on.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(std::cmp::Ordering::Equal));
                    SideState::Single(on[0].0)
                }
            }
            1 => SideState::Single(on[0].0),
            _ => SideState::Empty,
        }
    };
    let back = state(Side::A);
    let forw = state(Side::B);
    let phase = match (back, forw) {
        (SideState::Full, SideState::Full) => PhaseId::Crh,
        (SideState::Full, _) => PhaseId::BackCrh,
        (_, SideState::Full) => PhaseId::ForwCrh,
        (SideState::Single(a), SideState::Single(b)) => PhaseId::from_pairs(a, b),
        (SideState::Empty, SideState::Empty) => PhaseId::None,
        _ => PhaseId::Partial,
    };
    Ok(PhaseLabel {
        layer_index: report.layer_index,
        held,
        phase,
        predicted: phase.predicted(),
        near_redundant,
        tau,
        measured: None,
    })
}

/// One predicted relation `Ã^p ∝ B̃^q` evaluated on a set.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationCheck<T> {
    pub side: Side,
    pub lhs: (Mat, i32),
    pub rhs: (Mat, i32),
    /// Whether the matrices were projected (the untilded extras are not).
    pub projected: bool,
    /// `α(mat_pow(Ã, p), mat_pow(B̃, q))`; `None` when a power is degenerate.
    pub alignment: Option<T>,
    /// Predicted eigenvalue exponent `q/p`; `None` when either power is 0.
    pub predicted_exponent: Option<T>,
    pub fit: Option<PowerLawFit<T>>,
}

impl<T: Real> RelationCheck<T> {
    pub fn describe(&self) -> String {
        let tilde = if self.projected { "~" } else { "" };
        format!(
            "{}{}_{}^{} ∝ {}{}_{}^{}",
            self.lhs.0.symbol(),
            tilde,
            self.side.suffix(),
            self.lhs.1,
            self.rhs.0.symbol(),
            tilde,
            self.side.suffix(),
            self.rhs.1
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerLawCheck<T> {
    pub phase: PhaseId,
    pub relations: Vec<RelationCheck<T>>,
    /// Rank of the projector per side, `[a, b]`.
    pub projector_rank: [usize; 2],
}

impl<T: Real> PowerLawCheck<T> {
    /// Smallest alignment across relations; a degenerate relation counts as
    /// `−1`.
    pub fn min_alignment(&self) -> T {
        self.relations
            .iter()
            .map(|r| r.alignment.unwrap_or(-T::one()))
            .fold(T::one(), |m, v| m.min(v))
    }
}

/// Projector rank below which spectral slopes are not fitted.
pub const MIN_FIT_RANK: usize = 3;

/// Predicted power laws of `phase` evaluated on `set`: matrix-power alignments
/// of the projected matrices, and rank-paired eigenvalue slopes against the
/// predicted ratio `q/p`.
pub fn verify_power_law<T: Real>(set: &ConjugateSet<T>, phase: PhaseId, rel_tol: T) -> Result<PowerLawCheck<T>> {
    let laws = phase
        .predicted()
        .ok_or_else(|| CrhError::InvalidArgument(format!("phase {phase} has no predicted power laws")))?;
    let mut relations = Vec::new();
    let mut projector_rank = [0, 0];
    for (i, side) in Side::BOTH.into_iter().enumerate() {
        let p = mat_pow(side_matrix(set, side, laws.projector[i].mat()), 0, rel_tol)?;
        projector_rank[i] = p.trace().round().to_f64_lossy() as usize;
        let Some(exps) = laws.side(side) else { continue };
        let tilde = |m: Mat| side_matrix(set, side, m).sandwich(&p);
        let mats = [Mat::H, Mat::Z, Mat::G];
        for (x, y) in [(0, 1), (0, 2), (1, 2)] {
            let (ma, mb) = (mats[x], mats[y]);
            relations.push(check_relation(
                side,
                (&tilde(ma), ma, i32::from(exps[x])),
                (&tilde(mb), mb, i32::from(exps[y])),
                true,
                projector_rank[i],
                rel_tol,
            )?);
        }
    }
    for (side, ma, pa, mb, pb) in phase.extra_relations() {
        let a = side_matrix(set, side, ma);
        let b = side_matrix(set, side, mb);
        let rank = a.dim();
        relations.push(check_relation(side, (a, ma, pa), (b, mb, pb), false, rank, rel_tol)?);
    }
    Ok(PowerLawCheck {
        phase,
        relations,
        projector_rank,
    })
}

fn check_relation<T: Real>(
    side: Side,
    lhs: (&SymMatrix<T>, Mat, i32),
    rhs: (&SymMatrix<T>, Mat, i32),
    projected: bool,
    rank: usize,
    rel_tol: T,
) -> Result<RelationCheck<T>> {
    let (a, ma, p) = lhs;
    let (b, mb, q) = rhs;
    let da = eigh(a)?;
    let db = eigh(b)?;
    let pa = crate::linalg::mat_pow_from(&da, p, rel_tol);
    let pb = crate::linalg::mat_pow_from(&db, q, rel_tol);
    let alignment = pearson_alignment(&pa, &pb).ok().map(|s| s.value());
    let (predicted_exponent, fit) = if p == 0 || q == 0 {
        (None, None)
    } else {
        let predicted = T::lit(f64::from(q) / f64::from(p));
        let fit = if rank >= MIN_FIT_RANK {
            let sa: Vec<T> = da.eigenvalues.iter().copied().take(rank).collect();
            let mut sb: Vec<T> = db.eigenvalues.iter().copied().take(rank).collect();
            if (p < 0) != (q < 0) {
                sb.reverse();
            }
            power_law_fit(&sa, &sb, rank).ok()
        } else {
            None
        };
        (Some(predicted), fit)
    };
    Ok(RelationCheck {
        side,
        lhs: (ma, p),
        rhs: (mb, q),
        projected,
        alignment,
        predicted_exponent,
        fit,
    })
}

/// Exponent band accepted for spectral power laws.
pub const PAH_BAND: (f64, f64) = (0.25, 4.0);

#[derive(Debug, Clone, PartialEq)]
pub struct PahEntry<T> {
    pub side: Side,
    pub pair: Pair,
    /// Fit of `λ_first ∝ λ_second^e` over the top-k eigenvalues, e.g.
    /// `λ_H ∝ λ_G^e` for the `HG` pair.
    pub fit: Option<PowerLawFit<T>>,
    /// Exponent outside [`PAH_BAND`].
    pub out_of_band: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PahTable<T> {
    pub layer_index: usize,
    pub k: usize,
    pub entries: Vec<PahEntry<T>>,
}

impl<T: Real> PahTable<T> {
    pub fn entry(&self, side: Side, pair: Pair) -> Option<&PahEntry<T>> {
        self.entries.iter().find(|e| e.side == side && e.pair == pair)
    }
}

pub fn pah_scan<T: Real>(set: &ConjugateSet<T>, k: usize) -> Result<PahTable<T>> {
    if k == 0 {
        return Err(CrhError::InvalidArgument("pah_scan needs k >= 1".into()));
    }
    let mut entries = Vec::with_capacity(6);
    for side in Side::BOTH {
        let spectra: Vec<Vec<T>> = [Mat::H, Mat::Z, Mat::G]
            .iter()
            .map(|m| eigh(side_matrix(set, side, *m)).map(|d| d.eigenvalues.to_vec()))
            .collect::<Result<_>>()?;
        let spec = |m: Mat| match m {
            Mat::H => &spectra[0],
            Mat::Z => &spectra[1],
            Mat::G => &spectra[2],
        };
        for pair in Pair::ALL {
            let (x, y) = pair.mats();
            let fit = power_law_fit(spec(x), spec(y), k).ok();
            let out_of_band = fit.is_some_and(|f| {
                let e = f.exponent.to_f64_lossy();
                !(PAH_BAND.0..=PAH_BAND.1).contains(&e)
            });
            entries.push(PahEntry {
                side,
                pair,
                fit,
                out_of_band,
            });
        }
    }
    Ok(PahTable {
        layer_index: set.layer_index,
        k,
        entries,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks<T: Real>(xs: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![T::zero(); xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = T::lit((i + j) as f64 / 2.0 + 1.0);
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with average ranks. A constant column gives 0.
pub fn spearman<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(CrhError::DimensionMismatch {
            context: "spearman inputs",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(CrhError::NonFinite {
            context: "spearman inputs".into(),
        });
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = T::from_usize_lossy(x.len());
    let mx = rx.iter().copied().sum::<T>() / n;
    let my = ry.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (*a - mx) * (*b - my);
        sxx += (*a - mx) * (*a - mx);
        syy += (*b - my) * (*b - my);
    }
    if sxx == T::zero() || syy == T::zero() {
        return Ok(T::zero());
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation between effective rank and alignment over
/// `(effective_rank, α)` entries.
pub fn rank_alignment_stats<T: Real>(entries: &[(T, T)]) -> Result<T> {
    const MIN_ENTRIES: usize = 5;
    if entries.len() < MIN_ENTRIES {
        return Err(CrhError::InsufficientData {
            retained: entries.len(),
            required: MIN_ENTRIES,
        });
    }
    let (r, a): (Vec<T>, Vec<T>) = entries.iter().copied().unzip();
    spearman(&r, &a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn wishart(d: usize, df: usize, seed: u64) -> SymMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((df, d), |_| StandardNormal.sample(&mut rng));
        SymMatrix::gram_cols(x.view())
    }

    fn set_of(w: Array2<f64>, h_a: SymMatrix<f64>, g_b: SymMatrix<f64>) -> ConjugateSet<f64> {
        let h_b = h_a.congruence(w.view());
        let g_a = g_b.congruence(w.t());
        ConjugateSet::from_matrices(0, MomentMode::Raw, w.view(), h_a, g_a, h_b, g_b).unwrap()
    }

    #[test]
    fn projector_everywhere_scores_one() {
        let p = SymMatrix::from_diag(&[1.0f64, 1.0, 0.0]);
        let set = ConjugateSet::from_matrices(
            0,
            MomentMode::Raw,
            p.view(),
            p.clone(),
            p.clone(),
            p.clone(),
            p.clone(),
        )
        .unwrap();
        let r = six_alignments(&set);
        for rel in Relation::ALL {
            assert!((r.score(rel).unwrap() - 1.0).abs() < 1e-12, "{rel}");
        }
    }

    #[test]
    fn scaled_pair_scores_one_and_degenerate_marked() {
        let g = wishart(4, 10, 1);
        let w = Array2::eye(4);
        let mut set = set_of(w, wishart(4, 10, 2), g.clone());
        set.h_b = g.scaled(2.0);
        let r = six_alignments(&set);
        assert!((r.score(Relation::new(Side::B, Pair::HG)).unwrap() - 1.0).abs() < 1e-12);

        set.h_a = SymMatrix::from_row_major(4, vec![1.0; 16]).unwrap();
        let r = six_alignments(&set);
        assert!(r.score(Relation::new(Side::A, Pair::HG)).is_none());
        assert!(r.score(Relation::new(Side::A, Pair::GZ)).is_some());
    }

    #[test]
    fn nnls_recovers_exact_constants() {
        let h = wishart(5, 8, 3);
        let g = wishart(5, 8, 4);
        let (c1, c2) = (0.7, 1.9);
        let z = h.scaled(c2).sub(&g.scaled(c1));
        let fit = fit_constants(&z, &g, &h);
        assert!((fit.c_lhs - c1).abs() < 1e-9 && (fit.c_rhs - c2).abs() < 1e-9);
        assert!(fit.relative_residual < 1e-7);
        assert!(!fit.violation);

        // Z = G + 0.01·H needs c₁ = −1
        let z = g.add(&h.scaled(0.01));
        let fit = fit_constants(&z, &g, &h);
        assert!(fit.violation);
        assert!(fit.c_lhs >= 0.0 && fit.c_rhs >= 0.0);
    }

    fn balanced_forward(eta: f64, gamma: f64) -> ConjugateSet<f64> {
        let w = array![[1.0, 0.2, -0.3], [0.1, 0.8, 0.5]];
        let mut set = set_of(w, wishart(3, 6, 5), wishart(2, 6, 6));
        let z = set.norm_ha;
        set.cross_f = set.h_b.scaled(2.0 * gamma).sub(&set.g_b.scaled(eta * z * z)).scaled(1.0 / (2.0 * z));
        let za = set.norm_gb;
        set.cross_b = set.g_a.scaled(2.0 * gamma).sub(&set.h_a.scaled(eta * za * za)).scaled(1.0 / (2.0 * za));
        set
    }

    #[test]
    fn fdt_exact_balance() {
        let set = balanced_forward(0.05, 0.01);
        for side in Side::BOTH {
            let r = fdt_residual(&set, 0.05, 0.01, side).unwrap();
            assert!(r.relative_residual <= 1e-10, "{side:?} {}", r.relative_residual);
        }
        assert!(fdt_residual(&set, 0.0, 0.01, Side::B).is_err());
        assert!(fdt_residual(&set, 0.1, -1.0, Side::B).is_err());
    }

    #[test]
    fn fdt_all_terms_vanish() {
        let w = Array2::<f64>::zeros((2, 2));
        let set = ConjugateSet::from_matrices(
            0,
            MomentMode::Raw,
            w.view(),
            SymMatrix::zeros(2),
            SymMatrix::zeros(2),
            SymMatrix::zeros(2),
            SymMatrix::zeros(2),
        )
        .unwrap();
        let r = fdt_residual(&set, 0.1, 0.0, Side::B).unwrap();
        assert_eq!(r.relative_residual, 0.0);
        assert_eq!(r.residual.max_abs(), 0.0);
    }

    #[test]
    fn fdt_residual_is_linear_in_moments() {
        let mut set = balanced_forward(0.05, 0.01);
        set.cross_f = set.cross_f.scaled(1.3);
        let r1 = fdt_residual(&set, 0.05, 0.01, Side::B).unwrap();
        // scaling every moment by c leaves z fixed when h_a is not scaled, so
        // scale only the matrices the residual is linear in
        let c = 3.0;
        let mut s2 = set.clone();
        s2.cross_f = s2.cross_f.scaled(c);
        s2.h_b = s2.h_b.scaled(c);
        s2.g_b = s2.g_b.scaled(c);
        let r2 = fdt_residual(&s2, 0.05, 0.01, Side::B).unwrap();
        assert!(r2.residual.sub(&r1.residual.scaled(c)).max_abs() < 1e-12);
    }

    fn report(scores: [f64; 6]) -> AlignmentReport<f64> {
        AlignmentReport::from_scores(0, 0, scores.map(Some))
    }

    #[test]
    fn classify_examples() {
        let l = classify_phase(&report([0.95; 6]), 0.9).unwrap();
        assert_eq!(l.phase, PhaseId::Crh);
        let l = classify_phase(&report([0.95, 0.1, 0.2, 0.93, 0.3, 0.1]), 0.9).unwrap();
        assert_eq!(l.phase, PhaseId::Numbered(1));
        let l = classify_phase(&report([0.1, 0.95, 0.2, 0.1, 0.1, 0.1]), 0.9).unwrap();
        assert_eq!(l.phase, PhaseId::Partial);
        let l = classify_phase(&report([0.1; 6]), 0.9).unwrap();
        assert_eq!(l.phase, PhaseId::None);
        let l = classify_phase(&report([0.95, 0.96, 0.97, 0.1, 0.2, 0.3]), 0.9).unwrap();
        assert_eq!(l.phase, PhaseId::BackCrh);
        let l = classify_phase(&report([0.1, 0.2, 0.3, 0.95, 0.96, 0.97]), 0.9).unwrap();
        assert_eq!(l.phase, PhaseId::ForwCrh);
        assert!(classify_phase(&report([0.1; 6]), 1.0).is_err());
    }

    #[test]
    fn every_pair_combination_maps_to_its_phase() {
        for n in 1..=9u8 {
            let (b, f) = PhaseId::Numbered(n).assumed_pairs().unwrap();
            let mut s = [0.0; 6];
            s[Relation::new(Side::A, b).slot()] = 0.99;
            s[Relation::new(Side::B, f).slot()] = 0.99;
            assert_eq!(classify_phase(&report(s), 0.9).unwrap().phase, PhaseId::Numbered(n));
        }
    }

    #[test]
    fn tie_break_promotes_or_flags() {
        let l = classify_phase(&report([0.95, 0.92, 0.86, 0.95, 0.1, 0.1]), 0.9).unwrap();
        assert_eq!(l.phase, PhaseId::BackCrh);
        assert!(l.near_redundant.is_empty());
        let l = classify_phase(&report([0.92, 0.95, 0.5, 0.95, 0.1, 0.1]), 0.9).unwrap();
        // top backward relation HZ, forward HG → phase 5
        assert_eq!(l.phase, PhaseId::Numbered(5));
        assert_eq!(l.near_redundant, vec![Side::A]);
    }

    #[test]
    fn predicted_exponents_within_bounds() {
        for p in PhaseId::table() {
            let laws = p.predicted().unwrap();
            for s in [laws.backward, laws.forward].into_iter().flatten() {
                assert!(s.iter().all(|e| (-1..=3).contains(e)), "{p}");
            }
        }
    }

    #[test]
    fn crh_instance_power_law_exponent_one() {
        // W = 1.5 · partial isometry, H_a = Z_a, G_b = Z_b
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Array2::<f64>::from_shape_fn((6, 6), |_| StandardNormal.sample(&mut rng));
        let q = crate::linalg::eigh(&SymMatrix::new(g).unwrap()).unwrap().eigenvectors;
        let mut w = Array2::<f64>::zeros((6, 6));
        for k in 0..4 {
            let col = q.column(k);
            for i in 0..6 {
                for j in 0..6 {
                    w[[i, j]] += 1.5 * col[i] * q[[j, (k + 2) % 6]];
                }
            }
        }
        let z_a = SymMatrix::gram_cols(w.view());
        let z_b = SymMatrix::gram_rows(w.view());
        let set = set_of(w, z_a, z_b);
        let report = six_alignments(&set);
        let label = classify_phase(&report, 0.9).unwrap();
        assert_eq!(label.phase, PhaseId::Crh);
        let check = verify_power_law(&set, PhaseId::Crh, 1e-10).unwrap();
        assert!(check.min_alignment() > 0.999);
        assert_eq!(check.projector_rank, [4, 4]);
    }

    #[test]
    fn pah_equal_and_cubic_spectra() {
        let eig = [9.0, 5.0, 3.0, 2.0, 1.5, 1.0];
        let h = SymMatrix::from_diag(&eig);
        let g3: Vec<f64> = eig.iter().map(|v: &f64| v.powf(1.0 / 3.0)).collect();
        let g = SymMatrix::from_diag(&g3);
        let w = Array2::from_diag(&ndarray::arr1(&eig).mapv(f64::sqrt));
        let set = ConjugateSet::from_matrices(0, MomentMode::Raw, w.view(), h.clone(), h.clone(), h, g).unwrap();
        let t = pah_scan(&set, 6).unwrap();
        for pair in Pair::ALL {
            let e = t.entry(Side::A, pair).unwrap().fit.unwrap();
            assert!((e.exponent - 1.0).abs() < 1e-10);
        }
        let e = t.entry(Side::B, Pair::GZ).unwrap().fit.unwrap();
        assert!((e.exponent - 1.0 / 3.0).abs() < 1e-10);
        let e = t.entry(Side::B, Pair::HG).unwrap();
        assert!((e.fit.unwrap().exponent - 3.0).abs() < 0.1);
        assert!(!e.out_of_band);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0f64, 2.0, 3.0, 4.0, 5.0];
        let y = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        let entries: Vec<(f64, f64)> = x.iter().map(|r| (*r, 0.4)).collect();
        assert_eq!(rank_alignment_stats(&entries).unwrap(), 0.0);
        assert!(rank_alignment_stats(&entries[..4]).is_err());
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn phase_names_round_trip() {
        for p in PhaseId::table().into_iter().chain([PhaseId::Partial, PhaseId::None]) {
            assert_eq!(PhaseId::parse(&p.name()), Some(p));
        }
        assert_eq!(PhaseId::parse("10"), None);
    }
}
