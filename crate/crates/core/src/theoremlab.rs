//! Exact synthetic instances for the alignment phases, and in-model checks of
//! neural collapse, loss invariance and the feature ansatz.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::crhkit::{six_alignments, verify_power_law, AlignmentReport, Mat, PhaseId, Relation, Side};
use crate::error::{CrhError, Result};
use crate::linalg::{eigh, least_squares_line, mat_pow, pearson_alignment, projection_distance, PowerLawFit, SymMatrix};
use crate::netcore::{loss_eval, Activation, Linear, Loss, MlpModel, Targets};
use crate::probes::{conjugate_set, ConjugateSet, MomentMode};
use crate::scalar::Real;

/// Attempts before a constructor gives up.
pub const MAX_ATTEMPTS: usize = 10;

/// Condition-number cap for the random PSD blocks of an instance.
pub const MAX_CONDITION: f64 = 1e4;

/// A weight matrix and free moments satisfying a phase's assumed relations
/// exactly. `H_b = W H_a Wᵀ` and `G_a = Wᵀ G_b W` are derived.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseInstance<T> {
    pub phase: PhaseId,
    pub seed: u64,
    pub w: Array2<T>,
    pub h_a: SymMatrix<T>,
    pub g_b: SymMatrix<T>,
    pub h_b: SymMatrix<T>,
    pub g_a: SymMatrix<T>,
    pub z_a: SymMatrix<T>,
    pub z_b: SymMatrix<T>,
}

impl<T: Real> PhaseInstance<T> {
    pub fn d_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn conjugate_set(&self) -> ConjugateSet<T> {
        ConjugateSet::from_matrices(
            0,
            MomentMode::Raw,
            self.w.view(),
            self.h_a.clone(),
            self.g_a.clone(),
            self.h_b.clone(),
            self.g_b.clone(),
        )
        .expect("instance shapes are consistent")
    }
}

/// Relations a constructor for `phase` makes hold exactly.
pub fn assumed_relations(phase: PhaseId) -> Vec<Relation> {
    let side = |s: Side| crate::crhkit::Pair::ALL.map(|p| Relation::new(s, p)).to_vec();
    match phase {
        PhaseId::Crh => Relation::ALL.to_vec(),
        PhaseId::BackCrh => side(Side::A),
        PhaseId::ForwCrh => side(Side::B),
        PhaseId::Numbered(_) => {
            let (b, f) = phase.assumed_pairs().expect("numbered phase");
            vec![Relation::new(Side::A, b), Relation::new(Side::B, f)]
        }
        PhaseId::Partial | PhaseId::None => Vec::new(),
    }
}

#[derive(Clone, Copy)]
enum Spectrum {
    /// log-uniform singular values in `[0.5, 2]`
    Generic,
    /// one common singular value
    Isometry,
    /// the first `k` singular values share one value
    LeadingFlat(usize),
}

/// SVD-style factors of a random rank-`r` weight matrix, in `f64`.
struct Factors {
    /// `d_out × d_out`, first `r` columns span the column space.
    u: Array2<f64>,
    /// `d_in × d_in`, first `r` columns span the row space.
    v: Array2<f64>,
    s: Vec<f64>,
}

impl Factors {
    fn rank(&self) -> usize {
        self.s.len()
    }

    fn w(&self) -> Array2<f64> {
        let r = self.rank();
        let us = &self.u.slice(s![.., ..r]) * &Array1::from(self.s.clone()).insert_axis(Axis(0));
        us.dot(&self.v.slice(s![.., ..r]).t())
    }

    /// `B diag(λ) Bᵀ` over the leading `r` columns of `basis`.
    fn leading(basis: &Array2<f64>, lambda: &[f64]) -> Array2<f64> {
        let r = lambda.len();
        let b = basis.slice(s![.., ..r]);
        let bl = &b * &Array1::from(lambda.to_vec()).insert_axis(Axis(0));
        bl.dot(&b.t())
    }

    fn side(&self, side: Side) -> &Array2<f64> {
        match side {
            Side::A => &self.v,
            Side::B => &self.u,
        }
    }

    /// `Z_c^n` for integer `n`, `n = 0` the projector, negative `n` the
    /// pseudo-inverse powers.
    fn z_pow(&self, side: Side, n: i32) -> Array2<f64> {
        let lambda: Vec<f64> = self.s.iter().map(|s| (s * s).powi(n)).collect();
        Self::leading(self.side(side), &lambda)
    }

    /// Random PSD matrix supported on the orthogonal complement of the
    /// weight's row (side a) or column (side b) space.
    fn kernel_block(&self, side: Side, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let basis = self.side(side);
        let r = self.rank();
        let n = basis.ncols();
        if n == r {
            return Ok(Array2::zeros((n, n)));
        }
        let comp = basis.slice(s![.., r..]).to_owned();
        random_psd_on(&comp, rng)
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormal `n × n` basis by Gram–Schmidt (two passes) on a Gaussian draw.
fn random_orthonormal(n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let mut q = gaussian(n, n, rng);
    for k in 0..n {
        for _ in 0..2 {
            for j in 0..k {
                let dot = q.column(j).dot(&q.column(k));
                let qj = q.column(j).to_owned();
                q.column_mut(k).scaled_add(-dot, &qj);
            }
        }
        let norm = q.column(k).dot(&q.column(k)).sqrt();
        if norm < 1e-8 {
            return Err(CrhError::ConstructionFailed {
                attempts: 1,
                reason: "degenerate Gaussian draw".into(),
            });
        }
        q.column_mut(k).mapv_inplace(|v| v / norm);
    }
    Ok(q)
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Wishart block `B M Bᵀ` with `M = XᵀX / df`, `df = k + 10`, for an
/// orthonormal `n × k` basis `B`; rejects draws whose condition exceeds
/// [`MAX_CONDITION`].
fn random_psd_on(basis: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let k = basis.ncols();
    let df = k + 10;
    let x = gaussian(df, k, rng);
    let m = x.t().dot(&x) / df as f64;
    let ev = eigh(&SymMatrix::symmetrize(m.clone()))?.eigenvalues;
    let (hi, lo) = (ev[0], ev[k - 1]);
    if !(lo > 0.0 && hi / lo <= MAX_CONDITION) {
        return Err(CrhError::ConstructionFailed {
            attempts: 1,
            reason: format!("Wishart block condition {}", hi / lo),
        });
    }
    Ok(basis.dot(&m).dot(&basis.t()))
}

fn factors(d_in: usize, d_out: usize, spectrum: Spectrum, rng: &mut ChaCha8Rng) -> Result<Factors> {
    let r = d_in.min(d_out) - 2;
    let u = random_orthonormal(d_out, rng)?;
    let v = random_orthonormal(d_in, rng)?;
    let common = log_uniform(rng, 0.5, 2.0);
    let s = (0..r)
        .map(|i| match spectrum {
            Spectrum::Generic => log_uniform(rng, 0.5, 2.0),
            Spectrum::Isometry => common,
            Spectrum::LeadingFlat(k) if i < k => common,
            Spectrum::LeadingFlat(_) => log_uniform(rng, 0.5, 2.0),
        })
        .collect();
    Ok(Factors { u, v, s })
}

/// Which extra instance a master-theorem check needs.
#[derive(Clone, Copy)]
enum Recipe {
    Phase(PhaseId),
    /// Backward CRH plus `H_b ∝ Z_b`.
    BackwardPlusForwardHz,
}

fn free_matrices(recipe: Recipe, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    use PhaseId::*;
    let r = d_in.min(d_out) - 2;
    let spectrum = match recipe {
        Recipe::Phase(Crh | Numbered(2) | Numbered(3)) | Recipe::BackwardPlusForwardHz => Spectrum::Isometry,
        Recipe::Phase(Numbered(1)) => Spectrum::LeadingFlat((r / 2).max(1)),
        _ => Spectrum::Generic,
    };
    let f = factors(d_in, d_out, spectrum, rng)?;
    let z = |side, n| f.z_pow(side, n);
    let (h_a, g_b) = match recipe {
        Recipe::Phase(Crh) => (z(Side::A, 1), z(Side::B, 1)),
        Recipe::Phase(BackCrh) | Recipe::BackwardPlusForwardHz => {
            (z(Side::A, 1), z(Side::B, 0) + f.kernel_block(Side::B, rng)?)
        }
        Recipe::Phase(ForwCrh) => (z(Side::A, 0) + f.kernel_block(Side::A, rng)?, z(Side::B, 1)),
        Recipe::Phase(Numbered(1)) => {
            let k = match spectrum {
                Spectrum::LeadingFlat(k) => k,
                _ => unreachable!(),
            };
            let ident = Array2::<f64>::eye(k);
            let m = random_psd_on(&ident, rng)?;
            let v1 = f.v.slice(s![.., ..k]);
            let u1 = f.u.slice(s![.., ..k]);
            (v1.dot(&m).dot(&v1.t()), u1.dot(&m).dot(&u1.t()))
        }
        Recipe::Phase(Numbered(2)) => (z(Side::A, 1), random_psd_on(&Array2::eye(d_out), rng)?),
        Recipe::Phase(Numbered(3)) => (random_psd_on(&Array2::eye(d_in), rng)?, z(Side::B, 1)),
        Recipe::Phase(Numbered(4)) => (z(Side::A, 0), z(Side::B, -1) + f.kernel_block(Side::B, rng)?),
        Recipe::Phase(Numbered(5)) => (z(Side::A, 1), z(Side::B, 2)),
        Recipe::Phase(Numbered(6)) => (z(Side::A, 2), z(Side::B, 1)),
        Recipe::Phase(Numbered(7)) => (z(Side::A, -1) + f.kernel_block(Side::A, rng)?, z(Side::B, 0)),
        Recipe::Phase(Numbered(8)) => (z(Side::A, 1), z(Side::B, 1)),
        Recipe::Phase(Numbered(9)) => (
            z(Side::A, 0) + f.kernel_block(Side::A, rng)?,
            z(Side::B, 0) + f.kernel_block(Side::B, rng)?,
        ),
        Recipe::Phase(p) => {
            return Err(CrhError::InvalidArgument(format!("phase {p} has no constructor")));
        }
    };
    Ok((f.w(), h_a, g_b))
}

fn cast2<T: Real>(a: &Array2<f64>) -> Array2<T> {
    a.mapv(T::lit)
}

/// Alignment tolerance for "holds exactly" in scalar type `T`.
fn exact_tol<T: Real>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(1e3))
}

fn build<T: Real>(recipe: Recipe, label: PhaseId, d_in: usize, d_out: usize, seed: u64, required: &[Relation]) -> Result<PhaseInstance<T>> {
    if d_in < 4 || d_out < 4 {
        return Err(CrhError::InvalidArgument(format!(
            "instance dims must be at least 4, got {d_in}x{d_out}"
        )));
    }
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let (w, h_a, g_b) = match free_matrices(recipe, d_in, d_out, &mut rng) {
            Ok(v) => v,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        let w: Array2<T> = cast2(&w);
        let h_a = SymMatrix::symmetrize(cast2(&h_a));
        let g_b = SymMatrix::symmetrize(cast2(&g_b));
        let inst = PhaseInstance {
            phase: label,
            seed,
            h_b: h_a.congruence(w.view()),
            g_a: g_b.congruence(w.t()),
            z_a: SymMatrix::gram_cols(w.view()),
            z_b: SymMatrix::gram_rows(w.view()),
            w,
            h_a,
            g_b,
        };
        let report = six_alignments(&inst.conjugate_set());
        let tol = exact_tol::<T>();
        match required
            .iter()
            .find(|r| !report.score(**r).is_some_and(|s| s >= T::one() - tol))
        {
            None => return Ok(inst),
            Some(r) => last = format!("relation {r} scored {:?}", report.score(*r)),
        }
        log::debug!("instance {label} seed {seed} attempt {attempt}: {last}");
    }
    Err(CrhError::ConstructionFailed {
        attempts: MAX_ATTEMPTS,
        reason: last,
    })
}

/// Random instance of `phase` with `d_in, d_out ≥ 4`. The weight has rank
/// `min(d_in, d_out) − 2` so both sides have a kernel.
pub fn synth_phase_instance<T: Real>(phase: PhaseId, d_in: usize, d_out: usize, seed: u64) -> Result<PhaseInstance<T>> {
    build(Recipe::Phase(phase), phase, d_in, d_out, seed, &assumed_relations(phase))
}

/// Outcome of one numerical theorem check.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremCheck {
    /// Theorem part, 1 through 4.
    pub part: u8,
    pub relation: String,
    pub measured: f64,
    pub threshold: f64,
    /// `true` when the measured value must be at least the threshold.
    pub at_least: bool,
    pub pass: bool,
}

impl TheoremCheck {
    fn at_least(part: u8, relation: String, measured: f64, threshold: f64) -> Self {
        Self {
            part,
            relation,
            measured,
            threshold,
            at_least: true,
            pass: measured >= threshold,
        }
    }

    fn at_most(part: u8, relation: String, measured: f64, threshold: f64) -> Self {
        Self {
            part,
            relation,
            measured,
            threshold,
            at_least: false,
            pass: measured <= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterCheck {
    pub phase: PhaseId,
    pub seed: u64,
    pub checks: Vec<TheoremCheck>,
}

impl MasterCheck {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TheoremCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

pub const POWER_LAW_ALIGNMENT: f64 = 0.999;
pub const EXPONENT_TOLERANCE: f64 = 0.05;
pub const PROJECTOR_TOLERANCE: f64 = 1e-8;

fn score_or_neg<T: Real>(r: &AlignmentReport<T>, rel: Relation) -> f64 {
    r.score(rel).map_or(-1.0, |v| v.to_f64_lossy())
}

/// Runs the four master-theorem checks around an instance: the instance's own
/// predicted power laws, directional redundancy on both sides, the
/// all-six-in-subspace consequence of one extra relation, and the shared
/// projector when all six hold.
pub fn check_master<T: Real>(instance: &PhaseInstance<T>, rel_tol: T) -> Result<MasterCheck> {
    let (d_in, d_out, seed) = (instance.d_in(), instance.d_out(), instance.seed);
    let mut checks = Vec::new();

    let set = instance.conjugate_set();
    let laws = verify_power_law(&set, instance.phase, rel_tol)?;
    for r in &laws.relations {
        let name = r.describe();
        checks.push(TheoremCheck::at_least(
            2,
            name.clone(),
            r.alignment.map_or(-1.0, |v| v.to_f64_lossy()),
            POWER_LAW_ALIGNMENT,
        ));
        if let (Some(pred), Some(fit)) = (r.predicted_exponent, r.fit) {
            let err = (fit.exponent - pred).abs().to_f64_lossy();
            checks.push(TheoremCheck::at_most(2, format!("{name} exponent"), err, EXPONENT_TOLERANCE));
        }
    }

    for (phase, side) in [(PhaseId::BackCrh, Side::A), (PhaseId::ForwCrh, Side::B)] {
        let two = synth_phase_instance::<T>(phase, d_in, d_out, seed)?;
        let report = six_alignments(&two.conjugate_set());
        let third = Relation::new(side, crate::crhkit::Pair::HG);
        checks.push(TheoremCheck::at_least(
            1,
            format!("{third} from HZ and GZ"),
            score_or_neg(&report, third),
            POWER_LAW_ALIGNMENT,
        ));
    }

    let extended = build::<T>(
        Recipe::BackwardPlusForwardHz,
        PhaseId::BackCrh,
        d_in,
        d_out,
        seed,
        &[
            Relation::new(Side::A, crate::crhkit::Pair::HG),
            Relation::new(Side::A, crate::crhkit::Pair::HZ),
            Relation::new(Side::B, crate::crhkit::Pair::HZ),
        ],
    )?;
    let ext = extended.conjugate_set();
    for side in Side::BOTH {
        let p = mat_pow(crate::crhkit::side_matrix(&ext, side, Mat::Z), 0, rel_tol)?;
        let t = |m: Mat| crate::crhkit::side_matrix(&ext, side, m).sandwich(&p);
        for pair in crate::crhkit::Pair::ALL {
            let (x, y) = pair.mats();
            let a = pearson_alignment(&t(x), &t(y)).map_or(-1.0, |s| s.value().to_f64_lossy());
            checks.push(TheoremCheck::at_least(
                3,
                format!("{} in Z0 subspace", Relation::new(side, pair)),
                a,
                POWER_LAW_ALIGNMENT,
            ));
        }
    }

    let full = synth_phase_instance::<T>(PhaseId::Crh, d_in, d_out, seed)?;
    let fs = full.conjugate_set();
    for side in Side::BOTH {
        let zp = mat_pow(crate::crhkit::side_matrix(&fs, side, Mat::Z), 0, rel_tol)?;
        for m in [Mat::H, Mat::Z, Mat::G] {
            let x = crate::crhkit::side_matrix(&fs, side, m);
            let lmax = eigh(x)?.largest_abs();
            let name = format!("{}_{}", m.symbol(), side.suffix());
            let (dist, shared) = if lmax > T::zero() {
                let normalized = x.scaled(T::one() / lmax);
                let shared = normalized.sub(&zp).max_abs();
                (projection_distance(&normalized).to_f64_lossy(), shared.to_f64_lossy())
            } else {
                (f64::INFINITY, f64::INFINITY)
            };
            checks.push(TheoremCheck::at_most(4, format!("{name} normalized is a projector"), dist, PROJECTOR_TOLERANCE));
            checks.push(TheoremCheck::at_most(4, format!("{name} normalized equals Z0"), shared, PROJECTOR_TOLERANCE));
        }
    }

    Ok(MasterCheck {
        phase: instance.phase,
        seed,
        checks,
    })
}

/// A collapsed classifier: `C` orthonormal class means in `R^d`, every sample
/// sitting exactly on its mean, and a single linear layer `W = ζ Σ_c e_c μ_cᵀ`.
pub fn collapse_instance<T: Real>(
    classes: usize,
    d: usize,
    zeta: T,
    per_class: usize,
    seed: u64,
) -> Result<(MlpModel<T>, Array2<T>, Vec<usize>)> {
    if classes < 2 || classes > d || per_class == 0 {
        return Err(CrhError::InvalidArgument(format!(
            "collapse needs 2 <= classes <= d and samples per class, got {classes} classes in {d} dims"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_orthonormal(d, &mut rng)?;
    let mu: Array2<T> = cast2(&q.slice(s![.., ..classes]).t().to_owned());
    let model = MlpModel::new(vec![Linear { weight: mu.mapv(|v| v * zeta), bias: None }], Activation::Identity)?;
    let mut x = Array2::zeros((classes * per_class, d));
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for i in 0..per_class {
            x.row_mut(c * per_class + i).assign(&mu.row(c));
            labels.push(c);
        }
    }
    Ok((model, x, labels))
}

/// Neural-collapse measurements on the penultimate representation, the input
/// of the last linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NcReport<T> {
    /// `C × d`, raw class means.
    pub class_means: Array2<T>,
    /// `tr(Σ_W) / tr(Σ_B)`, between-class covariance about the global mean.
    pub nc1: T,
    /// `max_{c≠c'} |cos(μ_c, μ_c')|`.
    pub nc2: T,
    /// `α(WᵀW, Σ_c μ_cμ_cᵀ)`.
    pub nc3: Option<T>,
    /// Fraction of samples whose nearest class mean matches `argmax f`.
    pub nc4: T,
    /// Interpolation scale, `1` when not fitted.
    pub zeta: T,
    /// `sqrt(mean ‖f(x) − ζ1_c‖²)`.
    pub interpolation_error: T,
    /// `α(E[∇_fℓ∇_fℓᵀ], I)`.
    pub b_isotropy: Option<T>,
    pub accuracy: T,
    /// Six alignments of the last linear layer.
    pub alignments: AlignmentReport<T>,
}

fn argmax<T: Real>(row: ndarray::ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn nc_check<T: Real>(
    model: &MlpModel<T>,
    x: ArrayView2<T>,
    labels: &[usize],
    loss: Loss,
    fit_zeta: bool,
    mode: MomentMode,
) -> Result<NcReport<T>> {
    let classes = model.output_dim();
    if labels.len() != x.nrows() {
        return Err(CrhError::DimensionMismatch {
            context: "labels per sample",
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    let mut counts = vec![0usize; classes];
    for &c in labels {
        if c >= classes {
            return Err(CrhError::InvalidClass { index: c, classes });
        }
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|n| *n < 2) {
        return Err(CrhError::InvalidArgument(format!(
            "class {c} has {} samples, need at least 2",
            counts[c]
        )));
    }
    let last = model.depth() - 1;
    let record = model.forward_capture(x)?;
    let h = &record.inputs[last];
    let f = record.prediction();
    let n = T::from_usize_lossy(labels.len());
    let d = h.ncols();

    let mut means = Array2::<T>::zeros((classes, d));
    for (i, &c) in labels.iter().enumerate() {
        let mut row = means.row_mut(c);
        row += &h.row(i);
    }
    for c in 0..classes {
        let k = T::from_usize_lossy(counts[c]);
        means.row_mut(c).mapv_inplace(|v| v / k);
    }
    let within: T = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| (&h.row(i) - &means.row(c)).iter().map(|v| *v * *v).sum::<T>())
        .sum::<T>()
        / n;
    let global = h.sum_axis(Axis(0)) / n;
    let between: T = (0..classes)
        .map(|c| {
            let w = T::from_usize_lossy(counts[c]) / n;
            (&means.row(c) - &global).iter().map(|v| *v * *v).sum::<T>() * w
        })
        .sum();
    let nc1 = if between > T::zero() {
        within / between
    } else {
        T::infinity()
    };

    let norms: Vec<T> = means.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut nc2 = T::zero();
    for a in 0..classes {
        for b in (a + 1)..classes {
            let denom = norms[a] * norms[b];
            let cos = if denom > T::zero() {
                means.row(a).dot(&means.row(b)) / denom
            } else {
                T::one()
            };
            nc2 = nc2.max(cos.abs());
        }
    }

    let w = &model.layer(last).weight;
    let mean_gram = SymMatrix::gram_cols(means.view());
    let nc3 = pearson_alignment(&SymMatrix::gram_cols(w.view()), &mean_gram)
        .ok()
        .map(|s| s.value());

    let mut agree = 0usize;
    let mut correct = 0usize;
    for (i, &c) in labels.iter().enumerate() {
        let pred = argmax(f.row(i));
        let nearest = (0..classes)
            .map(|k| (k, (&h.row(i) - &means.row(k)).iter().map(|v| *v * *v).sum::<T>()))
            .fold((0, T::infinity()), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0;
        agree += usize::from(nearest == pred);
        correct += usize::from(pred == c);
    }

    let zeta = if fit_zeta {
        labels.iter().enumerate().map(|(i, &c)| f[[i, c]]).sum::<T>() / n
    } else {
        T::one()
    };
    let interp: T = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            f.row(i)
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    let t = if k == c { zeta } else { T::zero() };
                    (*v - t) * (*v - t)
                })
                .sum::<T>()
        })
        .sum::<T>()
        / n;

    let targets = Targets::Classes(labels.to_vec());
    let eval = loss_eval(f.view(), &targets, loss)?;
    let b_isotropy = pearson_alignment(&eval.b_matrix, &SymMatrix::identity(classes))
        .ok()
        .map(|s| s.value());
    let back = model.backward_capture(&record, &targets, loss)?;
    let set = conjugate_set(model, &back.tapes, last, mode)?;
    let alignments = six_alignments(&set);

    Ok(NcReport {
        class_means: means,
        nc1,
        nc2,
        nc3,
        nc4: T::from_usize_lossy(agree) / n,
        zeta,
        interpolation_error: interp.sqrt(),
        b_isotropy,
        accuracy: T::from_usize_lossy(correct) / n,
        alignments,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceReport<T> {
    pub epsilons: Vec<T>,
    /// `mean |ℓ(f(h + εn̂)) − ℓ(f(h))|` per epsilon.
    pub deviations: Vec<T>,
    /// Log-log slope over the positive epsilons with nonzero deviation;
    /// `None` when the deviation vanishes identically.
    pub slope: Option<PowerLawFit<T>>,
    /// True when every deviation is zero to rounding.
    pub exact: bool,
    pub norm_h_n: T,
    pub norm_w_n: T,
    pub norm_g_n: T,
}

/// Perturbs the input `h_a` of `layer` along `n̂` and measures how the loss
/// moves. A direction the loss only sees at second order gives slope 2.
pub fn invariance_check<T: Real>(
    model: &MlpModel<T>,
    x: ArrayView2<T>,
    targets: &Targets<T>,
    loss: Loss,
    layer: usize,
    direction: &Array1<T>,
    epsilons: &[T],
) -> Result<InvarianceReport<T>> {
    if layer >= model.depth() {
        return Err(CrhError::InvalidArgument(format!("no layer {layer}")));
    }
    let d = model.layer(layer).d_in();
    if direction.len() != d {
        return Err(CrhError::DimensionMismatch {
            context: "invariance direction",
            expected: d,
            got: direction.len(),
        });
    }
    let norm = direction.dot(direction).sqrt();
    if (norm - T::one()).abs() > T::lit(1e-6) {
        return Err(CrhError::InvalidArgument(format!("direction must be unit norm, got {norm}")));
    }
    let positive: Vec<T> = epsilons.iter().copied().filter(|e| *e > T::zero()).collect();
    let span = positive.iter().fold(T::zero(), |m, e| m.max(*e))
        / positive.iter().fold(T::infinity(), |m, e| m.min(*e));
    if positive.len() < 3 || !(span >= T::lit(100.0)) {
        return Err(CrhError::InvalidArgument(
            "epsilons must include at least 3 positive values spanning two decades".into(),
        ));
    }

    let record = model.forward_capture(x)?;
    let h = &record.inputs[layer];
    let base = loss_eval(record.prediction().view(), targets, loss)?.per_sample;
    let mut deviations = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let shifted = h + &(direction * eps).insert_axis(Axis(0));
        let pred = model.forward_from(layer, shifted.view())?;
        let per = loss_eval(pred.view(), targets, loss)?.per_sample;
        let dev = (&per - &base).mapv(|v| v.abs()).mean().unwrap_or(T::zero());
        deviations.push(dev);
    }
    let scale = base.iter().fold(T::zero(), |m, v| m.max(v.abs())).max(T::one());
    let floor = T::epsilon() * T::lit(64.0) * scale;
    let points: Vec<(T, T)> = epsilons
        .iter()
        .zip(&deviations)
        .filter(|(e, d)| **e > T::zero() && **d > floor)
        .map(|(e, d)| (e.ln(), d.ln()))
        .collect();
    let exact = deviations.iter().all(|d| *d <= floor);
    let slope = if exact { None } else { least_squares_line(&points).ok() };

    let n = T::from_usize_lossy(h.nrows());
    let hh = SymMatrix::symmetrize(h.t().dot(h) / n);
    let back = model.backward_capture(&record, targets, loss)?;
    let ga = back.tapes[layer].g_a.slice(s![.., ..d]).to_owned();
    let gg = SymMatrix::symmetrize(ga.t().dot(&ga) / n);
    let vnorm = |v: Array1<T>| v.dot(&v).sqrt();
    Ok(InvarianceReport {
        epsilons: epsilons.to_vec(),
        deviations,
        slope,
        exact,
        norm_h_n: vnorm(hh.as_array().dot(direction)),
        norm_w_n: vnorm(model.layer(layer).weight.dot(direction)),
        norm_g_n: vnorm(gg.as_array().dot(direction)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NfaReport<T> {
    /// `α(W'ᵀW', E[JᵀJ])` with `J = ∂f/∂h_a'`; `None` when skipped.
    pub alpha_nfa: Option<T>,
    /// `α(W'ᵀW', G_a)`.
    pub alpha_enfa_backward: Option<T>,
    /// `α(W'W'ᵀ, G_b)`.
    pub alpha_enfa_forward: Option<T>,
    /// `E[∇_fℓ∇_fℓᵀ]`.
    pub b_matrix: SymMatrix<T>,
}

/// Largest output dimension for which Jacobians are materialized.
pub const MAX_JACOBIAN_OUTPUTS: usize = 64;

/// Feature-ansatz scores of `layer`. With `b_override = Some(B)`, `G_a` is
/// replaced by `E[Jᵀ B J]`, which makes the ansatz and its equivariant form
/// coincide whenever `B ∝ I`.
pub fn nfa_check<T: Real>(
    model: &MlpModel<T>,
    x: ArrayView2<T>,
    targets: &Targets<T>,
    loss: Loss,
    layer: usize,
    b_override: Option<&SymMatrix<T>>,
) -> Result<NfaReport<T>> {
    if layer >= model.depth() {
        return Err(CrhError::InvalidArgument(format!("no layer {layer}")));
    }
    let record = model.forward_capture(x)?;
    let back = model.backward_capture(&record, targets, loss)?;
    let set = conjugate_set(model, &back.tapes, layer, MomentMode::Raw)?;
    let k = model.output_dim();
    if let Some(b) = b_override {
        if b.dim() != k {
            return Err(CrhError::DimensionMismatch {
                context: "B override",
                expected: k,
                got: b.dim(),
            });
        }
    }
    let jac = if k <= MAX_JACOBIAN_OUTPUTS {
        Some(model.output_jacobians(&record, layer))
    } else {
        if b_override.is_some() {
            return Err(CrhError::InvalidArgument(format!(
                "output dim {k} too large for Jacobian materialization"
            )));
        }
        None
    };
    let n = T::from_usize_lossy(record.batch_size());
    let alpha_nfa = jac.as_ref().and_then(|js| {
        let d = js[0].ncols();
        let mut m = Array2::<T>::zeros((d, d));
        for j in js {
            m += &j.t().dot(j);
        }
        let m = SymMatrix::symmetrize(m / n);
        pearson_alignment(&set.z_a, &m).ok().map(|s| s.value())
    });
    let g_a = match (b_override, &jac) {
        (Some(b), Some(js)) => {
            let d = js[0].ncols();
            let mut m = Array2::<T>::zeros((d, d));
            for (p, jp) in js.iter().enumerate() {
                for (q, jq) in js.iter().enumerate() {
                    let c = b.get(p, q);
                    if c != T::zero() {
                        m += &(jp.t().dot(jq) * c);
                    }
                }
            }
            SymMatrix::symmetrize(m / n)
        }
        _ => set.g_a.clone(),
    };
    Ok(NfaReport {
        alpha_nfa,
        alpha_enfa_backward: pearson_alignment(&set.z_a, &g_a).ok().map(|s| s.value()),
        alpha_enfa_forward: pearson_alignment(&set.z_b, &set.g_b).ok().map(|s| s.value()),
        b_matrix: back.loss.b_matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::init_mlp;

    #[test]
    fn every_phase_constructs_with_exact_assumptions() {
        for phase in PhaseId::table() {
            for (d_in, d_out) in [(12, 12), (6, 9), (10, 5), (4, 4)] {
                let inst = synth_phase_instance::<f64>(phase, d_in, d_out, 3).unwrap();
                let r = six_alignments(&inst.conjugate_set());
                for rel in assumed_relations(phase) {
                    let s = r.score(rel).unwrap();
                    assert!(s >= 1.0 - 1e-12, "{phase} {d_in}x{d_out} {rel}: {s}");
                }
            }
        }
    }

    #[test]
    fn crh_instance_has_all_six_at_one() {
        let inst = synth_phase_instance::<f64>(PhaseId::Crh, 8, 8, 11).unwrap();
        let r = six_alignments(&inst.conjugate_set());
        for rel in Relation::ALL {
            assert!((r.score(rel).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instances_are_reproducible() {
        let a = synth_phase_instance::<f64>(PhaseId::Numbered(5), 7, 7, 42).unwrap();
        let b = synth_phase_instance::<f64>(PhaseId::Numbered(5), 7, 7, 42).unwrap();
        assert_eq!(a, b);
        let c = synth_phase_instance::<f64>(PhaseId::Numbered(5), 7, 7, 43).unwrap();
        assert_ne!(a.w, c.w);
    }

    #[test]
    fn constructor_rejects_small_dims_and_open_phases() {
        assert!(synth_phase_instance::<f64>(PhaseId::Numbered(1), 3, 8, 0).is_err());
        assert!(synth_phase_instance::<f64>(PhaseId::Partial, 8, 8, 0).is_err());
    }

    #[test]
    fn phase_five_cubic_backward_law() {
        let inst = synth_phase_instance::<f64>(PhaseId::Numbered(5), 10, 10, 1).unwrap();
        let check = verify_power_law(&inst.conjugate_set(), PhaseId::Numbered(5), 1e-10).unwrap();
        let hg = check
            .relations
            .iter()
            .find(|r| r.side == Side::A && r.lhs == (Mat::H, 3) && r.rhs == (Mat::G, 1))
            .unwrap();
        assert!(hg.alignment.unwrap() >= 0.999);
    }

    #[test]
    fn phase_eight_forward_exponent_two() {
        let inst = synth_phase_instance::<f64>(PhaseId::Numbered(8), 12, 12, 2).unwrap();
        let check = verify_power_law(&inst.conjugate_set(), PhaseId::Numbered(8), 1e-10).unwrap();
        let hz = check
            .relations
            .iter()
            .find(|r| r.side == Side::B && r.lhs.0 == Mat::H && r.rhs.0 == Mat::Z)
            .unwrap();
        assert!((hz.fit.unwrap().exponent - 2.0).abs() < 0.05);
    }

    #[test]
    fn master_checks_pass_on_all_phases() {
        for phase in PhaseId::table() {
            let inst = synth_phase_instance::<f64>(phase, 12, 12, 5).unwrap();
            let m = check_master(&inst, 1e-10).unwrap();
            let bad: Vec<_> = m.failures().collect();
            assert!(bad.is_empty(), "{phase}: {bad:?}");
            assert!(m.checks.iter().any(|c| c.part == 4));
        }
    }

    #[test]
    fn master_check_works_in_f32() {
        let inst = synth_phase_instance::<f32>(PhaseId::Numbered(8), 8, 8, 1).unwrap();
        let m = check_master(&inst, 1e-5).unwrap();
        assert!(m
            .checks
            .iter()
            .filter(|c| c.part == 2 && c.at_least)
            .all(|c| c.pass));
    }

    #[test]
    fn explicit_collapse_construction_is_perfect() {
        let (model, x, labels) = collapse_instance::<f64>(4, 10, 0.8, 5, 17).unwrap();
        let r = nc_check(&model, x.view(), &labels, Loss::Mse, true, MomentMode::Raw).unwrap();
        assert!(r.nc1.abs() < 1e-20);
        assert!(r.nc2 <= 1e-10);
        assert!((r.nc3.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.nc4, 1.0);
        assert!((r.zeta - 0.8).abs() < 1e-12);
        assert!(r.interpolation_error < 1e-12);
        assert!((r.b_isotropy.unwrap() - 1.0).abs() < 1e-12);
        for rel in Relation::ALL.iter().filter(|r| r.side == Side::A) {
            assert!((r.alignments.score(*rel).unwrap() - 1.0).abs() < 1e-12, "{rel}");
        }
    }

    #[test]
    fn random_model_is_far_from_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = init_mlp::<f64>(&[10, 32, 32, 4], Activation::Relu, false, 8).unwrap();
        let x = gaussian(200, 10, &mut rng);
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let r = nc_check(&model, x.view(), &labels, Loss::Mse, false, MomentMode::Raw).unwrap();
        assert!(r.nc1 > 0.5, "{}", r.nc1);
        assert!(r.nc3.unwrap() < 0.3, "{:?}", r.nc3);
        let bad = [0usize, 0, 0, 1, 1, 1, 2, 2, 2, 3];
        assert!(nc_check(&model, x.slice(s![..10, ..]), &bad, Loss::Mse, false, MomentMode::Raw).is_err());
    }

    #[test]
    fn invariance_slopes_on_collapsed_model() {
        // add an output that reads a direction orthogonal to every mean so the
        // loss sees that direction only at second order
        let (base, x, labels) = collapse_instance::<f64>(4, 8, 0.7, 5, 17).unwrap();
        let mut w = Array2::zeros((5, 8));
        w.slice_mut(s![..4, ..]).assign(&base.layer(0).weight);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = random_orthonormal(8, &mut rng).unwrap();
        let n_hat = q.column(6).to_owned();
        w.row_mut(4).assign(&n_hat);
        let model = MlpModel::new(vec![Linear { weight: w, bias: None }], Activation::Identity).unwrap();
        let mut y = Array2::zeros((labels.len(), 5));
        for (i, c) in labels.iter().enumerate() {
            y[[i, *c]] = 1.0;
        }
        let t = Targets::Regression(y);
        let eps: Vec<f64> = (0..7).map(|k| 10f64.powf(-4.0 + 0.5 * k as f64)).chain([0.0]).collect();
        let kernel = invariance_check(&model, x.view(), &t, Loss::Mse, 0, &n_hat, &eps).unwrap();
        assert_eq!(*kernel.deviations.last().unwrap(), 0.0);
        assert!((kernel.slope.unwrap().exponent - 2.0).abs() < 1e-6);
        assert!(kernel.norm_h_n < 1e-12 && kernel.norm_g_n < 1e-12);

        let top = q.column(0).to_owned();
        let r = invariance_check(&model, x.view(), &t, Loss::Mse, 0, &top, &eps).unwrap();
        assert!((r.slope.unwrap().exponent - 1.0).abs() < 0.05, "{:?}", r.slope);

        let free = q.column(7).to_owned();
        let r = invariance_check(&model, x.view(), &t, Loss::Mse, 0, &free, &eps).unwrap();
        assert!(r.exact && r.slope.is_none());

        assert!(invariance_check(&model, x.view(), &t, Loss::Mse, 0, &(&top * 2.0), &eps).is_err());
        assert!(invariance_check(&model, x.view(), &t, Loss::Mse, 0, &top, &[0.1, 0.2, 0.3]).is_err());
    }

    #[test]
    fn nfa_equals_enfa_under_isotropic_b() {
        let model = init_mlp::<f64>(&[5, 8, 8, 3], Activation::Tanh, true, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(64, 5, &mut rng);
        let y = gaussian(64, 3, &mut rng);
        let t = Targets::Regression(y);
        let b = SymMatrix::identity(3).scaled(0.37);
        for layer in 0..3 {
            let r = nfa_check(&model, x.view(), &t, Loss::Mse, layer, Some(&b)).unwrap();
            let d = (r.alpha_nfa.unwrap() - r.alpha_enfa_backward.unwrap()).abs();
            assert!(d < 1e-8, "layer {layer}: {d}");
        }
    }

    #[test]
    fn nfa_scalar_output_constant_residual() {
        // linear model on ±1 inputs with targets offset by a constant residual
        let model = init_mlp::<f64>(&[4, 6, 1], Activation::Tanh, false, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(50, 4, &mut rng);
        let f = model.predict(x.view()).unwrap();
        let signs = Array2::from_shape_fn((50, 1), |(i, _)| if i % 2 == 0 { 0.5 } else { -0.5 });
        let t = Targets::Regression(&f + &signs);
        let r = nfa_check(&model, x.view(), &t, Loss::Mse, 0, None).unwrap();
        assert!((r.alpha_nfa.unwrap() - r.alpha_enfa_backward.unwrap()).abs() < 1e-6);
        assert!((r.b_matrix.get(0, 0) - 0.25).abs() < 1e-12);
    }
}
