//! Second-moment estimators and the per-layer six-matrix snapshot.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{CrhError, Result};
use crate::linalg::{pearson_alignment, AlignmentScore, SymMatrix};
use crate::netcore::{LayerTape, MlpModel};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MomentMode {
    /// Uncentered `E[vvᵀ]` of the raw vectors.
    Raw,
    /// Each vector scaled to unit norm, then the covariance is taken.
    CenteredNormalized,
}

impl MomentMode {
    pub fn name(self) -> &'static str {
        match self {
            MomentMode::Raw => "raw",
            MomentMode::CenteredNormalized => "centered_normalized",
        }
    }

    fn options(self) -> (bool, bool) {
        match self {
            MomentMode::Raw => (false, false),
            MomentMode::CenteredNormalized => (true, true),
        }
    }
}

/// Streaming estimator of `E[x yᵀ]` or `cov(x, y)`.
///
/// Keeps the running means and the centered co-moment, updated batch-wise
/// with the pairwise merge rule, so shards can be combined in any fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMomentAccumulator<T> {
    count: usize,
    skipped: usize,
    mean_x: Array1<T>,
    mean_y: Array1<T>,
    comoment: Array2<T>,
    normalize: bool,
    center: bool,
}

impl<T: Real> CrossMomentAccumulator<T> {
    pub fn new(dim_x: usize, dim_y: usize, normalize: bool, center: bool) -> Self {
        Self {
            count: 0,
            skipped: 0,
            mean_x: Array1::zeros(dim_x),
            mean_y: Array1::zeros(dim_y),
            comoment: Array2::zeros((dim_x, dim_y)),
            normalize,
            center,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Samples dropped because normalization hit a zero vector.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.mean_x.len(), self.mean_y.len())
    }

    pub fn accumulate(&mut self, x: ArrayView1<T>, y: ArrayView1<T>) -> Result<()> {
        let xs = x.insert_axis(Axis(0));
        let ys = y.insert_axis(Axis(0));
        self.accumulate_batch(xs, ys)
    }

    /// Adds every row pair of `xs` and `ys`.
    pub fn accumulate_batch(&mut self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Result<()> {
        let (dx, dy) = self.dims();
        if xs.ncols() != dx {
            return Err(CrhError::DimensionMismatch {
                context: "accumulator x dim",
                expected: dx,
                got: xs.ncols(),
            });
        }
        if ys.ncols() != dy {
            return Err(CrhError::DimensionMismatch {
                context: "accumulator y dim",
                expected: dy,
                got: ys.ncols(),
            });
        }
        if xs.nrows() != ys.nrows() {
            return Err(CrhError::DimensionMismatch {
                context: "accumulator sample count",
                expected: xs.nrows(),
                got: ys.nrows(),
            });
        }
        let (xs, ys) = if self.normalize {
            let keep: Vec<usize> = (0..xs.nrows())
                .filter(|&i| row_norm(xs.row(i)) > T::zero() && row_norm(ys.row(i)) > T::zero())
                .collect();
            self.skipped += xs.nrows() - keep.len();
            (normalized_rows(xs, &keep), normalized_rows(ys, &keep))
        } else {
            (xs.to_owned(), ys.to_owned())
        };
        let n = xs.nrows();
        if n == 0 {
            return Ok(());
        }
        let nf = T::from_usize_lossy(n);
        let mx = xs.sum_axis(Axis(0)) / nf;
        let my = ys.sum_axis(Axis(0)) / nf;
        let cx = &xs - &mx.view().insert_axis(Axis(0));
        let cy = &ys - &my.view().insert_axis(Axis(0));
        let batch = Self {
            count: n,
            skipped: 0,
            mean_x: mx,
            mean_y: my,
            comoment: cx.t().dot(&cy),
            normalize: self.normalize,
            center: self.center,
        };
        self.merge_counts(&batch);
        Ok(())
    }

    /// Combines another accumulator into this one.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(CrhError::DimensionMismatch {
                context: "merged accumulator dims",
                expected: self.dims().0 * self.dims().1,
                got: other.dims().0 * other.dims().1,
            });
        }
        if (self.normalize, self.center) != (other.normalize, other.center) {
            return Err(CrhError::InvalidArgument(
                "merging accumulators with different options".into(),
            ));
        }
        self.skipped += other.skipped;
        self.merge_counts(other);
        Ok(())
    }

    fn merge_counts(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            self.count = other.count;
            self.mean_x.assign(&other.mean_x);
            self.mean_y.assign(&other.mean_y);
            self.comoment.assign(&other.comoment);
            return;
        }
        let na = T::from_usize_lossy(self.count);
        let nb = T::from_usize_lossy(other.count);
        let n = na + nb;
        let dx = &other.mean_x - &self.mean_x;
        let dy = &other.mean_y - &self.mean_y;
        let w = na * nb / n;
        let outer = dx
            .view()
            .insert_axis(Axis(1))
            .dot(&dy.view().insert_axis(Axis(0)));
        self.comoment = &self.comoment + &other.comoment + &(outer * w);
        self.mean_x = &self.mean_x + &(dx * (nb / n));
        self.mean_y = &self.mean_y + &(dy * (nb / n));
        self.count += other.count;
    }

    pub fn mean_x(&self) -> &Array1<T> {
        &self.mean_x
    }

    pub fn mean_y(&self) -> &Array1<T> {
        &self.mean_y
    }

    /// `E[xyᵀ]` when centering is off, `cov(x, y)` when on.
    pub fn finalize(&self) -> Result<Array2<T>> {
        if self.count == 0 {
            return Err(CrhError::Empty("moment accumulator"));
        }
        let n = T::from_usize_lossy(self.count);
        let cov = &self.comoment / n;
        if self.center {
            Ok(cov)
        } else {
            let outer = self
                .mean_x
                .view()
                .insert_axis(Axis(1))
                .dot(&self.mean_y.view().insert_axis(Axis(0)));
            Ok(cov + outer)
        }
    }
}

/// Streaming estimator of `E[vvᵀ]` or `cov(v, v)` for one vector stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator<T> {
    inner: CrossMomentAccumulator<T>,
}

impl<T: Real> MomentAccumulator<T> {
    pub fn new(dim: usize, normalize: bool, center: bool) -> Self {
        Self {
            inner: CrossMomentAccumulator::new(dim, dim, normalize, center),
        }
    }

    pub fn for_mode(dim: usize, mode: MomentMode) -> Self {
        let (normalize, center) = mode.options();
        Self::new(dim, normalize, center)
    }

    pub fn dim(&self) -> usize {
        self.inner.dims().0
    }

    pub fn count(&self) -> usize {
        self.inner.count()
    }

    pub fn skipped(&self) -> usize {
        self.inner.skipped()
    }

    pub fn mean(&self) -> &Array1<T> {
        self.inner.mean_x()
    }

    pub fn accumulate(&mut self, v: ArrayView1<T>) -> Result<()> {
        self.inner.accumulate(v, v)
    }

    pub fn accumulate_batch(&mut self, vs: ArrayView2<T>) -> Result<()> {
        self.inner.accumulate_batch(vs, vs)
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        self.inner.merge(&other.inner)
    }

    pub fn finalize(&self) -> Result<SymMatrix<T>> {
        Ok(SymMatrix::symmetrize(self.inner.finalize()?))
    }
}

fn row_norm<T: Real>(r: ArrayView1<T>) -> T {
    r.iter().map(|v| *v * *v).sum::<T>().sqrt()
}

fn normalized_rows<T: Real>(a: ArrayView2<T>, keep: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros((keep.len(), a.ncols()));
    for (o, &i) in keep.iter().enumerate() {
        let n = row_norm(a.row(i));
        out.row_mut(o).assign(&a.row(i).mapv(|v| v / n));
    }
    out
}

/// The six conjugate matrices of one linear layer, plus the norm scalars and
/// symmetrized cross terms used by the balance equations.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateSet<T> {
    pub layer_index: usize,
    pub mode: MomentMode,
    pub samples: usize,
    pub h_a: SymMatrix<T>,
    pub g_a: SymMatrix<T>,
    /// `W'ᵀW'`
    pub z_a: SymMatrix<T>,
    pub h_b: SymMatrix<T>,
    pub g_b: SymMatrix<T>,
    /// `W'W'ᵀ`
    pub z_b: SymMatrix<T>,
    /// `E‖g_b‖²` of the raw vectors.
    pub norm_gb: T,
    /// `E‖h_a‖²` of the raw vectors (the bias coordinate included).
    pub norm_ha: T,
    /// `sym(E[g_b h_bᵀ])`
    pub cross_f: SymMatrix<T>,
    /// `sym(E[g_a h_aᵀ])`
    pub cross_b: SymMatrix<T>,
    /// `‖X − Xᵀ‖_F / ‖X‖_F` of the unsymmetrized forward cross term.
    pub asymmetry_f: T,
    pub asymmetry_b: T,
}

impl<T: Real> ConjugateSet<T> {
    /// Builds a set directly from matrices. Cross terms default to zero and
    /// the norm scalars to the traces of `H_a` and `G_b`.
    pub fn from_matrices(
        layer_index: usize,
        mode: MomentMode,
        w: ArrayView2<T>,
        h_a: SymMatrix<T>,
        g_a: SymMatrix<T>,
        h_b: SymMatrix<T>,
        g_b: SymMatrix<T>,
    ) -> Result<Self> {
        let (d_out, d_in) = w.dim();
        check_dim("H_a", &h_a, d_in)?;
        check_dim("G_a", &g_a, d_in)?;
        check_dim("H_b", &h_b, d_out)?;
        check_dim("G_b", &g_b, d_out)?;
        Ok(Self {
            layer_index,
            mode,
            samples: 0,
            norm_gb: g_b.trace(),
            norm_ha: h_a.trace(),
            z_a: SymMatrix::gram_cols(w),
            z_b: SymMatrix::gram_rows(w),
            h_a,
            g_a,
            h_b,
            g_b,
            cross_f: SymMatrix::zeros(d_out),
            cross_b: SymMatrix::zeros(d_in),
            asymmetry_f: T::zero(),
            asymmetry_b: T::zero(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.h_a.dim()
    }

    pub fn d_out(&self) -> usize {
        self.h_b.dim()
    }

    /// The six matrices in the order `H_a, G_a, Z_a, H_b, G_b, Z_b`.
    pub fn matrices(&self) -> [&SymMatrix<T>; 6] {
        [&self.h_a, &self.g_a, &self.z_a, &self.h_b, &self.g_b, &self.z_b]
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
            && self.cross_f.is_finite()
            && self.cross_b.is_finite()
            && self.norm_gb.is_finite()
            && self.norm_ha.is_finite()
    }
}

fn check_dim<T: Real>(context: &'static str, m: &SymMatrix<T>, want: usize) -> Result<()> {
    if m.dim() != want {
        return Err(CrhError::DimensionMismatch {
            context,
            expected: want,
            got: m.dim(),
        });
    }
    Ok(())
}

fn asymmetry<T: Real>(x: &Array2<T>) -> T {
    let norm = x.iter().map(|v| *v * *v).sum::<T>().sqrt();
    if norm == T::zero() {
        return T::zero();
    }
    let diff = x - &x.t();
    diff.iter().map(|v| *v * *v).sum::<T>().sqrt() / norm
}

/// Estimates the conjugate set of `layer` from every tape of that layer in
/// `tapes` (tapes of other layers are ignored, several batches may be given).
pub fn conjugate_set<T: Real>(
    model: &MlpModel<T>,
    tapes: &[LayerTape<T>],
    layer: usize,
    mode: MomentMode,
) -> Result<ConjugateSet<T>> {
    if layer >= model.depth() {
        return Err(CrhError::InvalidArgument(format!("no layer {layer}")));
    }
    let w = model.layer(layer).augmented_weight();
    let (d_out, d_in) = w.dim();
    let (normalize, center) = mode.options();
    let mut ha = MomentAccumulator::new(d_in, normalize, center);
    let mut ga = MomentAccumulator::new(d_in, normalize, center);
    let mut hb = MomentAccumulator::new(d_out, normalize, center);
    let mut gb = MomentAccumulator::new(d_out, normalize, center);
    let mut xf = CrossMomentAccumulator::new(d_out, d_out, normalize, center);
    let mut xb = CrossMomentAccumulator::new(d_in, d_in, normalize, center);
    let mut sq_gb = T::zero();
    let mut sq_ha = T::zero();
    let mut samples = 0usize;
    for tape in tapes.iter().filter(|t| t.layer_index == layer) {
        if tape.h_a.ncols() != d_in || tape.h_b.ncols() != d_out {
            return Err(CrhError::DimensionMismatch {
                context: "tape vs layer width",
                expected: d_in,
                got: tape.h_a.ncols(),
            });
        }
        ha.accumulate_batch(tape.h_a.view())?;
        ga.accumulate_batch(tape.g_a.view())?;
        hb.accumulate_batch(tape.h_b.view())?;
        gb.accumulate_batch(tape.g_b.view())?;
        xf.accumulate_batch(tape.g_b.view(), tape.h_b.view())?;
        xb.accumulate_batch(tape.g_a.view(), tape.h_a.view())?;
        sq_gb += tape.g_b.iter().map(|v| *v * *v).sum::<T>();
        sq_ha += tape.h_a.iter().map(|v| *v * *v).sum::<T>();
        samples += tape.batch_size();
    }
    if samples == 0 {
        return Err(CrhError::Empty("layer tapes"));
    }
    if samples < d_in.max(d_out) {
        log::warn!("layer {layer}: {samples} samples for width {} gives rank-deficient moments", d_in.max(d_out));
    }
    let n = T::from_usize_lossy(samples);
    let cf = xf.finalize()?;
    let cb = xb.finalize()?;
    let set = ConjugateSet {
        layer_index: layer,
        mode,
        samples,
        h_a: ha.finalize()?,
        g_a: ga.finalize()?,
        z_a: SymMatrix::gram_cols(w.view()),
        h_b: hb.finalize()?,
        g_b: gb.finalize()?,
        z_b: SymMatrix::gram_rows(w.view()),
        norm_gb: sq_gb / n,
        norm_ha: sq_ha / n,
        asymmetry_f: asymmetry(&cf),
        asymmetry_b: asymmetry(&cb),
        cross_f: SymMatrix::symmetrize(cf),
        cross_b: SymMatrix::symmetrize(cb),
    };
    if !set.is_finite() {
        return Err(CrhError::NonFinite {
            context: format!("conjugate set of layer {layer}"),
        });
    }
    Ok(set)
}

/// Relative Frobenius change `‖X − X_prev‖ / ‖X_prev‖` for each matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityResidual<T> {
    pub layer_index: usize,
    pub h_a: T,
    pub g_a: T,
    pub z_a: T,
    pub h_b: T,
    pub g_b: T,
    pub z_b: T,
}

impl<T: Real> StationarityResidual<T> {
    pub fn values(&self) -> [T; 6] {
        [self.h_a, self.g_a, self.z_a, self.h_b, self.g_b, self.z_b]
    }

    pub fn max(&self) -> T {
        self.values().into_iter().fold(T::zero(), |a, b| a.max(b))
    }
}

fn relative_change<T: Real>(cur: &SymMatrix<T>, prev: &SymMatrix<T>) -> T {
    let delta = cur.sub(prev).frobenius();
    let base = prev.frobenius();
    if base > T::zero() {
        delta / base
    } else if delta == T::zero() {
        T::zero()
    } else {
        T::infinity()
    }
}

pub fn stationarity_residual<T: Real>(current: &ConjugateSet<T>, previous: &ConjugateSet<T>) -> Result<StationarityResidual<T>> {
    if current.mode != previous.mode {
        return Err(CrhError::ModeMismatch(current.mode, previous.mode));
    }
    if current.layer_index != previous.layer_index {
        return Err(CrhError::InvalidArgument(format!(
            "stationarity across layers {} and {}",
            current.layer_index, previous.layer_index
        )));
    }
    if current.d_in() != previous.d_in() || current.d_out() != previous.d_out() {
        return Err(CrhError::DimensionMismatch {
            context: "stationarity set shapes",
            expected: previous.d_in(),
            got: current.d_in(),
        });
    }
    Ok(StationarityResidual {
        layer_index: current.layer_index,
        h_a: relative_change(&current.h_a, &previous.h_a),
        g_a: relative_change(&current.g_a, &previous.g_a),
        z_a: relative_change(&current.z_a, &previous.z_a),
        h_b: relative_change(&current.h_b, &previous.h_b),
        g_b: relative_change(&current.g_b, &previous.g_b),
        z_b: relative_change(&current.z_b, &previous.z_b),
    })
}

/// Time series of stationarity residuals for one layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StationarityTrace<T> {
    pub entries: Vec<(u64, StationarityResidual<T>)>,
}

impl<T: Real> StationarityTrace<T> {
    pub fn push(&mut self, step: u64, r: StationarityResidual<T>) {
        self.entries.push((step, r));
    }

    pub fn last(&self) -> Option<&StationarityResidual<T>> {
        self.entries.last().map(|(_, r)| r)
    }
}

/// Agreement of the cross terms with the stationary-point prediction
/// `E[g_b h_bᵀ] = γWWᵀ`, `E[g_a h_aᵀ] = γWᵀW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMinBalance<T> {
    pub alpha_f: AlignmentScore<T>,
    pub alpha_b: AlignmentScore<T>,
    /// `None` when `γ = 0`.
    pub rel_err_f: Option<T>,
    pub rel_err_b: Option<T>,
}

pub fn local_min_balance<T: Real>(set: &ConjugateSet<T>, gamma: T) -> Result<LocalMinBalance<T>> {
    if set.mode != MomentMode::Raw {
        return Err(CrhError::ModeMismatch(MomentMode::Raw, set.mode));
    }
    if !(gamma >= T::zero() && gamma.is_finite()) {
        return Err(CrhError::InvalidArgument(format!("weight decay must be >= 0, got {gamma}")));
    }
    let rel = |cross: &SymMatrix<T>, z: &SymMatrix<T>| {
        if gamma == T::zero() {
            return None;
        }
        let target = z.scaled(gamma);
        let base = target.frobenius();
        (base > T::zero()).then(|| cross.sub(&target).frobenius() / base)
    };
    Ok(LocalMinBalance {
        alpha_f: pearson_alignment(&set.cross_f, &set.z_b)?,
        alpha_b: pearson_alignment(&set.cross_b, &set.z_a)?,
        rel_err_f: rel(&set.cross_f, &set.z_b),
        rel_err_b: rel(&set.cross_b, &set.z_a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::eigh;
    use crate::netcore::{init_mlp, Activation, Linear, Loss, Targets};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn single_vector_centered_is_zero() {
        let mut acc = MomentAccumulator::<f64>::new(3, false, true);
        acc.accumulate(array![1.0, 2.0, 3.0].view()).unwrap();
        assert!(acc.finalize().unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn symmetric_pair_centered_gives_outer() {
        let v = array![1.0, -2.0, 0.5];
        let mut acc = MomentAccumulator::<f64>::new(3, false, true);
        acc.accumulate(v.view()).unwrap();
        acc.accumulate(v.mapv(|x| -x).view()).unwrap();
        let want = SymMatrix::outer(v.view());
        assert!(acc.finalize().unwrap().sub(&want).max_abs() < 1e-15);
    }

    #[test]
    fn streaming_matches_two_pass() {
        let x = gaussian(1000, 6, 4) + 3.0;
        let mean = x.mean_axis(Axis(0)).unwrap();
        let c = &x - &mean.view().insert_axis(Axis(0));
        let two_pass_cov = c.t().dot(&c) / 1000.0;
        let two_pass_raw = x.t().dot(&x) / 1000.0;

        let mut one_by_one = MomentAccumulator::<f64>::new(6, false, true);
        for r in x.rows() {
            one_by_one.accumulate(r).unwrap();
        }
        assert!(max_diff(one_by_one.finalize().unwrap().as_array(), &two_pass_cov) < 1e-10);

        let mut shards = MomentAccumulator::<f64>::new(6, false, false);
        for chunk in x.axis_chunks_iter(Axis(0), 77) {
            let mut s = MomentAccumulator::new(6, false, false);
            s.accumulate_batch(chunk).unwrap();
            shards.merge(&s).unwrap();
        }
        assert!(max_diff(shards.finalize().unwrap().as_array(), &two_pass_raw) < 1e-10);
    }

    #[test]
    fn normalization_gives_unit_trace_and_skips_zeros() {
        let mut x = gaussian(50, 4, 9);
        x.row_mut(3).fill(0.0);
        let mut acc = MomentAccumulator::<f64>::new(4, true, false);
        acc.accumulate_batch(x.view()).unwrap();
        assert_eq!(acc.count(), 49);
        assert_eq!(acc.skipped(), 1);
        assert!((acc.finalize().unwrap().trace() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn accumulator_rejects_wrong_dim_and_empty() {
        let mut acc = MomentAccumulator::<f64>::new(3, false, false);
        assert!(acc.accumulate(array![1.0, 2.0].view()).is_err());
        assert!(matches!(acc.finalize(), Err(CrhError::Empty(_))));
    }

    #[test]
    fn moments_are_psd() {
        let x = gaussian(20, 8, 2);
        let mut acc = MomentAccumulator::<f64>::new(8, true, true);
        acc.accumulate_batch(x.view()).unwrap();
        let e = eigh(&acc.finalize().unwrap()).unwrap();
        let lmax = e.eigenvalues[0];
        assert!(e.eigenvalues.iter().all(|l| *l >= -1e-10 * lmax));
    }

    fn tapes_for(model: &MlpModel<f64>, n: usize, seed: u64) -> Vec<LayerTape<f64>> {
        let x = gaussian(n, model.input_dim(), seed);
        let y = gaussian(n, model.output_dim(), seed + 1);
        let rec = model.forward_capture(x.view()).unwrap();
        model
            .backward_capture(&rec, &Targets::Regression(y), Loss::Mse)
            .unwrap()
            .tapes
    }

    #[test]
    fn permutation_weight_gives_identity_gram() {
        let model = MlpModel::new(
            vec![Linear { weight: array![[0.0, 1.0], [1.0, 0.0]], bias: None }],
            Activation::Identity,
        )
        .unwrap();
        let tapes = tapes_for(&model, 10, 0);
        let set = conjugate_set(&model, &tapes, 0, MomentMode::Raw).unwrap();
        assert_eq!(set.z_a, SymMatrix::identity(2));
        assert_eq!(set.z_b, SymMatrix::identity(2));
    }

    #[test]
    fn raw_mode_congruence_and_duality() {
        let model = init_mlp::<f64>(&[6, 9, 4, 3], Activation::Tanh, true, 5).unwrap();
        let tapes = tapes_for(&model, 200, 11);
        for k in 0..model.depth() {
            let set = conjugate_set(&model, &tapes, k, MomentMode::Raw).unwrap();
            let w = model.layer(k).augmented_weight();
            let hb = set.h_a.congruence(w.view());
            let ga = set.g_b.congruence(w.t());
            assert!(hb.sub(&set.h_b).max_abs() < 1e-8);
            assert!(ga.sub(&set.g_a).max_abs() < 1e-8);
            assert!((set.g_a.trace() - ga.trace()).abs() < 1e-8);

            let ea = eigh(&set.z_a).unwrap().eigenvalues;
            let eb = eigh(&set.z_b).unwrap().eigenvalues;
            let r = ea.len().min(eb.len());
            for i in 0..r {
                assert!((ea[i] - eb[i]).abs() < 1e-8, "layer {k} eig {i}");
            }
            let n = set.samples as f64;
            let want: f64 = tapes[k].h_a.iter().map(|v| v * v).sum::<f64>() / n;
            assert!((set.norm_ha - want).abs() < 1e-12);
        }
    }

    #[test]
    fn centered_mode_keeps_raw_scalars() {
        let model = init_mlp::<f64>(&[5, 7, 2], Activation::Relu, true, 1).unwrap();
        let tapes = tapes_for(&model, 64, 3);
        let raw = conjugate_set(&model, &tapes, 1, MomentMode::Raw).unwrap();
        let cn = conjugate_set(&model, &tapes, 1, MomentMode::CenteredNormalized).unwrap();
        assert_eq!(raw.norm_ha, cn.norm_ha);
        assert_eq!(raw.norm_gb, cn.norm_gb);
        assert!(cn.h_a.trace() <= 1.0 + 1e-12);
        assert!(matches!(
            conjugate_set(&model, &[], 0, MomentMode::Raw),
            Err(CrhError::Empty(_))
        ));
    }

    #[test]
    fn multiple_batches_equal_one_big_batch() {
        let model = init_mlp::<f64>(&[4, 6, 2], Activation::Tanh, false, 2).unwrap();
        let x = gaussian(90, 4, 6);
        let y = gaussian(90, 2, 7);
        let full = {
            let rec = model.forward_capture(x.view()).unwrap();
            model.backward_capture(&rec, &Targets::Regression(y.clone()), Loss::Mse).unwrap().tapes
        };
        let mut split = Vec::new();
        for (xs, ys) in x.axis_chunks_iter(Axis(0), 30).zip(y.axis_chunks_iter(Axis(0), 30)) {
            let rec = model.forward_capture(xs).unwrap();
            split.extend(
                model
                    .backward_capture(&rec, &Targets::Regression(ys.to_owned()), Loss::Mse)
                    .unwrap()
                    .tapes,
            );
        }
        for mode in [MomentMode::Raw, MomentMode::CenteredNormalized] {
            let a = conjugate_set(&model, &full, 0, mode).unwrap();
            let b = conjugate_set(&model, &split, 0, mode).unwrap();
            assert_eq!(b.samples, 90);
            assert!(a.g_a.sub(&b.g_a).max_abs() < 1e-12);
            assert!(a.cross_b.sub(&b.cross_b).max_abs() < 1e-12);
        }
    }

    fn set_from(h: SymMatrix<f64>) -> ConjugateSet<f64> {
        let w = Array2::eye(2);
        ConjugateSet::from_matrices(0, MomentMode::Raw, w.view(), h.clone(), h.clone(), h.clone(), h).unwrap()
    }

    #[test]
    fn stationarity_identical_and_doubled() {
        let h = SymMatrix::from_row_major(2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let a = set_from(h.clone());
        let r = stationarity_residual(&a, &a).unwrap();
        assert_eq!(r.max(), 0.0);
        let mut b = a.clone();
        b.h_a = h.scaled(2.0);
        let r = stationarity_residual(&b, &a).unwrap();
        assert!((r.h_a - 1.0).abs() < 1e-15);
        assert_eq!(r.g_a, 0.0);
        let mut c = a.clone();
        c.mode = MomentMode::CenteredNormalized;
        assert!(matches!(stationarity_residual(&c, &a), Err(CrhError::ModeMismatch(..))));
    }

    #[test]
    fn local_min_balance_exact_construction() {
        let w = array![[1.0, 0.5, -0.2], [0.3, -1.0, 0.4]];
        let gamma = 0.01;
        let h = SymMatrix::<f64>::identity(3);
        let g = SymMatrix::identity(2);
        let mut set = ConjugateSet::from_matrices(0, MomentMode::Raw, w.view(), h.clone(), h, g.clone(), g).unwrap();
        set.cross_f = set.z_b.scaled(gamma);
        set.cross_b = set.z_a.scaled(gamma);
        let b = local_min_balance(&set, gamma).unwrap();
        assert!(b.rel_err_f.unwrap() < 1e-15);
        assert!((b.alpha_f.value() - 1.0).abs() < 1e-12);
        assert!((b.alpha_b.value() - 1.0).abs() < 1e-12);
        let b0 = local_min_balance(&set, 0.0).unwrap();
        assert!(b0.rel_err_f.is_none());
        set.mode = MomentMode::CenteredNormalized;
        assert!(local_min_balance(&set, gamma).is_err());
    }

    #[test]
    fn cross_term_asymmetry_is_tracked() {
        let model = init_mlp::<f64>(&[3, 3], Activation::Identity, false, 1).unwrap();
        let tapes = tapes_for(&model, 5, 4);
        let set = conjugate_set(&model, &tapes, 0, MomentMode::Raw).unwrap();
        assert!(set.asymmetry_f >= 0.0);
        assert_eq!(set.cross_f.as_array(), &set.cross_f.as_array().t());
    }
}
