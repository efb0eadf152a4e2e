//! Dense symmetric linear algebra.
//!
//! Everything here is a pure function of its inputs. The eigensolver is a
//! cyclic Jacobi iteration with a fixed sweep order, so identical inputs give
//! bit-identical outputs; the pseudo-inverse and matrix powers are spectral
//! functions built on top of it.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{CrhError, Result};
use crate::scalar::Real;

/// Relative eigenvalue cutoff used by [`pinv`] and [`mat_pow`] when the
/// caller has no better value.
pub const DEFAULT_REL_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;

/// Dense symmetric matrix. Symmetry is enforced on ingest by averaging with
/// the transpose, so `entries[i][j] == entries[j][i]` holds bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<T> {
    data: Array2<T>,
}

impl<T: Real> SymMatrix<T> {
    /// Symmetrizes `a` as `(A + Aᵀ)/2` and checks that every entry is finite.
    pub fn new(a: Array2<T>) -> Result<Self> {
        let (rows, cols) = a.dim();
        if rows != cols {
            return Err(CrhError::NotSquare { rows, cols });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(CrhError::NonFinite {
                context: "symmetric matrix entries".into(),
            });
        }
        Ok(Self::symmetrize(a))
    }

    /// Row-major constructor.
    pub fn from_row_major(dim: usize, entries: Vec<T>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(CrhError::DimensionMismatch {
                context: "row-major entries",
                expected: dim * dim,
                got: entries.len(),
            });
        }
        let a = Array2::from_shape_vec((dim, dim), entries)
            .map_err(|e| CrhError::InvalidArgument(e.to_string()))?;
        Self::new(a)
    }

    pub(crate) fn symmetrize(mut a: Array2<T>) -> Self {
        let n = a.nrows();
        let half = T::lit(0.5);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = (a[[i, j]] + a[[j, i]]) * half;
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        Self { data: a }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: Array2::zeros((dim, dim)),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            data: Array2::eye(dim),
        }
    }

    pub fn from_diag(diag: &[T]) -> Self {
        Self {
            data: Array2::from_diag(&ArrayView1::from(diag)),
        }
    }

    /// `WᵀW` for a `rows × cols` matrix `W`.
    pub fn gram_cols(w: ArrayView2<T>) -> Self {
        Self::symmetrize(w.t().dot(&w))
    }

    /// `WWᵀ` for a `rows × cols` matrix `W`.
    pub fn gram_rows(w: ArrayView2<T>) -> Self {
        Self::symmetrize(w.dot(&w.t()))
    }

    /// Congruence transform `M A Mᵀ`.
    pub fn congruence(&self, m: ArrayView2<T>) -> Self {
        Self::symmetrize(m.dot(&self.data).dot(&m.t()))
    }

    /// `v vᵀ`.
    pub fn outer(v: ArrayView1<T>) -> Self {
        let n = v.len();
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                a[[i, j]] = v[i] * v[j];
            }
        }
        Self { data: a }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_array(&self) -> &Array2<T> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.data.view()
    }

    pub fn into_array(self) -> Array2<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[[i, j]]
    }

    pub fn row_major(&self) -> Vec<T> {
        self.data.iter().copied().collect()
    }

    pub fn trace(&self) -> T {
        self.data.diag().sum()
    }

    pub fn frobenius(&self) -> T {
        frobenius(self.data.view())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            data: &self.data * c,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            data: &self.data + &other.data,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            data: &self.data - &other.data,
        }
    }

    /// Symmetric part of a product, `sym(AB) = (AB + BA)/2`.
    pub fn sym_product(&self, other: &Self) -> Self {
        Self::symmetrize(self.data.dot(&other.data))
    }

    /// `P A P` for a projector (or any symmetric) `P`.
    pub fn sandwich(&self, p: &Self) -> Self {
        Self::symmetrize(p.data.dot(&self.data).dot(&p.data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> SymMatrix<U> {
        SymMatrix {
            data: self.data.mapv(|v| U::lit(v.to_f64_lossy())),
        }
    }
}

pub(crate) fn frobenius<T: Real>(a: ArrayView2<T>) -> T {
    a.iter().map(|v| *v * *v).sum::<T>().sqrt()
}

/// Eigensystem of a symmetric matrix: eigenvalues in descending order,
/// eigenvectors as the columns of an orthonormal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomp<T> {
    pub eigenvalues: Array1<T>,
    pub eigenvectors: Array2<T>,
}

impl<T: Real> SpectralDecomp<T> {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V f(Λ) Vᵀ`.
    pub fn map(&self, f: impl Fn(T) -> T) -> SymMatrix<T> {
        let v = &self.eigenvectors;
        let scaled_cols = v * &self.eigenvalues.mapv(f).insert_axis(Axis(0));
        SymMatrix::symmetrize(scaled_cols.dot(&v.t()))
    }

    pub fn reconstruct(&self) -> SymMatrix<T> {
        self.map(|l| l)
    }

    pub fn largest_abs(&self) -> T {
        self.eigenvalues
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn eigenvector(&self, k: usize) -> Array1<T> {
        self.eigenvectors.column(k).to_owned()
    }
}

/// Symmetric eigendecomposition.
///
/// Dimensions up to [`JACOBI_MAX_DIM`] use cyclic Jacobi: sweeps visit
/// `(p, q)` pairs in row-major order and stop once the off-diagonal Frobenius
/// norm drops below `1e-12 · ‖A‖_F` (or a few ulps for narrower scalars), with
/// at most 100 sweeps. Larger matrices go through Householder
/// tridiagonalization and implicit QL. Eigenvalues come out descending and
/// each eigenvector is signed so that its largest-magnitude component is
/// positive.
pub fn eigh<T: Real>(a: &SymMatrix<T>) -> Result<SpectralDecomp<T>> {
    if !a.is_finite() {
        return Err(CrhError::NonFinite {
            context: "eigh input".into(),
        });
    }
    let n = a.dim();
    let (values, vectors) = if n <= JACOBI_MAX_DIM {
        jacobi(a)
    } else {
        tridiagonal_ql(a)?
    };

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the solver-determined order for exact ties.
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap_or(std::cmp::Ordering::Equal));

    let mut eigenvalues = Array1::zeros(n);
    let mut eigenvectors = Array2::zeros((n, n));
    for (k, &src) in order.iter().enumerate() {
        eigenvalues[k] = values[src];
        let col = |i: usize| vectors[i * n + src];
        let mut lead = 0;
        for i in 1..n {
            if col(i).abs() > col(lead).abs() {
                lead = i;
            }
        }
        let sign = if col(lead) < T::zero() { -T::one() } else { T::one() };
        for i in 0..n {
            eigenvectors[[i, k]] = col(i) * sign;
        }
    }
    Ok(SpectralDecomp {
        eigenvalues,
        eigenvectors,
    })
}

/// Largest dimension handled by the Jacobi solver.
pub const JACOBI_MAX_DIM: usize = 64;

/// Eigenvalues and row-major eigenvector columns.
fn jacobi<T: Real>(a: &SymMatrix<T>) -> (Vec<T>, Vec<T>) {
    let n = a.dim();
    let mut m: Vec<T> = a.as_array().iter().copied().collect();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let scale = a.frobenius();
    let rel = T::lit(JACOBI_REL_TOL).max(T::epsilon() * T::lit(4.0));
    let tol = rel * scale;

    if scale > T::zero() {
        for _ in 0..JACOBI_MAX_SWEEPS {
            if off_diagonal_norm(&m, n) <= tol {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    rotate(&mut m, &mut v, n, p, q);
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

fn off_diagonal_norm<T: Real>(m: &[T], n: usize) -> T {
    let mut s = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[i * n + j] * m[i * n + j];
            }
        }
    }
    s.sqrt()
}

fn rotate<T: Real>(m: &mut [T], v: &mut [T], n: usize, p: usize, q: usize) {
    let apq = m[p * n + q];
    if apq == T::zero() {
        return;
    }
    let app = m[p * n + p];
    let aqq = m[q * n + q];
    let theta = (aqq - app) / (T::lit(2.0) * apq);
    let t = {
        let t = T::one() / (theta.abs() + (theta * theta + T::one()).sqrt());
        if theta < T::zero() {
            -t
        } else {
            t
        }
    };
    let c = T::one() / (t * t + T::one()).sqrt();
    let s = t * c;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[k * n + p];
        let akq = m[k * n + q];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        m[k * n + p] = new_kp;
        m[p * n + k] = new_kp;
        m[k * n + q] = new_kq;
        m[q * n + k] = new_kq;
    }
    m[p * n + p] = app - t * apq;
    m[q * n + q] = aqq + t * apq;
    m[p * n + q] = T::zero();
    m[q * n + p] = T::zero();
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}

/// Householder reduction to tridiagonal form followed by implicit QL with
/// accumulated transformations.
fn tridiagonal_ql<T: Real>(a: &SymMatrix<T>) -> Result<(Vec<T>, Vec<T>)> {
    let n = a.dim();
    let mut v: Vec<T> = a.as_array().iter().copied().collect();
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    let at = |i: usize, j: usize| i * n + j;

    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = T::zero();
        let mut h = T::zero();
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == T::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = T::zero();
                v[at(j, i)] = T::zero();
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > T::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = T::zero();
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = T::zero();
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = T::zero();
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = T::one();
        let h = d[i + 1];
        if h != T::zero() {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = T::zero();
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = T::zero();
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = T::zero();
    }
    if n > 0 {
        v[at(n - 1, n - 1)] = T::one();
    }

    for i in 1..n {
        e[i - 1] = e[i];
    }
    if n > 0 {
        e[n - 1] = T::zero();
    }
    let mut f = T::zero();
    let mut tst1 = T::zero();
    let eps = T::epsilon();
    let two = T::lit(2.0);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iterations = 0;
            loop {
                iterations += 1;
                if iterations > QL_MAX_ITERATIONS {
                    return Err(CrhError::InvalidArgument(format!(
                        "QL iteration did not converge for eigenvalue {l} of a {n}x{n} matrix"
                    )));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let vk1 = v[at(k, i + 1)];
                        let vk = v[at(k, i)];
                        v[at(k, i + 1)] = s * vk + c * vk1;
                        v[at(k, i)] = c * vk - s * vk1;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = T::zero();
    }
    Ok((d, v))
}

const QL_MAX_ITERATIONS: usize = 60;

fn cutoff<T: Real>(decomp: &SpectralDecomp<T>, rel_tol: T) -> T {
    rel_tol * decomp.largest_abs()
}

fn check_rel_tol<T: Real>(rel_tol: T) -> Result<()> {
    if !(rel_tol > T::zero() && rel_tol < T::one()) {
        return Err(CrhError::InvalidArgument(format!(
            "relative tolerance must lie in (0, 1), got {rel_tol}"
        )));
    }
    Ok(())
}

/// Moore–Penrose pseudo-inverse: eigenvalues with `|λ| > rel_tol·|λ_max|` are
/// inverted, the rest are zeroed. The zero matrix maps to itself.
pub fn pinv<T: Real>(a: &SymMatrix<T>, rel_tol: T) -> Result<SymMatrix<T>> {
    check_rel_tol(rel_tol)?;
    let d = eigh(a)?;
    Ok(pinv_from(&d, rel_tol))
}

pub fn pinv_from<T: Real>(d: &SpectralDecomp<T>, rel_tol: T) -> SymMatrix<T> {
    let cut = cutoff(d, rel_tol);
    d.map(|l| {
        if l.abs() > cut {
            T::one() / l
        } else {
            T::zero()
        }
    })
}

/// Integer matrix power with pseudo-inverse semantics: `A⁰ = AA⁺` is the
/// orthogonal projector onto the column space and `A⁻ⁿ = (A⁺)ⁿ`.
pub fn mat_pow<T: Real>(a: &SymMatrix<T>, n: i32, rel_tol: T) -> Result<SymMatrix<T>> {
    check_rel_tol(rel_tol)?;
    let d = eigh(a)?;
    Ok(mat_pow_from(&d, n, rel_tol))
}

pub fn mat_pow_from<T: Real>(d: &SpectralDecomp<T>, n: i32, rel_tol: T) -> SymMatrix<T> {
    let cut = cutoff(d, rel_tol);
    if n > 0 {
        return d.map(|l| l.powi(n));
    }
    d.map(|l| {
        if l.abs() > cut {
            if n == 0 {
                T::one()
            } else {
                l.recip().powi(-n)
            }
        } else {
            T::zero()
        }
    })
}

/// Orthogonal projector onto the column space, `A⁰`.
pub fn projector<T: Real>(a: &SymMatrix<T>, rel_tol: T) -> Result<SymMatrix<T>> {
    mat_pow(a, 0, rel_tol)
}

/// Pearson correlation of two matrices taken elementwise, in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AlignmentScore<T>(T);

impl<T: Real> AlignmentScore<T> {
    pub fn new(value: T) -> Self {
        Self(value.max(-T::one()).min(T::one()))
    }

    pub fn value(self) -> T {
        self.0
    }
}

/// Alignment between two equally sized square matrices.
///
/// `α = ⟨A−Ā, B−B̄⟩ / (‖A−Ā‖_F ‖B−B̄‖_F)` over all `d²` entries, where `Ā` is
/// the scalar mean of the entries. `|α| = 1` exactly when `A = c₀B + c₁J`.
pub fn pearson_alignment<T: Real>(a: &SymMatrix<T>, b: &SymMatrix<T>) -> Result<AlignmentScore<T>> {
    pearson_elementwise(a.view(), b.view())
}

pub(crate) fn pearson_elementwise<T: Real>(
    a: ArrayView2<T>,
    b: ArrayView2<T>,
) -> Result<AlignmentScore<T>> {
    if a.dim() != b.dim() {
        return Err(CrhError::DimensionMismatch {
            context: "pearson_alignment",
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = T::from_usize_lossy(a.len());
    let mean_a = a.sum() / n;
    let mean_b = b.sum() / n;
    let mut sab = T::zero();
    let mut saa = T::zero();
    let mut sbb = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let dx = *x - mean_a;
        let dy = *y - mean_b;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let degenerate = |ss: T, view: &ArrayView2<T>| {
        let scale = view.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        ss.sqrt() <= T::epsilon() * scale * n
    };
    if saa == T::zero() || degenerate(saa, &a) {
        return Err(CrhError::UndefinedAlignment("first matrix"));
    }
    if sbb == T::zero() || degenerate(sbb, &b) {
        return Err(CrhError::UndefinedAlignment("second matrix"));
    }
    Ok(AlignmentScore::new(sab / (saa.sqrt() * sbb.sqrt())))
}

/// `‖P² − P‖_F / max(1, ‖P‖_F)`; zero iff `P` is idempotent.
pub fn projection_distance<T: Real>(p: &SymMatrix<T>) -> T {
    let sq = p.as_array().dot(p.as_array());
    let diff = &sq - p.as_array();
    frobenius(diff.view()) / p.frobenius().max(T::one())
}

/// Number of eigenvalues above `rel_tol · λ_max`. Eigenvalues more negative
/// than `-1e-10 · λ_max` are logged and treated as zero.
pub fn effective_rank<T: Real>(a: &SymMatrix<T>, rel_tol: T) -> Result<usize> {
    let d = eigh(a)?;
    Ok(effective_rank_from(&d.eigenvalues.view(), rel_tol))
}

pub fn effective_rank_from<T: Real>(eigenvalues: &ArrayView1<T>, rel_tol: T) -> usize {
    let lmax = eigenvalues.iter().fold(T::zero(), |m, v| m.max(*v));
    if lmax <= T::zero() {
        return 0;
    }
    let floor = -T::lit(1e-10) * lmax;
    if let Some(worst) = eigenvalues.iter().copied().find(|v| *v < floor) {
        log::warn!("effective_rank: eigenvalue {worst} is significantly negative; clamped to 0");
    }
    eigenvalues.iter().filter(|v| **v > rel_tol * lmax).count()
}

/// Slope and fit quality of `log a` against `log b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit<T> {
    pub exponent: T,
    pub intercept: T,
    pub r2: T,
    pub pairs: usize,
}

/// Eigenvalues at or below this fraction of the spectrum maximum are dropped
/// before fitting.
pub const SPECTRUM_FLOOR: f64 = 1e-10;

/// Least-squares power-law exponent between two descending spectra paired by
/// rank, over the top `k` entries.
pub fn power_law_fit<T: Real>(spec_a: &[T], spec_b: &[T], k: usize) -> Result<PowerLawFit<T>> {
    power_law_fit_with_floor(spec_a, spec_b, k, T::lit(SPECTRUM_FLOOR))
}

pub fn power_law_fit_with_floor<T: Real>(
    spec_a: &[T],
    spec_b: &[T],
    k: usize,
    rel_floor: T,
) -> Result<PowerLawFit<T>> {
    let max_of = |s: &[T]| s.iter().fold(T::zero(), |m, v| m.max(*v));
    let (floor_a, floor_b) = (rel_floor * max_of(spec_a), rel_floor * max_of(spec_b));
    let pairs: Vec<(T, T)> = spec_a
        .iter()
        .zip(spec_b.iter())
        .take(k)
        .filter(|(a, b)| **a > floor_a && **b > floor_b && **a > T::zero() && **b > T::zero())
        .map(|(a, b)| (b.ln(), a.ln()))
        .collect();
    least_squares_line(&pairs)
}

/// Ordinary least squares `y = slope·x + intercept` with `r²`.
pub(crate) fn least_squares_line<T: Real>(points: &[(T, T)]) -> Result<PowerLawFit<T>> {
    const MIN_PAIRS: usize = 3;
    if points.len() < MIN_PAIRS {
        return Err(CrhError::InsufficientData {
            retained: points.len(),
            required: MIN_PAIRS,
        });
    }
    let n = T::from_usize_lossy(points.len());
    let mx = points.iter().map(|p| p.0).sum::<T>() / n;
    let my = points.iter().map(|p| p.1).sum::<T>() / n;
    let sxx: T = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: T = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: T = points.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let spread_floor = T::epsilon() * T::lit(16.0) * (T::one() + mx.abs()) * n;
    if sxx.sqrt() <= spread_floor {
        return Err(CrhError::InsufficientData {
            retained: 1,
            required: MIN_PAIRS,
        });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: T = points
        .iter()
        .map(|p| {
            let r = p.1 - (slope * p.0 + intercept);
            r * r
        })
        .sum();
    let r2 = if syy > T::zero() {
        T::one() - ss_res / syy
    } else {
        T::one()
    };
    Ok(PowerLawFit {
        exponent: slope,
        intercept,
        r2,
        pairs: points.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_sym(n: usize, seed: u64) -> SymMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));
        SymMatrix::new(a).unwrap()
    }

    #[test]
    fn symmetrizes_on_ingest() {
        let s = SymMatrix::new(array![[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
        assert_eq!(s.get(1, 0), 1.0);
    }

    #[test]
    fn rejects_non_finite_and_non_square() {
        assert!(matches!(
            SymMatrix::new(array![[f64::NAN]]),
            Err(CrhError::NonFinite { .. })
        ));
        assert!(matches!(
            SymMatrix::<f64>::new(Array2::zeros((2, 3))),
            Err(CrhError::NotSquare { .. })
        ));
    }

    #[test]
    fn eigh_identity() {
        let d = eigh(&SymMatrix::<f64>::identity(3)).unwrap();
        assert_eq!(d.eigenvalues.to_vec(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn eigh_two_by_two() {
        let d = eigh(&SymMatrix::new(array![[2.0f64, 1.0], [1.0, 2.0]]).unwrap()).unwrap();
        assert!((d.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((d.eigenvalues[1] - 1.0).abs() < 1e-14);
        let r = 1.0 / 2f64.sqrt();
        let v0 = d.eigenvector(0);
        let v1 = d.eigenvector(1);
        assert!((v0[0] - r).abs() < 1e-14 && (v0[1] - r).abs() < 1e-14);
        // (1, -1)/√2 up to the largest-component-positive convention: the
        // tie picks the first component.
        assert!((v1[0] - r).abs() < 1e-14 && (v1[1] + r).abs() < 1e-14);
    }

    #[test]
    fn large_solver_matches_jacobi() {
        for (n, seed) in [(65, 1), (80, 2), (101, 3)] {
            let a = random_sym(n, seed);
            let d = eigh(&a).unwrap();
            let (mut jv, _) = jacobi(&a);
            jv.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (x, y) in d.eigenvalues.iter().zip(&jv) {
                assert!((x - y).abs() < 1e-10 * a.frobenius(), "{n}: {x} vs {y}");
            }
            let err = d.reconstruct().sub(&a).frobenius() / a.frobenius();
            assert!(err < 1e-12, "{n}: reconstruction {err}");
            let v = &d.eigenvectors;
            let gram = v.t().dot(v) - Array2::<f64>::eye(n);
            assert!(gram.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn large_solver_handles_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Array2::from_shape_fn((90, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let a = SymMatrix::gram_rows(u.view());
        let d = eigh(&a).unwrap();
        assert_eq!(effective_rank_from(&d.eigenvalues.view(), 1e-10), 3);
        assert!(d.reconstruct().sub(&a).frobenius() < 1e-10 * a.frobenius());
    }

    #[test]
    fn eigh_reconstructs_random_8x8() {
        let a = random_sym(8, 3);
        let d = eigh(&a).unwrap();
        let err = d.reconstruct().sub(&a).max_abs();
        assert!(err < 1e-10, "reconstruction error {err}");
        let vtv = d.eigenvectors.t().dot(&d.eigenvectors) - Array2::<f64>::eye(8);
        assert!(vtv.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn eigh_is_deterministic_and_rejects_nan() {
        let a = random_sym(6, 9);
        assert_eq!(eigh(&a).unwrap(), eigh(&a).unwrap());
        let mut raw = a.into_array();
        raw[[0, 0]] = f64::INFINITY;
        let bad = SymMatrix { data: raw };
        assert!(eigh(&bad).is_err());
    }

    #[test]
    fn pinv_examples() {
        let p = pinv(&SymMatrix::from_diag(&[2.0f64, 0.0]), 1e-10).unwrap();
        assert!((p.get(0, 0) - 0.5).abs() < 1e-15 && p.get(1, 1).abs() < 1e-15);
        let i4 = SymMatrix::<f64>::identity(4);
        assert!(pinv(&i4, 1e-10).unwrap().sub(&i4).max_abs() < 1e-14);
        assert_eq!(pinv(&SymMatrix::<f64>::zeros(3), 1e-10).unwrap(), SymMatrix::zeros(3));
        assert!(pinv(&i4, 0.0).is_err());
    }

    #[test]
    fn pinv_rank_three_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((5, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let q = Array2::from_shape_fn((3, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let core = SymMatrix::new(q.clone() + q.t()).unwrap();
        let a = core.congruence(x.view());
        let p = pinv(&a, 1e-10).unwrap();
        let apa = a.as_array().dot(p.as_array()).dot(a.as_array());
        let err = (&apa - a.as_array()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9 * a.max_abs().max(1.0), "A A+ A error {err}");
    }

    #[test]
    fn mat_pow_examples() {
        let p0 = mat_pow(&SymMatrix::from_diag(&[4.0, 0.0]), 0, 1e-10).unwrap();
        assert!(p0.sub(&SymMatrix::from_diag(&[1.0, 0.0])).max_abs() < 1e-15);
        let inv = mat_pow(&SymMatrix::from_diag(&[9.0, 4.0, 0.0]), -1, 1e-10).unwrap();
        let want = SymMatrix::from_diag(&[1.0 / 9.0, 0.25, 0.0]);
        assert!(inv.sub(&want).max_abs() < 1e-15);
    }

    #[test]
    fn alignment_examples() {
        let a = random_sym(4, 1);
        assert!((pearson_alignment(&a, &a).unwrap().value() - 1.0).abs() < 1e-12);
        assert!((pearson_alignment(&a, &a.scaled(-2.0)).unwrap().value() + 1.0).abs() < 1e-12);
        let a = SymMatrix::from_diag(&[1.0f64, 0.0]);
        let b = SymMatrix::from_diag(&[0.0, 1.0]);
        let alpha = pearson_alignment(&a, &b).unwrap().value();
        assert!((alpha + 1.0 / 3.0).abs() < 1e-12, "{alpha}");
    }

    #[test]
    fn alignment_rejects_constant_and_mismatched() {
        let c = SymMatrix::new(Array2::from_elem((3, 3), 2.0)).unwrap();
        let a = random_sym(3, 2);
        assert!(matches!(
            pearson_alignment(&c, &a),
            Err(CrhError::UndefinedAlignment(_))
        ));
        assert!(pearson_alignment(&a, &random_sym(4, 2)).is_err());
        // 1x1 matrices are always constant.
        let one = SymMatrix::from_diag(&[3.0]);
        assert!(pearson_alignment(&one, &one).is_err());
    }

    #[test]
    fn projection_distance_examples() {
        assert_eq!(projection_distance(&SymMatrix::<f64>::identity(3)), 0.0);
        assert_eq!(projection_distance(&SymMatrix::from_diag(&[1.0, 0.0, 1.0])), 0.0);
        let d = projection_distance(&SymMatrix::from_diag(&[2.0f64, 0.0]));
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&SymMatrix::<f64>::identity(5), 1e-6).unwrap(), 5);
        assert_eq!(effective_rank(&SymMatrix::from_diag(&[1.0, 1.0, 0.0]), 1e-6).unwrap(), 2);
        assert_eq!(
            effective_rank(&SymMatrix::from_diag(&[1.0, 1e-3, 1e-12]), 1e-6).unwrap(),
            2
        );
        assert_eq!(effective_rank(&SymMatrix::<f64>::zeros(3), 1e-6).unwrap(), 0);
        // a clearly negative mode is clamped, not counted
        assert_eq!(effective_rank(&SymMatrix::from_diag(&[1.0, -0.5]), 1e-6).unwrap(), 1);
    }

    #[test]
    fn power_law_examples() {
        let f = power_law_fit(&[8.0f64, 4.0, 2.0, 1.0], &[64.0, 16.0, 4.0, 1.0], 4).unwrap();
        assert!((f.exponent - 0.5).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let s = [5.0f64, 3.0, 2.0, 0.5];
        let f = power_law_fit(&s, &s, 4).unwrap();
        assert!((f.exponent - 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        assert!(matches!(
            power_law_fit(&[1.0, 0.5], &[1.0, 0.5], 2),
            Err(CrhError::InsufficientData { .. })
        ));
        // zeros below the floor are dropped before counting
        assert!(power_law_fit(&[1.0, 0.5, 0.0, 0.0], &[1.0, 0.5, 0.2, 0.0], 4).is_err());
    }

    #[test]
    fn power_law_noisy_exponent_two() {
        // Closed-form least squares: slope = Σ(x-x̄)(y-ȳ) / Σ(x-x̄)², computed
        // here independently of the fitter.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b: Vec<f64> = (0..20).map(|i| 10f64.powf(-(i as f64) * 0.15)).collect();
        let a: Vec<f64> = b
            .iter()
            .map(|v| v.powi(2) * (1.0 + 0.02 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let xs: Vec<f64> = b.iter().map(|v| v.ln()).collect();
        let ys: Vec<f64> = a.iter().map(|v| v.ln()).collect();
        let mx = xs.iter().sum::<f64>() / 20.0;
        let my = ys.iter().sum::<f64>() / 20.0;
        let oracle = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        let f = power_law_fit(&a, &b, 20).unwrap();
        assert!((f.exponent - oracle).abs() < 1e-12);
        assert!((f.exponent - 2.0).abs() < 0.05);
    }

    #[test]
    fn works_in_single_precision() {
        let a = SymMatrix::<f32>::new(array![[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let d = eigh(&a).unwrap();
        assert!((d.eigenvalues[0] - 3.0).abs() < 1e-5);
        let p = pinv(&a, 1e-6).unwrap();
        let apa = a.as_array().dot(p.as_array()).dot(a.as_array());
        assert!((&apa - a.as_array()).iter().all(|v| v.abs() < 1e-5));
    }
}
