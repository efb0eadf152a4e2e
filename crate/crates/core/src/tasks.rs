//! Synthetic data: sin-teacher regression, mixed-input teachers and Gaussian
//! class blobs. Every sample is drawn from its own `(seed, index)` stream, so
//! a batch does not depend on how the index range is partitioned.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CrhError, Result};
use crate::scalar::Real;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_matrix<T: Real>(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::lit(scale * rng.sample::<f64, _>(StandardNormal)))
}

/// `n` rows of isotropic Gaussian input, rows `start..start + n` of the
/// stream family `seed`.
pub fn gaussian_rows<T: Real>(dim: usize, start: u64, n: usize, seed: u64) -> Array2<T> {
    let mut x = Array2::zeros((n, dim));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        let mut rng = rng_for(seed, start + i as u64);
        row.iter_mut()
            .for_each(|v| *v = T::lit(rng.sample::<f64, _>(StandardNormal)));
    }
    x
}

/// Two-layer sin teacher `y(x) = Σ_i u_i sin(w_iᵀx + b_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec<T> {
    /// `units × input_dim`, entries `N(0, 1/input_dim)`.
    pub w: Array2<T>,
    /// `units`, entries `N(0, 1)`.
    pub b: Array1<T>,
    /// `output_dim × units`, entries `N(0, 1/units)`.
    pub u: Array2<T>,
}

impl<T: Real> TeacherSpec<T> {
    pub fn new(input_dim: usize, units: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || units == 0 || output_dim == 0 {
            return Err(CrhError::InvalidArgument(format!(
                "teacher dims must be positive, got {input_dim}/{units}/{output_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = normal_matrix(units, input_dim, 1.0 / (input_dim as f64).sqrt(), &mut rng);
        let b = normal_matrix(1, units, 1.0, &mut rng).index_axis_move(Axis(0), 0);
        let u = normal_matrix(output_dim, units, 1.0 / (units as f64).sqrt(), &mut rng);
        Ok(Self { w, b, u })
    }

    /// The fc1 teacher: 100 inputs, 100 units, scalar output.
    pub fn fc1(seed: u64) -> Self {
        Self::new(100, 100, 1, seed).expect("positive dims")
    }

    /// The fc2 teacher: 100 inputs, 100 units, 100 outputs.
    pub fn fc2(seed: u64) -> Self {
        Self::new(100, 100, 100, seed).expect("positive dims")
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn units(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.u.nrows()
    }

    /// Labels for each row of `x`.
    pub fn label(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.input_dim() {
            return Err(CrhError::DimensionMismatch {
                context: "teacher input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut pre = x.dot(&self.w.t());
        pre += &self.b.view().insert_axis(Axis(0));
        pre.mapv_inplace(|v| v.sin());
        Ok(pre.dot(&self.u.t()))
    }
}

/// Samples `start..start + n` of the teacher task with isotropic inputs.
pub fn teacher_range<T: Real>(spec: &TeacherSpec<T>, start: u64, n: usize, seed: u64) -> (Array2<T>, Array2<T>) {
    let x = gaussian_rows(spec.input_dim(), start, n, seed);
    let y = spec.label(&x).expect("input dim matches by construction");
    (x, y)
}

pub fn teacher_sample<T: Real>(spec: &TeacherSpec<T>, n: usize, seed: u64) -> (Array2<T>, Array2<T>) {
    teacher_range(spec, 0, n, seed)
}

/// Correlated inputs `x = M x'`, `x' ~ N(0, I)`, `M = (1 − φ) Z + φ I` with a
/// fixed zero-one `Z` whose entries are 1 with probability 0.8.
#[derive(Debug, Clone, PartialEq)]
pub struct InputMixSpec<T> {
    pub phi: T,
    pub z: Array2<T>,
    pub mixing: Array2<T>,
}

/// Probability of a one in the mixing pattern.
pub const MIX_DENSITY: f64 = 0.8;

impl<T: Real> InputMixSpec<T> {
    pub fn new(dim: usize, phi: T, seed: u64) -> Result<Self> {
        if !(phi >= T::zero() && phi <= T::one()) {
            return Err(CrhError::InvalidArgument(format!("phi must lie in [0, 1], got {phi}")));
        }
        if dim == 0 {
            return Err(CrhError::InvalidArgument("mixing dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_fn((dim, dim), |_| {
            if rng.random_bool(MIX_DENSITY) {
                T::one()
            } else {
                T::zero()
            }
        });
        let mixing = &z * (T::one() - phi) + &(Array2::eye(dim) * phi);
        Ok(Self { phi, z, mixing })
    }

    pub fn dim(&self) -> usize {
        self.z.nrows()
    }

    /// Population covariance `M Mᵀ`.
    pub fn covariance(&self) -> Array2<T> {
        self.mixing.dot(&self.mixing.t())
    }
}

pub fn mixed_input_range<T: Real>(mix: &InputMixSpec<T>, start: u64, n: usize, seed: u64) -> Array2<T> {
    gaussian_rows::<T>(mix.dim(), start, n, seed).dot(&mix.mixing.t())
}

pub fn mixed_input_sample<T: Real>(mix: &InputMixSpec<T>, n: usize, seed: u64) -> Array2<T> {
    mixed_input_range(mix, 0, n, seed)
}

/// Teacher labels on mixed inputs.
pub fn mixed_teacher_range<T: Real>(
    spec: &TeacherSpec<T>,
    mix: &InputMixSpec<T>,
    start: u64,
    n: usize,
    seed: u64,
) -> Result<(Array2<T>, Array2<T>)> {
    let x = mixed_input_range(mix, start, n, seed);
    let y = spec.label(&x)?;
    Ok((x, y))
}

/// Isotropic Gaussian blobs around orthogonal class centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBlobSpec<T> {
    /// `classes × input_dim`; rows pairwise `separation` apart.
    pub centers: Array2<T>,
    pub sigma: T,
}

/// Smallest allowed center separation, in units of `σ`.
pub const MIN_SEPARATION_SIGMAS: f64 = 4.0;

impl<T: Real> ClassBlobSpec<T> {
    /// Centers are `separation / √2` times orthonormal directions, so every
    /// pair of centers is exactly `separation` apart.
    pub fn new(classes: usize, input_dim: usize, sigma: T, separation: T, seed: u64) -> Result<Self> {
        if classes < 2 || classes > input_dim {
            return Err(CrhError::InvalidArgument(format!(
                "need 2 <= classes <= input_dim, got {classes} classes in {input_dim} dims"
            )));
        }
        if !(sigma >= T::zero()) || !(separation > T::zero()) || separation < sigma * T::lit(MIN_SEPARATION_SIGMAS) {
            return Err(CrhError::InvalidArgument(format!(
                "separation {separation} must be positive and at least {MIN_SEPARATION_SIGMAS} sigma ({sigma})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = normal_matrix::<f64>(classes, input_dim, 1.0, &mut rng);
        for k in 0..classes {
            for _ in 0..2 {
                for j in 0..k {
                    let dot = q.row(j).dot(&q.row(k));
                    let qj = q.row(j).to_owned();
                    q.row_mut(k).scaled_add(-dot, &qj);
                }
            }
            let norm = q.row(k).dot(&q.row(k)).sqrt();
            q.row_mut(k).mapv_inplace(|v| v / norm);
        }
        let scale = separation / T::lit(2f64.sqrt());
        let centers = q.mapv(|v| T::lit(v) * scale);
        Ok(Self { centers, sigma })
    }

    pub fn classes(&self) -> usize {
        self.centers.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }
}

/// Samples `start..start + n`; sample `i` belongs to class `i mod C`.
pub fn class_blob_range<T: Real>(spec: &ClassBlobSpec<T>, start: u64, n: usize, seed: u64) -> (Array2<T>, Vec<usize>) {
    let c = spec.classes() as u64;
    let labels: Vec<usize> = (start..start + n as u64).map(|i| (i % c) as usize).collect();
    let mut x = gaussian_rows::<T>(spec.input_dim(), start, n, seed) * spec.sigma;
    for (mut row, &k) in x.rows_mut().into_iter().zip(&labels) {
        row += &spec.centers.row(k);
    }
    (x, labels)
}

/// `n_per_class` samples of every class, interleaved by class.
pub fn class_blob_sample<T: Real>(spec: &ClassBlobSpec<T>, n_per_class: usize, seed: u64) -> (Array2<T>, Vec<usize>) {
    class_blob_range(spec, 0, n_per_class * spec.classes(), seed)
}
