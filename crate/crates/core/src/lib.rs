//! Measurement toolkit for representation, gradient and weight alignment in
//! fully connected networks.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`.

pub mod error;
pub mod crhkit;
pub mod linalg;
pub mod netcore;
pub mod probes;
pub mod scalar;
pub mod tasks;
pub mod theoremlab;

pub use error::{CrhError, Result};
pub use scalar::Real;

pub type SymMatrix64 = linalg::SymMatrix<f64>;
pub type SpectralDecomp64 = linalg::SpectralDecomp<f64>;
pub type AlignmentScore64 = linalg::AlignmentScore<f64>;
pub type MlpModel64 = netcore::MlpModel<f64>;
pub type LayerTape64 = netcore::LayerTape<f64>;
pub type ConjugateSet64 = probes::ConjugateSet<f64>;
pub type PhaseInstance64 = theoremlab::PhaseInstance<f64>;
pub type NcReport64 = theoremlab::NcReport<f64>;
pub type NfaReport64 = theoremlab::NfaReport<f64>;
pub type TeacherSpec64 = tasks::TeacherSpec<f64>;
pub type InputMixSpec64 = tasks::InputMixSpec<f64>;
pub type ClassBlobSpec64 = tasks::ClassBlobSpec<f64>;
