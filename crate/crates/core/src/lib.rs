//! Learning the spectral decomposition of a diffusion's infinitesimal
//! generator from samples of its invariant measure, using the energy
//! (Dirichlet form) geometry and reduced-rank regression in an RKHS.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod forecaster;
pub mod gram;
pub mod kernel;
pub mod linalg;
pub mod models;
pub mod oracle;
pub mod parallel;
pub mod sampling;

pub use error::{Error, Result};
pub use estimator::{eigendecompose, fit_krr, fit_rrr, solve_gep, Fit, GepSolution, SpectralEstimate};
pub use gram::GramSystem;
pub use kernel::{Kernel, RbfKernel};
pub use models::{CirModel, DomainBox, LangevinModel, SdeModel};
pub use sampling::{sample_invariant, SampleSet, SamplingMethod};
