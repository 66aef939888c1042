//! Unfolding of indirectly observed Poisson point processes.
//!
//! The observed data are histogram counts of a smeared Poisson process; the
//! goal is the intensity function of the underlying true process. The
//! pipeline discretizes the true space with a B-spline basis, assembles the
//! detector response into a matrix, samples the positivity-constrained
//! posterior with a single-component Metropolis-Hastings sampler, selects the
//! smoothness hyperparameter by marginal maximum likelihood via Monte Carlo
//! EM, and quantifies uncertainty with a parametric bootstrap.
//!
//! Module layout mirrors the pipeline stages:
//!
//! * [`basis`] - B-spline bases and curvature penalty matrices
//! * [`forward`] - smearing kernels, efficiency, response-matrix assembly
//! * [`simulate`] - synthetic data generation (point process, thinning, binning)
//! * [`posterior`] - Poisson likelihood, smoothness prior, NNLS initializer
//! * [`sampler`] - Metropolis-within-Gibbs sampler and chain diagnostics
//! * [`mcem`] - Monte Carlo EM iteration for the hyperparameter
//! * [`uq`] - bootstrap bands, bias correction, MISE studies

pub mod basis;
pub mod forward;
pub mod mcem;
pub mod nnls;
pub mod posterior;
pub mod quad;
pub mod sampler;
pub mod simulate;
pub mod uq;

pub use basis::{PenaltyMatrix, SplineBasis};
pub use forward::{BinningScheme, Efficiency, ResponseMatrix, SmearingKernel};
pub use mcem::{McemConfig, McemFit, McemTrace};
pub use posterior::PosteriorModel;
pub use sampler::{ChainSample, SamplerConfig};
pub use simulate::{BinnedCounts, IntensityModel};
pub use uq::{BootstrapConfig, UnfoldResult};
