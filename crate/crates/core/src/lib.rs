//! NeuralMD: a two-stage multiscale-decomposition collocation solver for the
//! nonlinear Klein–Gordon equation, with a Fourier pseudospectral reference.
//!
//! Modules, bottom-up:
//! - [`autodiff`]: second-order input jets on a reverse parameter tape.
//! - [`network`]: the multiscale field network and a plain MLP baseline.
//! - [`physics`]: problem instances, residuals, reconstruction and metrics.
//! - [`spectral`]: pseudospectral NKGE, NLSW and NLSE solvers.
//! - [`training`]: optimizers, gate dynamics, sampling and both stages.
//! - [`io`]: checkpoints, field files, CSV and heatmaps.

pub mod autodiff;
pub mod io;
pub mod network;
pub mod physics;
pub mod rng;
pub mod spectral;
pub mod training;
