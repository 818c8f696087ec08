//! Simulation and inference toolkit for trapped-ion quantum-state
//! readout with trap-integrated single-photon avalanche diodes.
//!
//! The crate generates realistic binned photon-count records for bright
//! and dark ions (including metastable decay during measurement and
//! over-dispersed backgrounds), discriminates the state by threshold,
//! decay-aware maximum likelihood, or adaptive Bayesian stopping, and
//! reproduces the associated fidelity, crosstalk, and calibration
//! analyses at desk scale.
//!
//! Modules:
//!
//! - [`source`]: photon-emission statistics and count-record sampling
//! - [`spad`]: detector physics (dead time, quench circuit, PDE
//!   estimation, breakdown extraction)
//! - [`discriminator`]: the three bright/dark classifiers
//! - [`harness`]: batched Monte Carlo experiments with the dual
//!   SPAD/PMT error accounting
//! - [`histfit`]: total-count histogram mixture fit
//! - [`optics`]: ray-traced collection efficiency and optical crosstalk
//! - [`coherence`]: Rabi thermometry and heating-rate fits
//! - [`scenario`] / [`presets`] / [`cli`]: scenario files and the
//!   command-line front end

// Count-rate validations use negated comparisons (`!(x >= 0.0)`) on
// purpose: they reject NaN, which `x < 0.0` would accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coherence;
pub mod discriminator;
pub mod error;
pub mod harness;
pub mod histfit;
pub mod optics;
pub mod optim;
pub mod presets;
pub mod rng;
pub mod scenario;
pub mod source;
pub mod spad;
pub mod stats;

pub use error::{Error, Result};
