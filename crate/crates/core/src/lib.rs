//! Learned unrolled solvers for sparse image reconstruction.
//!
//! The pipeline: a fixed-count accelerated projected gradient solver for a
//! sparse deconvolution energy, task losses on the final iterate, exact
//! reverse-mode gradients with respect to the solver hyperparameters
//! (regularization weight, per-iteration step sizes, binarization threshold,
//! kernel width), and an outer projected gradient trainer that fits those
//! hyperparameters to example reconstruction pairs.

pub mod backprop;
pub mod energy;
pub mod error;
pub mod grid_ops;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod semiblind;
pub mod simulate;
pub mod solver;
pub mod trainer;

pub use error::CoreError;

pub(crate) mod util;
