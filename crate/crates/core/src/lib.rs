//! Training-dynamics laboratory for wide feedforward networks.
//!
//! The crate computes closed-form predictions for how weights and outputs of
//! a network evolve under gradient descent and its noisy variants, and the
//! simulations that check them:
//!
//! * [`numerics`]: symmetric eigensolver, matrix exponential action, seeded RNG.
//! * [`network`]: fully connected nets in standard or NTK parametrisation,
//!   exact gradients, directional derivatives, layer Hessian traces.
//! * [`ntk`]: empirical tangent kernels and the infinite-width ReLU recursion.
//! * [`lin_dynamics`]: lazy-regime closed forms (outputs, weights, spectra,
//!   ridge pull, noisy training, new-point prediction).
//! * [`moments`]: perturbative moment expansion of the scalar-weight SDE.
//! * [`sim`]: Euler-Maruyama and the GD / SGD / noisy trainers.
//! * [`datasets`], [`metrics`], [`experiments`]: data, measurements and the
//!   experiment drivers used by the CLI.

pub mod datasets;
pub mod error;
pub mod experiments;
pub mod lin_dynamics;
pub mod metrics;
pub mod moments;
pub mod network;
pub mod ntk;
pub mod numerics;
pub mod sim;

pub use error::{Error, Result};
pub use network::{Activation, Architecture, NetworkParams, Scaling};
pub use numerics::{EigDecomposition, SeededRng, SymMatrix};
