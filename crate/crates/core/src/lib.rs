//! Joint estimation of posterior samplers and mixed-noise parameters
//! `(a^2, b^2)` in Bayesian inverse problems.
//!
//! The workspace couples an EM loop whose E-step is a conditional
//! flow-matching sampler with exact oracle posteriors (conjugate, grid
//! quadrature, Metropolis) and a set of numerical convergence diagnostics
//! (Fisher information, concavity/smoothness constants, step-size
//! feasibility, contraction rates).

pub mod em;
pub mod error;
pub mod flow;
pub mod forward;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod prior;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use forward::ForwardModel;
pub use model::{ModelBundle, Observation, Sym2, Theta, ThetaBox};
pub use prior::Prior;
