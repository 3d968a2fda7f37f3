//! Synchronisation-oriented model-reference adaptive control.
//!
//! The plant and a virtual reference model are treated as two agents to be
//! synchronised by a diffusive coupling input. The coupling is designed on
//! the (integral-augmented) state error and then *allocated* between the
//! plant input and the virtual-model input under the constraint
//! `U_m - b*u_c = U_c`, which leaves the error dynamics untouched while
//! shaping the collective behaviour. Classical open-loop and closed-loop
//! reference-model adaptive controllers fall out as the `k_P = 0` and
//! `mu = 1` corners of the same design space.
//!
//! Modules:
//! - [`matops`]: dense small-matrix solves (Lyapunov, Riccati) and scalar
//!   convex minimisation,
//! - [`model`]: plant, baseline controller, virtual model and coordinate
//!   transforms,
//! - [`coupling`]: coupling-input design and optimal allocation,
//! - [`adapt`]: direct and Bregman gradient-flow adaptation laws,
//! - [`observer`]: state observer and instantaneous uncertainty estimation,
//! - [`learner`]: regressor filter and feature extender for online model
//!   learning,
//! - [`sim`]: the assembled closed-loop ODE, RK4 integration, diagnostics.

pub mod adapt;
pub mod coupling;
mod error;
pub mod learner;
pub mod matops;
pub mod model;
pub mod observer;
pub mod sim;

pub use error::{Error, Result};
