//! Ground-state solver for small many-body quantum systems.
//!
//! The solver learns a drift field `v(x)` for the diffusion
//! `dX = v(X) dt + dB` by minimizing the time-averaged running cost
//!
//! ```text
//! loss = (1/(B·T)) Σ_{b,t} [ v·ΔB + (½|v|² + V) Δt ]
//! ```
//!
//! whose minimum over drifts equals the ground-state energy `E₀`, attained
//! when the controlled diffusion samples `ψ₀²`.  The crate is organised as
//!
//! * [`diffcore`] — dense f64 arrays plus a define-by-run reverse-mode tape,
//! * [`potentials`] — system definitions (potential, analytic drifts,
//!   reference energies),
//! * [`driftnet`] — permutation-equivariant drift networks and physics-aware
//!   skip connections,
//! * [`sde`] — Euler–Maruyama (and a stochastic Runge–Kutta variant)
//!   integration of the coupled position/cost system,
//! * [`trainer`] — cost estimation, boundary-corrected gradients, Adam, and
//!   the training loop,
//! * [`diagnostics`] — drift-induced potential, zero-variance residuals,
//!   histograms, drift grids, and trajectory export,
//! * [`cli`] — configuration, run directories, and the command-line entry
//!   points.

pub mod cli;
pub mod diagnostics;
pub mod diffcore;
pub mod driftnet;
mod error;
pub mod potentials;
pub mod sde;
pub mod trainer;

pub use error::{Error, Result};
