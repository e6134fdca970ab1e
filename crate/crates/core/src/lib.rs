//! Closed-form Fisher information of diffusion marginals.
//!
//! The diffused marginal of a point cloud or a Gaussian has an analytic
//! negative log-Hessian (`fisher` here), score, and density. This crate
//! provides those oracles, cheap learned-accessor approximations of the
//! Fisher trace and Fisher-vector products, probability-flow ODE tooling
//! (likelihoods and adjoint sensitivities), a small MLP training stack for
//! the learned accessors, and an optimal-transport diagnostic for the flow
//! map built from the Jacobian's fundamental matrix.
//!
//! Modules:
//! - [`schedule`]: VE / VP / sub-VP / EDM noise schedules, closed form.
//! - [`oracle`]: exact weights, density, score, Fisher matrix and trace.
//! - [`access`]: score/trace provider traits, cheap trace and
//!   operator-approximation accessors, error bounds.
//! - [`ode`]: probability-flow ODE, likelihood integration, adjoint solver.
//! - [`train`]: deterministic MLP + AdamW training of the learned providers.
//! - [`ot`]: fundamental-matrix symmetry diagnostic of the flow map.

pub mod access;
pub mod error;
pub mod linalg;
pub mod ode;
pub mod oracle;
pub mod ot;
pub mod schedule;
pub mod train;

pub use error::{DfError, Result};
pub use oracle::{DiracDataset, FisherEval, GaussianInitial};
pub use schedule::{NoiseSchedule, ScheduleKind};
