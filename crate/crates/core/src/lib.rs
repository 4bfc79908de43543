//! Exponential stability certificates for discrete-time linear systems in
//! feedback with componentwise set-valued step nonlinearities.
//!
//! The closed loop `x+ = A x + B Delta s(K x + d)` switches among affine
//! dynamics as components of `K x + d` change sign. On the switching
//! surfaces the step is relaxed to the full interval `[0, 1]`, which turns
//! the loop into a difference inclusion whose solutions capture every limit
//! of nearby trajectories. This crate certifies global exponential
//! stability of that inclusion:
//!
//! * [`kkt`] characterizes selections of the set-valued step map as
//!   solutions of a complementarity system with closed-form multipliers;
//! * [`lmi`] lifts state, selection, and multipliers into a vector `theta`
//!   that satisfies known linear relations, and builds the matrices of the
//!   resulting semidefinite feasibility conditions;
//! * [`sdp`] encodes and solves those conditions and verifies any returned
//!   certificate by independent residual computation;
//! * [`lyapunov`] evaluates the certified set-valued Lyapunov function and
//!   its supremum, [`sim`] simulates the inclusion under different
//!   selection policies, and [`certify`] ties the pipeline together;
//! * [`sdpa`] reads and writes the sparse SDPA interchange format so the
//!   feasibility problem can be cross-checked with external solvers.

pub mod certify;
pub mod kkt;
pub mod lmi;
pub mod lyapunov;
pub mod model;
pub mod sdp;
pub mod sdpa;
pub mod sim;

mod error;

pub use error::{Error, Result};
