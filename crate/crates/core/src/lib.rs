//! Multi-period allocation of a divisible resource among entities with
//! stochastic per-unit returns.
//!
//! Each period the available resource `x_{t-1}` is split between `n` risky
//! entities and a reference entity, and the resource evolves as
//! `x_t = e_t x_{t-1} + P_t' u_t`. The solvers maximize
//! `sum_t E[a_t x_t - b_t x_t^2]` by backward induction while enforcing the
//! budget `1'u_t <= x_{t-1}` every period (or charging a per-unit cost for
//! exceeding it). The variance-constrained and Lagrangian formulations are
//! reduced to that separable form by [`calibrate`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod num;
pub mod model;
pub mod pwq;
pub mod qp;
pub mod policy;
pub mod dp1d;
pub mod dpnd;
pub mod nodes;
pub mod flex;
pub mod oracle;
pub mod simulate;
pub mod calibrate;
pub mod solve;
pub mod cli;

pub use error::{Error, Result};
