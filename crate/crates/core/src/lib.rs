//! Optimal sensor and actuator matrices for steady-state Kalman filtering.
//!
//! The cost `J(γ, C) = tr(L K)` is minimized over rank-`p` orthogonal
//! projectors `C = cᵀc`, where `K` is the stabilizing solution of
//! `AᵀK + KA + Q − γKCK = 0`. Extremal points are the projectors commuting with
//! `M = KRK`; the double-bracket flow `Ċ = γ[C,[C,M]]` descends to the
//! projector onto the top-`p` eigenspace of `M` for small `γ`.
//!
//! Modules, bottom-up:
//! - [`densela`]: Schur-based Lyapunov and Newton–Kleinman Riccati solvers.
//! - [`isospectral`]: the manifold of projectors, its normal metric and retraction.
//! - [`objective`]: cost, Riemannian gradient and Hessian.
//! - [`flow`]: the discretized gradient flow.
//! - [`extremal`]: enumeration, continuation and Hessian signatures of critical points.
//! - [`kalmansim`]: Monte Carlo check that `tr K` is the filter's mean-squared error.
//! - [`experiments`]: batch studies of the small-`γ` regime and of the rule-of-thumb sensor.

pub mod densela;
pub mod error;
pub mod experiments;
pub mod extremal;
pub mod flow;
pub mod io;
pub mod isospectral;
pub mod kalmansim;
pub mod objective;
pub mod rng;

pub use densela::{Matrix, StableMatrix, SymPosDef};
pub use error::{Error, Result};
