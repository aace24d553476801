//! Consensus tracking for input-delayed linear multi-agent systems with
//! harmonic disturbances, built around a predictive extended state observer.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`matcore`] — dense matrix numerics: exponentials, eigenvalues,
//!   Sylvester/Lyapunov solves, a dual-Riccati LMI construction, and MIMO
//!   pole placement.
//! * [`netgraph`] — directed leader/follower topologies, Laplacian
//!   partitioning, and the M-matrix weight vector.
//! * [`sysmodel`] — plant data, assumption validation, gain synthesis for
//!   both protocol variants, and the ultimate-bound certificate.
//! * [`controller`] — the runtime protocol pieces: reduction transform,
//!   network signals, ESO dynamics, adaptive gains, control laws.
//! * [`simcore`] — deterministic fixed-step integration with delay buffers,
//!   trajectory capture, and metrics.

pub mod controller;
pub mod error;
pub mod matcore;
pub mod netgraph;
pub mod simcore;
pub mod sysmodel;

pub use error::{Error, Result};
