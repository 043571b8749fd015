//! Central-spin detector coupled to a self-interacting spin bath.
//!
//! Exact thermally averaged propagation, a non-Markovian mean-field master
//! equation, and estimation of the intra-bath coupling from the detector's
//! fidelity period.

pub mod bath_thermal;
pub mod error;
pub mod exact_prop;
pub mod harness;
pub mod linalg;
pub mod nmme;
pub mod observables;
pub mod ode;
pub mod spin_ops;

pub use error::{Error, Result};
