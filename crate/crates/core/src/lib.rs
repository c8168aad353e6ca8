//! Reduced dynamics of repeated interaction quantum systems.
//!
//! A small quantum system `S` interacts in turn with a chain of probes `E_k`,
//! each prepared in a thermal state. Tracing out the probes reduces the
//! dynamics to products of matrices `M_1 ⋯ M_m` acting on `d² × d²` vectors.
//! This crate builds those matrices from Hamiltonians, analyzes their
//! spectra and products (deterministic and random), and evaluates energy and
//! entropy production in the asymptotic state. Every reduced quantity can be
//! checked against a dense simulation of the truncated chain.

pub mod ensemble;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rdo;
pub mod seed;
pub mod thermo;

pub use error::{Result, RiesError};
