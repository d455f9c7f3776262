//! Simulation and relaxometry toolkit for ¹³C nuclear-spin dephasing in an NV
//! center.
//!
//! The register is the NV electron spin-1 coupled to one strongly coupled ¹³C
//! nuclear spin-1/2. Free-induction-decay and Hahn-echo circuits store a
//! nuclear coherence, transfer it to the electron with a SWAP and read it out
//! through a phase-ramped 90° pulse. The crate simulates those circuits under
//! electron T1 hopping, adds photon shot noise, and fits the resulting traces
//! back to dephasing times.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod circuits;
pub mod error;
pub mod fitting;
pub mod protocols;
pub mod qcore;
pub mod relaxation;
pub mod spin_model;

pub use error::{Error, Result};
