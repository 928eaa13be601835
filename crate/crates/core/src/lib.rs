//! Jointly designed local differential privacy and compression.
//!
//! Offline, [`designer`] builds a [`MechanismTable`]: a sampling matrix and
//! output alphabet that are unbiased and satisfy an LDP or metric-DP
//! constraint at a fixed bit budget. Online, [`mechanisms`] dithers client
//! values onto the input grid and samples a `b_out`-bit index per
//! coordinate. [`accountant`] bounds Rényi-DP loss under composition and
//! [`dme`] simulates distributed mean estimation end to end.

pub mod accountant;
pub mod designer;
pub mod dme;
pub mod error;
pub mod lattice;
pub mod mechanisms;
pub mod rng;
pub mod tables;

pub use error::{Error, Result};
pub use lattice::{DitherGrid, DitherLaw, NormPreservingConfig};
pub use tables::{FeasibilityReport, LoadPolicy, MechanismTable, PrivacySpec, Tolerances};
pub use accountant::{AccountLedger, RdpMethod, RenyiProfile};
pub use designer::{design_mvu, DesignResult, SolverMethod, SolverOptions};
pub use dme::{DmeMode, DmeResult, DmeRun};
pub use mechanisms::{Payload, VectorSpec};
