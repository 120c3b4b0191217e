//! Architecture search over weight-entangled supernets.
//!
//! One library, five layers: `superposition` holds the entangled-storage
//! mixture operations, `samplers` maps architecture parameters to simplex
//! weights, `spaces` defines the searchable model families, `search` runs
//! the single-stage and two-stage procedures, and `harness` supplies data,
//! benchmarks, analysis, and persistence.

pub mod arch;
pub mod error;
pub mod harness;
pub mod samplers;
pub mod search;
pub mod spaces;
pub mod superposition;

pub use arch::{discretize, Architecture, SearchDim, SearchSpaceSpec};
pub use error::{Result, TnasError};
