//! Lensless imaging: PSF simulation, forward models, reconstruction, model-mismatch analysis and benchmarking.

pub mod bench;
pub mod cli;
pub mod error;
pub mod grid;
pub mod io;
pub mod forward;
pub mod optics;
pub mod metrics;
pub mod mismatch;
pub mod recover;

pub use error::{Error, Result};
