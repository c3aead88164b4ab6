pub mod adam;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod observations;
pub mod ode;
pub mod optimizer;
pub mod posterior;
pub mod spectral;

pub use error::{Error, Result};
