pub mod error;
pub mod expfam;
pub mod fedsim;
pub mod models;
pub mod pep;
pub mod pvi;
pub mod quadrature;
pub mod seed;
pub mod synth;
pub mod tolerance;

pub use error::{PviError, Result};
