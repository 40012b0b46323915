pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod layer;
pub mod error;
pub mod harness;
pub mod linear_attention;
pub mod numerics;
pub mod oracle;
pub mod params;
pub mod training;

pub use error::{FwlError, Result};
pub use numerics::{Matrix, Vector};
pub use params::ParamSet;
