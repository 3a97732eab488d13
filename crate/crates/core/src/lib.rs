pub mod cli;
pub mod datapath;
pub mod error;
pub mod minifloat;
pub mod netgraph;
pub mod perfmodel;
pub mod quantizer;
pub mod toy;

pub use error::{Error, Result};
pub use minifloat::{Code8, ExactValue, Fp8Format};
