pub mod config;
pub mod dataset;
pub mod error;
pub mod files;
pub mod guidance;
pub mod infotheory;
pub mod seed;
pub mod spectral;
pub mod toymodel;

pub use error::{Error, Result};
