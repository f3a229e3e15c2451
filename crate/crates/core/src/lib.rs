//! Multilevel latent class models with covariates.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod model;
pub mod numeric;
pub mod posterior;
pub mod report;
pub mod selection;
pub mod simulate;
pub mod init;
pub mod io;
pub mod step1;
pub mod step2;
pub mod variance;

pub use error::{Level, MlcaError, Result};
pub use model::{Dataset, MeasurementParams, ModelDims, ModelParams, StructuralParams};
