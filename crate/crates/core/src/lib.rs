pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod predict;
pub mod scalar;
pub mod sim;
pub mod weather;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Theta64 = model::Theta<f64>;
pub type CurveSet64 = kernel::CurveSet<f64>;
pub type Dataset64 = dataset::FunctionalDataset<f64>;
pub type Samples64 = mcmc::PosteriorSamples<f64>;
