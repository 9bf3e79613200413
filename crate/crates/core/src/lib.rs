pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod emotion;
pub mod error;
pub mod eval;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod train;

pub use config::{SystemConfig, Variant};
pub use emotion::Emotion;
pub use error::{Error, Result};
pub use exec::Exec;
