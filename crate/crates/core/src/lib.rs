pub mod abduction;
pub mod autodiff;
pub mod error;
pub mod event;
pub mod intensity;
pub mod optim;
pub mod metrics;
pub mod proposer;
pub mod ranker;
pub mod retrieval;
pub mod synthetic;
pub mod pipeline;

pub use error::{Error, Result};
