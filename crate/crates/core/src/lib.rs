pub mod attention;
pub mod autograd;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod forward;
pub mod inference;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod proposal;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
