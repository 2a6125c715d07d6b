pub mod attack;
pub mod data;
pub mod divergence;
pub mod error;
pub mod model;
pub mod objective;
pub mod optim;
pub mod ou;
pub mod params;
pub mod perturb;
pub mod seeds;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};
