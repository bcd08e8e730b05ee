pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod gfq;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod ot;
pub mod trainer;
pub mod unlearn;

pub use error::{Error, Result};
