pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod inference;
pub mod layers;
pub mod mrp;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
