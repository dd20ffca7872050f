pub mod error;
pub mod geometry;
pub mod latent;
pub mod datagen;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod tape;

pub use error::{Error, Result};
