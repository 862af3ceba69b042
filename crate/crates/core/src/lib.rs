pub mod adapter;
pub mod attribution;
pub mod checkpoint;
pub mod codec;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod features;
pub mod grid;
pub mod image;
pub mod inference;
pub mod manifest;
pub mod nn;
pub mod random;
pub mod schedule;
pub mod scorer;
pub mod synth;
pub mod text;
pub mod toy;
pub mod unet;

pub use error::{Error, Result};
