//! Class- and text-conditioned latent diffusion on procedurally generated
//! phantom images, with the training objectives, evaluation stack, and
//! dataset tooling around it.

pub mod codec;
pub mod dataset;
pub mod diffusion;
pub mod adapters;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod report;
pub mod text;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
