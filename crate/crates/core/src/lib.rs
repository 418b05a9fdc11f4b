//! Latent-action world models on procedurally generated sprite videos.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod controller;
pub mod encoder;
pub mod episode_io;
pub mod error;
pub mod evalsuite;
pub mod lam;
pub mod optim;
pub mod params;
pub mod planner;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod worldgen;

pub use error::{Error, Result};
