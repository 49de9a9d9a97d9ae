//! Segmentation with missing input modalities.
//!
//! A small, deterministic CPU implementation of a U-net baseline, modality
//! dropout and the unified representation network (per-modality encoders,
//! f-mean fusion, task decoders), plus a synthetic multimodal phantom
//! generator and an experiment harness that sweeps every modality
//! combination.

pub mod error;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod moddrop;
pub mod rng;
pub mod tensor;
pub mod urn;

pub use error::{Error, Result};
