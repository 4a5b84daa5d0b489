//! Training kit for masked latent visual reconstruction on a miniature
//! multimodal transformer, with the matching representation-diagnostics
//! suite (cosine homogenization, attention allocation, CKA/CKNNA, PCA
//! feature maps).

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod ema;
pub mod error;
pub mod fdcheck;
pub mod layout;
pub mod losses;
pub mod masking;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
