//! Unpaired adverse-weather image restoration with continual learning.
//!
//! The crate trains a pair of attention generators and global-local
//! discriminators on unpaired degraded/clean corpora, combines adversarial,
//! cycle, perceptual, and patch-contrastive objectives, and layers elastic
//! weight consolidation on top so dehaze/desnow/derain tasks can be learned
//! sequentially with quantified forgetting.

pub mod archive;
pub mod blocks;
pub mod config;
pub mod continual;
pub mod data;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod params;
pub mod perceptual;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use archive::Archive;
pub use error::{Error, Result};
pub use params::{Binding, ParamScope, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor};
