//! Greenhouse segmentation for multi-band satellite scenes.
//!
//! The crate covers a CPU tensor library with reverse-mode autodiff
//! ([`tensor`]), three U-Net variants ([`networks`]), raster and label I/O
//! with a synthetic scene generator ([`raster`]), scene conditioning
//! ([`preprocess`]), tile preparation ([`dataset`]), losses, weight maps and
//! metrics ([`metrics`]), training with hard example mining ([`trainer`]),
//! and tiled inference with rectangle vectorization ([`infer`]).

mod binio;
pub mod dataset;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod networks;
pub mod preprocess;
pub mod raster;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub struct Tensors;
    #[doc = include_str!("../../../book/src/networks.md")]
    pub struct Networks;
    #[doc = include_str!("../../../book/src/rasters.md")]
    pub struct Rasters;
    #[doc = include_str!("../../../book/src/preprocess.md")]
    pub struct Preprocess;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/inference.md")]
    pub struct Inference;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    pub struct Reproducibility;
}
