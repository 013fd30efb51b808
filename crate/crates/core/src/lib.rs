//! Distortion-aware panoramic segmentation at desk scale.
//!
//! The crate contains a small reverse-mode tensor engine ([`numcore`]), a
//! synthetic sphere-world renderer producing pinhole and equirectangular
//! scenes ([`panogeo`]), deformable patch embedding and deformable MLP
//! mixing ([`deform`]), the pyramid segmentation network ([`model`]),
//! mutual prototypical adaptation ([`mpa`]), training loops ([`trainer`]),
//! evaluation ([`metrics`]) and the end-to-end [`pipeline`] driven by the
//! `pano-deform` binary.

pub mod checks;
pub mod deform;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod mpa;
pub mod nn;
pub mod numcore;
pub mod panogeo;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE};
pub use numcore::{Border, Graph, ParamStore, Tensor, Var};
