//! Whole-body MRI kidney volumetry: station fusion, component analysis,
//! measurement and automated quality control.

pub mod config;
pub mod error;
pub mod fusion;
pub mod manifest;
pub mod measure;
pub mod metrics;
pub mod morphology;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod qc;
pub mod report;
pub mod segmenter;
pub mod volgrid;
pub mod volio;

pub use error::{Error, Result};
pub use volgrid::{Geometry, ImageGrid, LabelGrid, VolumeGrid};
