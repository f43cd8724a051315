//! File formats, preprocessing and evaluation shared by the pipeline stages.

pub mod checkpoint;
pub mod dataset;
pub mod manifest;
pub mod metrics;
pub mod pgm;
pub mod preprocess;
pub mod stamp;
pub mod tensorfile;
