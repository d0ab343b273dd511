//! Standard-library companion to the algorithm core: file formats, PNG
//! export, dataset manifests, experiment configs, and the pipeline commands
//! behind the `sino` binary.

pub mod commands;
pub mod formats;
