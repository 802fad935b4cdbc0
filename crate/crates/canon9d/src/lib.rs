//! File formats, the annotation pipeline, its HTTP service and CLI helpers.

pub mod evaluation;
pub mod fpc;
pub mod ledger;
pub mod manifest;
pub mod pipeline;
pub mod records;
pub mod service;
pub mod synth;
