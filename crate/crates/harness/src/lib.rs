//! Experiment orchestration for the semi-supervised person search
//! pipeline: configuration, the cached end-to-end pipeline, the component
//! ablation ladder, parameter sweeps and report rendering.

pub mod ablation;
pub mod config;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod sweep;
