//! Image captioning toolkit over precomputed image features.

pub mod data;
pub mod decode;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod text;
pub mod train;
pub mod cli;
