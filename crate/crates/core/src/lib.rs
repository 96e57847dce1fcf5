//! Caption corpus exploration and caption steering.
//!
//! The crate turns an image corpus into captions, a word co-occurrence
//! graph, filtered image segments and a segment-by-word Grad-CAM association
//! matrix, and steers caption generation through prompts and per-patch
//! weights. Models are reached only through [`adapter::ModelAdapter`].

pub mod adapter;
pub mod corpus;
pub mod error;
pub mod mask;
pub mod par;
pub mod store;

pub use error::{Error, Result};
pub mod association;
pub mod grounding;
pub mod pipeline;
pub mod segments;
pub mod steering;
