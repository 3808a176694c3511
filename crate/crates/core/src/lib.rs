//! Feature extraction with clustering.
//!
//! A visual backbone whose pooling and encoding layers are hard clustering
//! steps. Every forward pass can report which pixels joined which cluster,
//! and linking those assignments across pooling layers yields a pyramid of
//! image segments.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod cluster;
pub mod error;
pub mod gradcheck;
pub mod hierarchy;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{FecError, Result};
