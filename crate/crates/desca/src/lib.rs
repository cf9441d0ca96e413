//! Dense self-correlation image descriptors for cross-modal correspondence.
//!
//! The crate implements a family of local self-similarity descriptors —
//! LSS, DASC, SiSCA and the hierarchical DeSCA — together with the fast
//! dense computation scheme (per-displacement correlation planes plus index
//! remapping), a winner-takes-all stereo matcher, and bad-pixel evaluation.
//!
//! # Layout
//! - [`image`] / [`io`] — image container, PGM/PFM files
//! - [`filter`] — box and guided weighted means
//! - [`geometry`] — log-polar sampling patterns and pyramid bins
//! - [`selfconv`] — self-correlation surfaces (fast and direct routes)
//! - [`descriptors`] — descriptor assembly and the on-disk field format
//! - [`matching`] — cost volumes, disparities, evaluation

pub mod descriptors;
pub mod error;
pub mod filter;
pub mod geometry;
pub mod image;
pub mod io;
pub mod matching;
pub mod selfconv;
pub mod synth;

pub use error::{DescaError, Result};
pub use image::Image;
