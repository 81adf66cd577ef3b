//! Line segment detection with a deformable transformer.
//!
//! The crate is organised bottom-up:
//!
//! - [`numeric`]: tensors, the gradient tape, gradient checking, AdamW
//! - [`geometry`]: normalized line segments and their transforms
//! - [`pyramid`]: toy backbone, 1×1 projections, sine position encoding, token stacking
//! - [`attention`]: global and multi-scale deformable attention, complexity probe
//! - [`transformer`]: encoder, query selection, decoder and prediction heads
//! - [`lcdn`]: line contrastive denoising queries and the group attention mask
//! - [`matching`]: Hungarian assignment, focal and L1 losses
//! - [`metrics`]: structural and heatmap AP / F-score
//! - [`harness`]: synthetic data, annotation ingestion, training, evaluation, checkpoints

pub mod attention;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod lcdn;
pub mod matching;
pub mod metrics;
pub mod numeric;
pub mod pyramid;
pub mod transformer;

mod nn;

pub use error::{Error, Result};
pub use geometry::LineSegment;
