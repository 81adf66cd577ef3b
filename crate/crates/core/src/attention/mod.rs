//! Global attention, single- and multi-scale deformable attention, and the complexity probe.

mod deform;
mod global;
mod probe;
pub(crate) mod sampling;

use serde::{Deserialize, Serialize};

pub use deform::{
    deform_attn_single, index_unit_scale, ms_deform_attn, ms_deform_attn_detailed, DeformOutput, MsDeformAttn,
    OffsetInit,
};
pub use global::{global_attention, masked_global_attention, masked_softmax, MultiHeadAttention};
pub use probe::{complexity_probe, Mechanism, ProbeResult, ProbeRow};
pub use sampling::{bilinear_sample, DeformShape};

/// Normalized 2D reference point `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub x: f64,
    pub y: f64,
}

impl ReferencePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn clamped(self) -> Self {
        Self::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }
}

/// Maps a normalized point onto the continuous `(row, col)` index grid of an `H × W` level,
/// with pixel centers at integer positions: `index = coord · size − 0.5`.
pub fn phi_rescale(p: ReferencePoint, level_shape: (usize, usize)) -> (f64, f64) {
    let (h, w) = level_shape;
    (p.y * h as f64 - 0.5, p.x * w as f64 - 0.5)
}
