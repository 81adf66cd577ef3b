//! Deformable encoder, query selection, line-anchored decoder and prediction heads.

mod layers;
mod model;

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LineSegment;
use crate::numeric::{Graph, Tensor, Var};
use crate::pyramid::{BackboneConfig, PE_TEMPERATURE};

pub use layers::{DecoderLayer, EncoderLayer, FeedForward};
pub use model::{
    decoder_forward, encoder_forward, prediction_heads, query_selection, Decoder, DecoderStep, DtLsd, LayerOutput, ModelOutput,
    PredictionHeads, QuerySelector,
};

/// Smallest half-extent used to scale cross-attention offsets, so point-like anchors still
/// spread their samples.
pub const MIN_HALF_EXTENT: f64 = 1.0 / 64.0;

/// Epsilon of the inverse sigmoid applied to anchors before logit-space refinement.
pub const ANCHOR_LOGIT_EPS: f64 = 1e-5;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    /// Sampling points per head and level.
    pub points: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub ffn_dim: usize,
    pub backbone: BackboneConfig,
    /// Stop gradients through decoder anchors between layers and from the proposals.
    pub detach_anchors: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            heads: 8,
            points: 4,
            encoder_layers: 6,
            decoder_layers: 6,
            num_queries: 900,
            ffn_dim: 1024,
            backbone: BackboneConfig::default(),
            detach_anchors: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale profile for 64 × 64 inputs.
    pub fn toy() -> Self {
        Self {
            d: 32,
            heads: 4,
            points: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            num_queries: 50,
            ffn_dim: 64,
            backbone: BackboneConfig::default(),
            detach_anchors: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.d == 0 || !self.d.is_multiple_of(8) {
            return Err(Error::config(format!("hidden size {} must be a positive multiple of 8", self.d)));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!("hidden size {} must split across {} heads", self.d, self.heads)));
        }
        if self.points == 0 || self.num_queries == 0 || self.ffn_dim == 0 {
            return Err(Error::config("points, queries and feed-forward width must be positive"));
        }
        Ok(())
    }
}

/// A decoder query: content vector plus its 4D line anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct LineQuery {
    pub content: Vec<f64>,
    pub anchor: LineSegment,
}

/// Sinusoidal embedding of anchors `[N, 4]` into `[N, d]`, `d / 4` channels per coordinate.
pub fn anchor_sine_embed(anchors: &Tensor, d: usize) -> Tensor {
    let mut g = Graph::new();
    let a = g.constant(anchors.clone());
    let e = sine_embed_on(&mut g, a, d);
    g.value(e).clone()
}

/// [`anchor_sine_embed`] recorded on the tape.
pub fn sine_embed_on(g: &mut Graph, anchors: Var, d: usize) -> Var {
    assert_eq!(g.shape(anchors)[1], 4);
    let per = d / 4;
    let mut freq = vec![0.0; 4 * d];
    for c in 0..4 {
        for m in 0..per {
            freq[c * d + c * per + m] = TAU / PE_TEMPERATURE.powf((2 * (m / 2)) as f64 / per as f64);
        }
    }
    let freq = g.constant(Tensor::from_parts(vec![4, d], freq));
    let phase = g.matmul(anchors, freq);
    g.map(phase, |i, x| {
        let (s, c) = x.sin_cos();
        if (i % d % per).is_multiple_of(2) {
            (s, c)
        } else {
            (c, -s)
        }
    })
}

/// Midpoints `[N, 2]` and half-extents `(|x2 - x1|, |y2 - y1|) / 2` of anchors `[N, 4]`, the
/// latter floored at [`MIN_HALF_EXTENT`].
pub fn anchor_frames(anchors: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let a = g.constant(anchors.clone());
    let (m, h) = frames_on(&mut g, a);
    (g.value(m).clone(), g.value(h).clone())
}

/// [`anchor_frames`] recorded on the tape. The floor has zero derivative where it is active.
pub fn frames_on(g: &mut Graph, anchors: Var) -> (Var, Var) {
    let mid = g.constant(Tensor::from_parts(vec![4, 2], vec![0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.5]));
    let half = g.constant(Tensor::from_parts(vec![4, 2], vec![-0.5, 0.0, 0.0, -0.5, 0.5, 0.0, 0.0, 0.5]));
    let mids = g.matmul(anchors, mid);
    let raw = g.matmul(anchors, half);
    let halves = g.map(raw, |_, h| {
        if h.abs() >= MIN_HALF_EXTENT {
            (h.abs(), h.signum())
        } else {
            (MIN_HALF_EXTENT, 0.0)
        }
    });
    (mids, halves)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames() {
        let a = Tensor::new(vec![2, 4], vec![0.2, 0.8, 0.6, 0.4, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let (m, h) = anchor_frames(&a);
        for (a, b) in m.data().iter().zip([0.4, 0.6, 0.5, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((h.data()[0] - 0.2).abs() < 1e-12);
        assert!((h.data()[1] - 0.2).abs() < 1e-12);
        assert_eq!(&h.data()[2..], &[MIN_HALF_EXTENT, MIN_HALF_EXTENT]);
    }

    #[test]
    fn sine_embed_layout() {
        let a = Tensor::new(vec![1, 4], vec![0.0, 0.25, 0.5, 0.75]).unwrap();
        let e = anchor_sine_embed(&a, 8);
        let expect = [0.0, 1.0, 1.0, 0.0, 0.0, -1.0, -1.0, 0.0];
        for (x, y) in e.data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn config_checks() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::toy().validate().is_ok());
        let bad = ModelConfig {
            d: 12,
            ..ModelConfig::toy()
        };
        assert!(bad.validate().is_err());
    }
}
