use std::sync::Arc;

use rand::Rng;

use crate::attention::{index_unit_scale, DeformShape, MsDeformAttn, MultiHeadAttention, OffsetInit};
use crate::error::Result;
use crate::nn::{LayerNorm, Linear};
use crate::numeric::{Graph, LocScale, ParamGroup, ParamStore, Var};
use crate::pyramid::LevelLayout;

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Transformer;
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), g, d, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), g, hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Deformable self-attention over all tokens, then a feed-forward block; post-norm residuals.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MsDeformAttn,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        ffn_dim: usize,
        shape: DeformShape,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::Transformer;
        Ok(Self {
            attn: MsDeformAttn::new(store, &format!("{name}.self_attn"), d, shape, OffsetInit::Ring, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), g, d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), g, d),
        })
    }

    /// `x` is `[L, d]`; `refs` the token reference points `[L, 2]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, refs: Var, layout: &Arc<LevelLayout>) -> Var {
        let a = self.attn.forward(g, store, x, refs, x, layout, index_unit_scale(layout));
        let h = g.add(x, a.out);
        let h = self.norm1.forward(g, store, h);
        let f = self.ffn.forward(g, store, h);
        let h2 = g.add(h, f);
        self.norm2.forward(g, store, h2)
    }
}

/// Masked self-attention among queries, line-anchored deformable cross-attention into the
/// memory, then a feed-forward block; post-norm residuals.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MsDeformAttn,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        ffn_dim: usize,
        shape: DeformShape,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::Transformer;
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, shape.heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), g, d),
            cross_attn: MsDeformAttn::new(store, &format!("{name}.cross_attn"), d, shape, OffsetInit::WithinExtent, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), g, d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_dim, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), g, d),
        })
    }

    /// `content` and `pos` are `[N, d]`; `mids` and `halves` the anchor midpoints and signed
    /// half-vectors `[N, 2]`; `memory` is `[L, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        content: Var,
        pos: Var,
        mids: Var,
        halves: Var,
        memory: Var,
        layout: &Arc<LevelLayout>,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Var {
        let q = g.add(content, pos);
        let sa = self.self_attn.forward(g, store, q, content, mask);
        let h = g.add(content, sa);
        let h = self.norm1.forward(g, store, h);
        let q2 = g.add(h, pos);
        let ca = self
            .cross_attn
            .forward(g, store, q2, mids, memory, layout, LocScale::PerQuery(halves));
        let h2 = g.add(h, ca.out);
        let h2 = self.norm2.forward(g, store, h2);
        let f = self.ffn.forward(g, store, h2);
        let h3 = g.add(h2, f);
        self.norm3.forward(g, store, h3)
    }
}
