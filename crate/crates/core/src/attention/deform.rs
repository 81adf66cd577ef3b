use std::f64::consts::TAU;
use std::sync::Arc;

use rand::Rng;

use super::sampling::{bilinear_sample, DeformShape};
use super::ReferencePoint;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numeric::{linear_forward, softmax_slice, Graph, LocScale, ParamGroup, ParamStore, Tensor, Var};
use crate::pyramid::{FlattenedMemory, LevelLayout};

/// Initial layout of the sampling points before any training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffsetInit {
    /// Head `m` points along direction `2πm/M`, point `i` at distance `i + 1` (index units).
    Ring,
    /// Like `Ring` with point `i` at fraction `(i + 1) / k` of the scale, so the points of an
    /// extent-scaled query stay inside its box.
    WithinExtent,
    /// Offset and weight layers random like every other projection.
    Random,
}

/// Multi-scale deformable attention parameters.
#[derive(Clone, Debug)]
pub struct MsDeformAttn {
    pub shape: DeformShape,
    pub d: usize,
    pub value_proj: Linear,
    pub offset_proj: Linear,
    pub weight_proj: Linear,
    pub output_proj: Linear,
}

/// Intermediate tape variables of one deformable attention call.
#[derive(Clone, Copy, Debug)]
pub struct DeformOutput {
    pub out: Var,
    /// Normalized attention weights `[N, heads·levels·points]`.
    pub weights: Var,
    /// Sampling locations `[N, heads·levels·points·2]` in normalized `(x, y)`.
    pub locations: Var,
}

impl MsDeformAttn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        shape: DeformShape,
        init: OffsetInit,
        rng: &mut R,
    ) -> Result<Self> {
        if shape.heads == 0 || !d.is_multiple_of(shape.heads) {
            return Err(Error::config(format!("hidden size {d} must split across {} heads", shape.heads)));
        }
        if shape.levels == 0 || shape.points == 0 {
            return Err(Error::config("deformable attention needs at least one level and one point"));
        }
        let g = ParamGroup::Transformer;
        let value_proj = Linear::new(store, &format!("{name}.value_proj"), g, d, d, rng);
        let output_proj = Linear::new(store, &format!("{name}.output_proj"), g, d, d, rng);
        let (offset_proj, weight_proj) = match init {
            OffsetInit::Random => (
                Linear::new(store, &format!("{name}.sampling_offsets"), g, d, shape.offsets_per_query(), rng),
                Linear::new(store, &format!("{name}.attention_weights"), g, d, shape.samples_per_query(), rng),
            ),
            OffsetInit::Ring | OffsetInit::WithinExtent => {
                let off = Linear::zeroed(store, &format!("{name}.sampling_offsets"), g, d, shape.offsets_per_query());
                let bias = store.value_mut(off.b).data_mut();
                for m in 0..shape.heads {
                    let theta = TAU * m as f64 / shape.heads as f64;
                    let (s, c) = theta.sin_cos();
                    let norm = c.abs().max(s.abs());
                    for l in 0..shape.levels {
                        for i in 0..shape.points {
                            let k = ((m * shape.levels + l) * shape.points + i) * 2;
                            let r = match init {
                                OffsetInit::Ring => (i + 1) as f64,
                                _ => (i + 1) as f64 / shape.points as f64,
                            };
                            let (ox, oy) = (c / norm * r, s / norm * r);
                            bias[k] = ox;
                            bias[k + 1] = oy;
                        }
                    }
                }
                let weights = Linear::zeroed(store, &format!("{name}.attention_weights"), g, d, shape.samples_per_query());
                (off, weights)
            }
        };
        Ok(Self {
            shape,
            d,
            value_proj,
            offset_proj,
            weight_proj,
            output_proj,
        })
    }

    /// Records one call on the tape.
    ///
    /// `query` is `[N, d]`, `refs` holds normalized `(x, y)` reference points `[N, 2]`, and
    /// `input` is the flattened memory `[T, d]` described by `layout`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        refs: Var,
        input: Var,
        layout: &Arc<LevelLayout>,
        scale: LocScale,
    ) -> DeformOutput {
        let n = g.shape(query)[0];
        let sh = self.shape;
        let value = self.value_proj.forward(g, store, input);
        let offsets = self.offset_proj.forward(g, store, query);
        let logits = self.weight_proj.forward(g, store, query);
        let grouped = g.reshape(logits, vec![n * sh.heads, sh.levels * sh.points]);
        let soft = g.softmax_rows(grouped, None);
        let weights = g.reshape(soft, vec![n, sh.samples_per_query()]);
        let locations = g.sample_locations(refs, offsets, scale, sh);
        let sampled = g.deform_sample(value, locations, weights, layout.clone(), sh);
        let out = self.output_proj.forward(g, store, sampled);
        DeformOutput {
            out,
            weights,
            locations,
        }
    }
}

/// Offsets in level-index units: `loc = p̂ + Δ / (W_l, H_l)`.
pub fn index_unit_scale(layout: &LevelLayout) -> LocScale {
    LocScale::PerLevel(Arc::new(
        layout
            .shapes
            .iter()
            .map(|&(h, w)| (1.0 / w as f64, 1.0 / h as f64))
            .collect(),
    ))
}

/// Evaluates multi-scale deformable attention for a batch of queries `[N, d]` against a
/// flattened memory. Reference points are clamped into the unit square.
pub fn ms_deform_attn(
    z: &Tensor,
    refs: &[ReferencePoint],
    memory: &FlattenedMemory,
    attn: &MsDeformAttn,
    store: &ParamStore,
) -> Result<Tensor> {
    Ok(ms_deform_attn_detailed(z, refs, memory, attn, store)?.0)
}

/// Like [`ms_deform_attn`], also returning the attention weights and sampling locations.
pub fn ms_deform_attn_detailed(
    z: &Tensor,
    refs: &[ReferencePoint],
    memory: &FlattenedMemory,
    attn: &MsDeformAttn,
    store: &ParamStore,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_inputs(z, refs.len(), attn)?;
    if memory.layout.num_levels() != attn.shape.levels {
        return Err(Error::arg(format!(
            "memory has {} levels, attention expects {}",
            memory.layout.num_levels(),
            attn.shape.levels
        )));
    }
    if memory.tokens.dims2().1 != attn.d {
        return Err(Error::arg("memory width does not match attention width"));
    }
    let mut g = Graph::new();
    let q = g.constant(z.clone());
    let r: Vec<f64> = refs.iter().flat_map(|p| { let p = p.clamped(); [p.x, p.y] }).collect();
    let r = g.constant(Tensor::from_parts(vec![refs.len(), 2], r));
    let mem = g.constant(memory.tokens.clone());
    let o = attn.forward(&mut g, store, q, r, mem, &memory.layout, index_unit_scale(&memory.layout));
    Ok((g.value(o.out).clone(), g.value(o.weights).clone(), g.value(o.locations).clone()))
}

fn check_inputs(z: &Tensor, n_refs: usize, attn: &MsDeformAttn) -> Result<()> {
    if z.rank() != 2 || z.shape()[1] != attn.d {
        return Err(Error::arg(format!("queries {:?} do not have width {}", z.shape(), attn.d)));
    }
    if z.shape()[0] != n_refs {
        return Err(Error::arg("one reference point per query is required"));
    }
    Ok(())
}

/// Single-scale deformable attention evaluated directly in index space.
///
/// `p` is the `(row, col)` reference position on the `H × W × d` map `f`; the attention must
/// have been built for one level. Each head takes the softmax over its `k` points.
pub fn deform_attn_single(
    z: &Tensor,
    p: &[(f64, f64)],
    f: &Tensor,
    attn: &MsDeformAttn,
    store: &ParamStore,
) -> Result<Tensor> {
    check_inputs(z, p.len(), attn)?;
    if attn.shape.levels != 1 {
        return Err(Error::arg("single-scale attention needs a one-level module"));
    }
    if f.rank() != 3 || f.shape()[2] != attn.d {
        return Err(Error::arg(format!("feature map {:?} does not have width {}", f.shape(), attn.d)));
    }
    let (h, w, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let (heads, k) = (attn.shape.heads, attn.shape.points);
    let dh = d / heads;
    let flat = f.clone().reshape(vec![h * w, d])?;
    let value = linear_forward(&flat, store.get(attn.value_proj.w), store.get(attn.value_proj.b))?
        .reshape(vec![h, w, d])?;
    let offsets = linear_forward(z, store.get(attn.offset_proj.w), store.get(attn.offset_proj.b))?;
    let logits = linear_forward(z, store.get(attn.weight_proj.w), store.get(attn.weight_proj.b))?;
    let n = z.shape()[0];
    let mut heads_out = vec![0.0; n * d];
    for q in 0..n {
        for m in 0..heads {
            let mut a = logits.row(q)[m * k..(m + 1) * k].to_vec();
            softmax_slice(&mut a);
            for (i, &ai) in a.iter().enumerate() {
                let s = m * k + i;
                let dx = offsets.row(q)[2 * s];
                let dy = offsets.row(q)[2 * s + 1];
                let v = bilinear_sample(&value, p[q].0 + dy, p[q].1 + dx);
                for c in 0..dh {
                    heads_out[q * d + m * dh + c] += ai * v[m * dh + c];
                }
            }
        }
    }
    let sampled = Tensor::from_parts(vec![n, d], heads_out);
    linear_forward(&sampled, store.get(attn.output_proj.w), store.get(attn.output_proj.b))
}
