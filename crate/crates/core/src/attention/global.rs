use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numeric::{masked_softmax_slice, softmax_slice, Graph, ParamGroup, ParamStore, Tensor, Var};

/// `softmax(Q Kᵀ / √d_h) V` per head, heads concatenated along the channel axis.
///
/// Rows are processed one query at a time so memory stays linear in the key count.
pub fn global_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::arg("global attention takes matrices"));
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let (nk, dk) = (k.shape()[0], k.shape()[1]);
    let (nv, dv) = (v.shape()[0], v.shape()[1]);
    if dk != d {
        return Err(Error::arg(format!("query width {d} != key width {dk}")));
    }
    if nk != nv {
        return Err(Error::arg(format!("{nk} keys but {nv} values")));
    }
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(Error::arg(format!("widths {d}/{dv} do not split across {heads} heads")));
    }
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * dv];
    let mut scores = vec![0.0; nk];
    for i in 0..n {
        let qrow = q.row(i);
        for m in 0..heads {
            let qh = &qrow[m * dh..(m + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &k.row(j)[m * dh..(m + 1) * dh];
                *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_slice(&mut scores);
            let o = &mut out[i * dv + m * dvh..i * dv + (m + 1) * dvh];
            for (j, &p) in scores.iter().enumerate() {
                for (oo, vv) in o.iter_mut().zip(&v.row(j)[m * dvh..(m + 1) * dvh]) {
                    *oo += p * vv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, dv], out))
}

/// Same as [`global_attention`] with a boolean mask (`true` blocks) over `[n, n_keys]`.
pub fn masked_global_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, blocked: &[bool]) -> Result<Tensor> {
    let (n, nk) = (q.shape()[0], k.shape()[0]);
    if blocked.len() != n * nk {
        return Err(Error::arg("mask does not cover queries × keys"));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = attend(&mut g, qv, kv, vv, heads, Some(Arc::new(blocked.to_vec())));
    Ok(g.value(out).clone())
}

/// Multi-head scaled dot-product attention on the tape.
pub(crate) fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, mask: Option<Arc<Vec<bool>>>) -> Var {
    let d = g.shape(q)[1];
    let dv = g.shape(v)[1];
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for m in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, m * dh, (m + 1) * dh),
                g.slice_cols(k, m * dh, (m + 1) * dh),
                g.slice_cols(v, m * dvh, (m + 1) * dvh),
            )
        };
        let s = g.matmul_bt(qh, kh);
        let s = g.scale(s, scale);
        let p = g.softmax_rows(s, mask.clone());
        outs.push(g.matmul(p, vh));
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Projected multi-head self-attention with an optional blocking mask.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!("hidden size {d} must split across {heads} heads")));
        }
        let g = ParamGroup::Transformer;
        Ok(Self {
            heads,
            q_proj: Linear::new(store, &format!("{name}.q_proj"), g, d, d, rng),
            k_proj: Linear::new(store, &format!("{name}.k_proj"), g, d, d, rng),
            v_proj: Linear::new(store, &format!("{name}.v_proj"), g, d, d, rng),
            out_proj: Linear::new(store, &format!("{name}.out_proj"), g, d, d, rng),
        })
    }

    /// Queries and keys come from `qk`, values from `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, qk: Var, x: Var, mask: Option<Arc<Vec<bool>>>) -> Var {
        let q = self.q_proj.forward(g, store, qk);
        let k = self.k_proj.forward(g, store, qk);
        let v = self.v_proj.forward(g, store, x);
        let o = attend(g, q, k, v, self.heads, mask);
        self.out_proj.forward(g, store, o)
    }
}

/// Plain masked softmax of a score row; exposed for oracle tests.
pub fn masked_softmax(scores: &[f64], blocked: &[bool]) -> Vec<f64> {
    let mut row = scores.to_vec();
    masked_softmax_slice(&mut row, blocked);
    row
}
