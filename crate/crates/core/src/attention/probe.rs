//! Wall-clock scaling of encoder self-attention with the token count.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::deform::{index_unit_scale, MsDeformAttn, OffsetInit};
use super::global::global_attention;
use super::sampling::DeformShape;
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamStore, Tensor};
use crate::pyramid::LevelLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Global,
    Deformable,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Global => "global",
            Mechanism::Deformable => "deformable",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRow {
    pub mechanism: Mechanism,
    pub tokens: usize,
    pub d: usize,
    pub median_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mechanism: Mechanism,
    pub rows: Vec<ProbeRow>,
    /// Least-squares slope of `ln(time)` against `ln(tokens)`.
    pub slope: f64,
}

impl ProbeResult {
    pub fn write_csv(results: &[ProbeResult]) -> String {
        let mut s = String::from("mechanism,tokens,d,median_seconds,slope\n");
        for r in results {
            for row in &r.rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{:e},{}",
                    row.mechanism.as_str(),
                    row.tokens,
                    row.d,
                    row.median_seconds,
                    r.slope
                );
            }
        }
        s
    }
}

/// Times encoder self-attention (every token is a query) for each token count and fits the
/// log-log slope. The deformable encoder runs one square-ish level with 4 heads and 4 points.
pub fn complexity_probe(mechanism: Mechanism, token_counts: &[usize], d: usize, repeats: usize, seed: u64) -> Result<ProbeResult> {
    if token_counts.len() < 2 || token_counts.contains(&0) {
        return Err(Error::arg("need at least two positive token counts"));
    }
    if repeats == 0 || d == 0 || !d.is_multiple_of(4) {
        return Err(Error::arg("repeats must be positive and d a multiple of 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &n in token_counts {
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![n, d], x)?;
        let mut run: Box<dyn FnMut() -> f64> = match mechanism {
            Mechanism::Global => Box::new(move || {
                let out = global_attention(&x, &x, &x, 1).expect("valid shapes");
                out.data()[0]
            }),
            Mechanism::Deformable => {
                let mut store = ParamStore::new();
                let shape = DeformShape {
                    heads: 4,
                    levels: 1,
                    points: 4,
                };
                let attn = MsDeformAttn::new(&mut store, "probe", d, shape, OffsetInit::Random, &mut rng)?;
                let layout = Arc::new(LevelLayout::from_shapes(vec![grid_shape(n)]));
                let refs = layout.reference_points();
                Box::new(move || {
                    let mut g = Graph::new();
                    let q = g.constant(x.clone());
                    let r = g.constant(refs.clone());
                    let o = attn.forward(&mut g, &store, q, r, q, &layout, index_unit_scale(&layout));
                    g.value(o.out).data()[0]
                })
            }
        };
        std::hint::black_box(run());
        let mut times: Vec<f64> = (0..repeats)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(run());
                t.elapsed().as_secs_f64()
            })
            .collect();
        times.sort_by(f64::total_cmp);
        let median = if repeats % 2 == 1 {
            times[repeats / 2]
        } else {
            0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
        };
        rows.push(ProbeRow {
            mechanism,
            tokens: n,
            d,
            median_seconds: median,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.tokens as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_seconds.max(1e-12).ln()).collect();
    Ok(ProbeResult {
        mechanism,
        rows,
        slope: ls_slope(&xs, &ys),
    })
}

/// Most-square `(h, w)` with `h · w == n`.
fn grid_shape(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    (h.max(1), n / h.max(1))
}

pub(crate) fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
