//! Bilinear sampling with zero padding and the fused multi-scale deformable kernel.

use crate::numeric::Tensor;
use crate::pyramid::LevelLayout;

/// Head / level / point counts of one deformable attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformShape {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformShape {
    pub fn samples_per_query(&self) -> usize {
        self.heads * self.levels * self.points
    }

    pub fn offsets_per_query(&self) -> usize {
        self.samples_per_query() * 2
    }

    /// Level position of flat sample index `((head·levels) + level)·points + point`.
    pub fn level_of(&self, sample: usize) -> usize {
        (sample / self.points) % self.levels
    }
}

/// A corner of the bilinear stencil: flat pixel index (if inside the map), its weight,
/// and the weight's derivatives with respect to the row and column coordinate.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corner {
    pub pixel: Option<usize>,
    pub weight: f64,
    pub d_row: f64,
    pub d_col: f64,
}

pub(crate) fn corners(row: f64, col: f64, h: usize, w: usize) -> [Corner; 4] {
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let at = |r: f64, c: f64| {
        if r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64 {
            Some(r as usize * w + c as usize)
        } else {
            None
        }
    };
    [
        Corner {
            pixel: at(r0, c0),
            weight: (1.0 - fr) * (1.0 - fc),
            d_row: -(1.0 - fc),
            d_col: -(1.0 - fr),
        },
        Corner {
            pixel: at(r0, c0 + 1.0),
            weight: (1.0 - fr) * fc,
            d_row: -fc,
            d_col: 1.0 - fr,
        },
        Corner {
            pixel: at(r0 + 1.0, c0),
            weight: fr * (1.0 - fc),
            d_row: 1.0 - fc,
            d_col: -fr,
        },
        Corner {
            pixel: at(r0 + 1.0, c0 + 1.0),
            weight: fr * fc,
            d_row: fc,
            d_col: fr,
        },
    ]
}

/// Samples an `H × W × d` map at a fractional `(row, col)` index position.
///
/// Grid cells outside `[0, H-1] × [0, W-1]` read as zero.
pub fn bilinear_sample(f: &Tensor, row: f64, col: f64) -> Vec<f64> {
    assert_eq!(f.rank(), 3, "bilinear_sample expects H×W×d");
    let (h, w, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = vec![0.0; d];
    for c in corners(row, col, h, w) {
        if let Some(p) = c.pixel {
            for (o, v) in out.iter_mut().zip(&f.data()[p * d..(p + 1) * d]) {
                *o += c.weight * v;
            }
        }
    }
    out
}

/// Forward pass of the fused kernel; see [`crate::numeric::Graph::deform_sample`].
pub(crate) fn deform_forward(
    value: &Tensor,
    locs: &Tensor,
    weights: &Tensor,
    layout: &LevelLayout,
    shape: DeformShape,
) -> Tensor {
    let (t, d) = value.dims2();
    assert_eq!(t, layout.total_tokens(), "value rows must match the layout");
    assert_eq!(d % shape.heads, 0, "channels must split evenly across heads");
    assert_eq!(layout.num_levels(), shape.levels, "level count");
    let n = locs.dims2().0;
    assert_eq!(locs.dims2().1, shape.offsets_per_query());
    assert_eq!(weights.dims2(), (n, shape.samples_per_query()));
    let dh = d / shape.heads;
    let spq = shape.samples_per_query();
    let mut out = vec![0.0; n * d];
    let vd = value.data();
    for q in 0..n {
        let lrow = &locs.data()[q * spq * 2..(q + 1) * spq * 2];
        let wrow = &weights.data()[q * spq..(q + 1) * spq];
        let orow = &mut out[q * d..(q + 1) * d];
        for s in 0..spq {
            let a = wrow[s];
            if a == 0.0 {
                continue;
            }
            let m = s / (shape.levels * shape.points);
            let level = shape.level_of(s);
            let (h, w) = layout.shapes[level];
            let base = layout.offsets[level];
            let row = lrow[2 * s + 1] * h as f64 - 0.5;
            let col = lrow[2 * s] * w as f64 - 0.5;
            let head_out = &mut orow[m * dh..(m + 1) * dh];
            for c in corners(row, col, h, w) {
                if let Some(p) = c.pixel {
                    let cw = a * c.weight;
                    let src = &vd[(base + p) * d + m * dh..(base + p) * d + (m + 1) * dh];
                    for (o, v) in head_out.iter_mut().zip(src) {
                        *o += cw * v;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, d], out)
}

/// Gradients of the fused kernel w.r.t. `(value, locs, weights)`.
pub(crate) fn deform_backward(
    value: &Tensor,
    locs: &Tensor,
    weights: &Tensor,
    layout: &LevelLayout,
    shape: DeformShape,
    dout: &Tensor,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (_, d) = value.dims2();
    let n = locs.dims2().0;
    let dh = d / shape.heads;
    let spq = shape.samples_per_query();
    let vd = value.data();
    let mut dv = vec![0.0; value.len()];
    let mut dl = vec![0.0; locs.len()];
    let mut dw = vec![0.0; weights.len()];
    for q in 0..n {
        let g = &dout.data()[q * d..(q + 1) * d];
        for s in 0..spq {
            let a = weights.data()[q * spq + s];
            let m = s / (shape.levels * shape.points);
            let level = shape.level_of(s);
            let (h, w) = layout.shapes[level];
            let base = layout.offsets[level];
            let x = locs.data()[q * spq * 2 + 2 * s];
            let y = locs.data()[q * spq * 2 + 2 * s + 1];
            let row = y * h as f64 - 0.5;
            let col = x * w as f64 - 0.5;
            let gh = &g[m * dh..(m + 1) * dh];
            let mut d_a = 0.0;
            let mut d_row = 0.0;
            let mut d_col = 0.0;
            for c in corners(row, col, h, w) {
                let Some(p) = c.pixel else { continue };
                let off = (base + p) * d + m * dh;
                let src = &vd[off..off + dh];
                let dot: f64 = gh.iter().zip(src).map(|(a, b)| a * b).sum();
                d_a += c.weight * dot;
                d_row += c.d_row * dot;
                d_col += c.d_col * dot;
                let cw = a * c.weight;
                for (dst, gg) in dv[off..off + dh].iter_mut().zip(gh) {
                    *dst += cw * gg;
                }
            }
            dw[q * spq + s] = d_a;
            dl[q * spq * 2 + 2 * s] = a * d_col * w as f64;
            dl[q * spq * 2 + 2 * s + 1] = a * d_row * h as f64;
        }
    }
    (dv, dl, dw)
}
