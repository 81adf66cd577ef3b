//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the inputs it
//! was computed from. [`Graph::backward`] walks the nodes in reverse order and
//! accumulates gradients. Shape errors inside the tape are programming errors
//! and panic; public entry points that take user data validate beforehand.

use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, softmax_slice, Tensor};
use crate::attention::sampling::{self, DeformShape};
use crate::pyramid::LevelLayout;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How predicted sampling offsets are scaled into normalized image coordinates.
#[derive(Clone, Debug)]
pub enum LocScale {
    /// One `(sx, sy)` per level; offsets are in level-index units when `s = 1 / size`.
    PerLevel(Arc<Vec<(f64, f64)>>),
    /// One `(sx, sy)` per query, shared by all levels.
    PerQuery(Var),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Logit(Var, f64),
    Abs(Var),
    /// Elementwise function with its recorded local derivative.
    Map(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    GatherRows(Var, Arc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    SampleLocs {
        refs: Var,
        offsets: Var,
        scale: LocScale,
        shape: DeformShape,
    },
    DeformSample {
        value: Var,
        locs: Var,
        weights: Var,
        layout: Arc<LevelLayout>,
        shape: DeformShape,
    },
    Focal {
        p: Var,
        positive: Arc<Vec<bool>>,
        params: FocalParams,
    },
}

/// Constants of the label-conditional focal loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    pub gamma: f64,
    pub clamp: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha_pos: 1.0,
            alpha_neg: 0.25,
            gamma: 2.0,
            clamp: 1e-8,
        }
    }
}

impl FocalParams {
    /// Loss and derivative w.r.t. the (unclamped) probability.
    pub fn eval(&self, p: f64, positive: bool) -> (f64, f64) {
        let lo = self.clamp;
        let hi = 1.0 - self.clamp;
        let inside = p > lo && p < hi;
        let q = p.clamp(lo, hi);
        let g = self.gamma;
        if positive {
            let one_m = 1.0 - q;
            let loss = -self.alpha_pos * one_m.powf(g) * q.ln();
            let d = self.alpha_pos * (g * one_m.powf(g - 1.0) * q.ln() - one_m.powf(g) / q);
            (loss, if inside { d } else { 0.0 })
        } else {
            let one_m = 1.0 - q;
            let loss = -self.alpha_neg * q.powf(g) * one_m.ln();
            let d = self.alpha_neg * (-g * q.powf(g - 1.0) * one_m.ln() + q.powf(g) / one_m);
            (loss, if inside { d } else { 0.0 })
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    oh: usize,
    ow: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ksize: usize,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Build a fresh graph for every forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Copies the current parameter value into the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2();
        assert_eq!(tb.rank(), 2, "matmul rhs must be a matrix");
        assert_eq!(tb.shape()[0], k, "matmul inner dimension");
        let m = tb.shape()[1];
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2();
        let (m, kb) = tb.dims2();
        assert_eq!(k, kb, "matmul_bt inner dimension");
        let mut out = vec![0.0; n * m];
        matmul_bt_into(ta.data(), tb.data(), &mut out, n, k, m);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("add shape");
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b)).expect("sub shape");
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_with(self.value(b), |x, y| x * y)
            .expect("mul shape");
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`m` vector to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(row);
        let (_, m) = ta.dims2();
        assert_eq!(tb.len(), m, "add_row width");
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(m) {
            for (o, b) in chunk.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// `ln(x / (1 - x))` with `x` clamped to `[eps, 1 - eps]`.
    pub fn logit(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).map(|x| logit(x, eps));
        self.push(out, Op::Logit(a, eps), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    /// Elementwise `f(index, x) -> (value, derivative)`.
    pub fn map(&mut self, a: Var, f: impl Fn(usize, f64) -> (f64, f64)) -> Var {
        let x = self.value(a);
        let mut vals = Vec::with_capacity(x.len());
        let mut ders = Vec::with_capacity(x.len());
        for (i, &v) in x.data().iter().enumerate() {
            let (y, dy) = f(i, v);
            vals.push(y);
            ders.push(dy);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), vals);
        self.push(out, Op::Map(a, ders), &[a])
    }

    /// Row-wise softmax over the last axis. `mask[i * m + j] == true` blocks entry `(i, j)`.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Arc<Vec<bool>>>) -> Var {
        let ta = self.value(a);
        let (n, m) = ta.dims2();
        if let Some(mask) = &mask {
            assert_eq!(mask.len(), n * m, "softmax mask shape");
        }
        let mut out = ta.data().to_vec();
        for (i, row) in out.chunks_mut(m).enumerate() {
            match &mask {
                None => softmax_slice(row),
                Some(mask) => masked_softmax_slice(row, &mask[i * m..(i + 1) * m]),
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), &[a])
    }

    /// Layer normalisation over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (n, m) = tx.dims2();
        let (tg, tb) = (self.value(gain), self.value(bias));
        assert_eq!(tg.len(), m);
        assert_eq!(tb.len(), m);
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Square-kernel convolution over an `H × W × C` image with zero padding.
    /// `w` is `[ksize·ksize·cin, cout]` in `(ky, kx, c)` row order.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, ksize: usize, stride: usize, pad: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3, "conv2d input must be H×W×C");
        let (h, wd, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let tw = self.value(w);
        assert_eq!(tw.shape()[0], ksize * ksize * cin, "conv2d kernel rows");
        let cout = tw.shape()[1];
        let oh = (h + 2 * pad - ksize) / stride + 1;
        let ow = (wd + 2 * pad - ksize) / stride + 1;
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            oh,
            ow,
            cout,
            stride,
            pad,
            ksize,
        };
        let kk = ksize * ksize * cin;
        let mut cols = vec![0.0; oh * ow * kk];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * kk;
                for ky in 0..ksize {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..ksize {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let src = (iy as usize * wd + ix as usize) * cin;
                        let dst = base + (ky * ksize + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&tx.data()[src..src + cin]);
                    }
                }
            }
        }
        let mut out = vec![0.0; oh * ow * cout];
        matmul_into(&cols, tw.data(), &mut out, oh * ow, kk, cout);
        let tb = self.value(b);
        for row in out.chunks_mut(cout) {
            for (o, bb) in row.iter_mut().zip(tb.data()) {
                *o += bb;
            }
        }
        self.push(
            Tensor::from_parts(vec![oh, ow, cout], out),
            Op::Conv2d {
                x,
                w,
                b,
                cols,
                geom,
            },
            &[x, w, b],
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let ta = self.value(a);
        let (n, m) = ta.dims2();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in &idx {
            assert!(i < n, "gather index {i} out of range {n}");
            out.extend_from_slice(ta.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), m], out);
        self.push(t, Op::GatherRows(a, Arc::new(idx)), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.dims2().1, m, "concat_rows width");
            n += t.dims2().0;
            out.extend_from_slice(t.data());
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ta = self.value(a);
        let (n, m) = ta.dims2();
        assert!(start < end && end <= m, "slice_cols range");
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&ta.row(i)[start..end]);
        }
        self.push(Tensor::from_parts(vec![n, w], out), Op::SliceCols(a, start, end), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        let m: usize = widths.iter().sum();
        let mut out = vec![0.0; n * m];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.dims2().0, n, "concat_cols height");
            for i in 0..n {
                out[i * m + off..i * m + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape size");
        self.push(t, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Sampling locations `ref + offset · scale` in normalized `(x, y)` coordinates.
    ///
    /// `refs` is `[N, 2]`, `offsets` is `[N, heads·levels·points·2]`; the output has the
    /// shape of `offsets`.
    pub fn sample_locations(&mut self, refs: Var, offsets: Var, scale: LocScale, shape: DeformShape) -> Var {
        let tr = self.value(refs);
        let to = self.value(offsets);
        let n = tr.dims2().0;
        assert_eq!(tr.dims2().1, 2);
        assert_eq!(to.dims2(), (n, shape.offsets_per_query()));
        let mut out = to.data().to_vec();
        let per = shape.offsets_per_query();
        for q in 0..n {
            for (idx, o) in out[q * per..(q + 1) * per].iter_mut().enumerate() {
                let axis = idx % 2;
                let level = shape.level_of(idx / 2);
                let s = match &scale {
                    LocScale::PerLevel(s) => pick(s[level], axis),
                    LocScale::PerQuery(v) => self.nodes[v.0].value.data()[q * 2 + axis],
                };
                *o = tr.data()[q * 2 + axis] + *o * s;
            }
        }
        let mut inputs = vec![refs, offsets];
        if let LocScale::PerQuery(v) = &scale {
            assert_eq!(self.value(*v).dims2(), (n, 2));
            inputs.push(*v);
        }
        let t = Tensor::from_parts(vec![n, per], out);
        self.push(
            t,
            Op::SampleLocs {
                refs,
                offsets,
                scale,
                shape,
            },
            &inputs,
        )
    }

    /// Multi-scale deformable sampling: for every query and head, the attention-weighted
    /// sum of bilinear samples of `value` at `locs`.
    pub fn deform_sample(
        &mut self,
        value: Var,
        locs: Var,
        weights: Var,
        layout: Arc<LevelLayout>,
        shape: DeformShape,
    ) -> Var {
        let out = sampling::deform_forward(
            self.value(value),
            self.value(locs),
            self.value(weights),
            &layout,
            shape,
        );
        self.push(
            out,
            Op::DeformSample {
                value,
                locs,
                weights,
                layout,
                shape,
            },
            &[value, locs, weights],
        )
    }

    /// Element-wise label-conditional focal loss of probabilities `p`.
    pub fn focal(&mut self, p: Var, positive: Vec<bool>, params: FocalParams) -> Var {
        let tp = self.value(p);
        assert_eq!(tp.len(), positive.len());
        let out = tp
            .data()
            .iter()
            .zip(&positive)
            .map(|(&x, &pos)| params.eval(x, pos).0)
            .collect();
        let t = Tensor::from_parts(tp.shape().to_vec(), out);
        self.push(
            t,
            Op::Focal {
                p,
                positive: Arc::new(positive),
                params,
            },
            &[p],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) {
        let grads = self.backward(loss);
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k) = ta.dims2();
                let m = tb.shape()[1];
                if wants(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_bt_into(dy.data(), tb.data(), &mut da, n, m, k);
                    accumulate(grads, *a, ta.shape(), da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * m];
                    matmul_at_into(ta.data(), dy.data(), &mut db, n, k, m);
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k) = ta.dims2();
                let m = tb.dims2().0;
                if wants(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_into(dy.data(), tb.data(), &mut da, n, m, k);
                    accumulate(grads, *a, ta.shape(), da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; m * k];
                    matmul_at_into(dy.data(), ta.data(), &mut db, n, m, k);
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.shape(), dy.data().to_vec());
                accumulate(grads, *b, dy.shape(), dy.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, dy.shape(), dy.data().to_vec());
                accumulate(grads, *b, dy.shape(), dy.data().iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let da = dy.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db = dy.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, ta.shape(), da);
                accumulate(grads, *b, tb.shape(), db);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, dy.shape(), dy.data().to_vec());
                if wants(*row) {
                    let tr = val(*row);
                    let m = tr.len();
                    let mut dr = vec![0.0; m];
                    for chunk in dy.data().chunks(m) {
                        for (d, g) in dr.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *row, tr.shape(), dr);
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, dy.shape(), dy.data().iter().map(|g| g * c).collect());
            }
            Op::Relu(a) => {
                let ta = val(*a);
                let d = dy
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, ta.shape(), d);
            }
            Op::Sigmoid(a) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(grads, *a, dy.shape(), d);
            }
            Op::Logit(a, eps) => {
                let ta = val(*a);
                let d = dy
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| {
                        if x > *eps && x < 1.0 - eps {
                            g / (x * (1.0 - x))
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *a, ta.shape(), d);
            }
            Op::Abs(a) => {
                let ta = val(*a);
                let d = dy
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(g, x)| g * x.signum() * if *x == 0.0 { 0.0 } else { 1.0 })
                    .collect();
                accumulate(grads, *a, ta.shape(), d);
            }
            Op::Map(a, ders) => {
                let d = dy.data().iter().zip(ders).map(|(g, k)| g * k).collect();
                accumulate(grads, *a, node.value.shape(), d);
            }
            Op::Softmax(a) => {
                let (_, m) = node.value.dims2();
                let mut d = vec![0.0; dy.len()];
                for ((drow, grow), yrow) in d
                    .chunks_mut(m)
                    .zip(dy.data().chunks(m))
                    .zip(node.value.data().chunks(m))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *o = y * (g - dot);
                    }
                }
                accumulate(grads, *a, dy.shape(), d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let m = dy.dims2().1;
                let tg = val(*gain);
                if wants(*gain) || wants(*bias) {
                    let mut dg = vec![0.0; m];
                    let mut db = vec![0.0; m];
                    for (grow, hrow) in dy.data().chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    accumulate(grads, *gain, tg.shape(), dg);
                    accumulate(grads, *bias, val(*bias).shape(), db);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    let mf = m as f64;
                    for (i, ((drow, grow), hrow)) in dx
                        .chunks_mut(m)
                        .zip(dy.data().chunks(m))
                        .zip(xhat.chunks(m))
                        .enumerate()
                    {
                        let dh: Vec<f64> = grow.iter().zip(tg.data()).map(|(g, w)| g * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / mf;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / mf;
                        for j in 0..m {
                            drow[j] = inv_std[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, dy.shape(), dx);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                cols,
                geom,
            } => {
                let g = *geom;
                let kk = g.ksize * g.ksize * g.cin;
                let rows = g.oh * g.ow;
                if wants(*w) {
                    let mut dw = vec![0.0; kk * g.cout];
                    matmul_at_into(cols, dy.data(), &mut dw, rows, kk, g.cout);
                    accumulate(grads, *w, val(*w).shape(), dw);
                }
                if wants(*b) {
                    let mut db = vec![0.0; g.cout];
                    for row in dy.data().chunks(g.cout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, val(*b).shape(), db);
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; rows * kk];
                    matmul_bt_into(dy.data(), val(*w).data(), &mut dcols, rows, g.cout, kk);
                    let mut dx = vec![0.0; g.h * g.w * g.cin];
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let base = (oy * g.ow + ox) * kk;
                            for ky in 0..g.ksize {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for kx in 0..g.ksize {
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if ix < 0 || ix >= g.w as isize {
                                        continue;
                                    }
                                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                                    let src = base + (ky * g.ksize + kx) * g.cin;
                                    for c in 0..g.cin {
                                        dx[dst + c] += dcols[src + c];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, val(*x).shape(), dx);
                }
            }
            Op::GatherRows(a, idx) => {
                let ta = val(*a);
                let (_, m) = ta.dims2();
                let mut d = vec![0.0; ta.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..m {
                        d[i * m + j] += dy.data()[k * m + j];
                    }
                }
                accumulate(grads, *a, ta.shape(), d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = val(p);
                    let len = t.len();
                    if wants(p) {
                        accumulate(grads, p, t.shape(), dy.data()[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start, end) => {
                let ta = val(*a);
                let (n, m) = ta.dims2();
                let w = end - start;
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    d[i * m + start..i * m + end].copy_from_slice(&dy.data()[i * w..(i + 1) * w]);
                }
                accumulate(grads, *a, ta.shape(), d);
            }
            Op::ConcatCols(parts) => {
                let (n, m) = dy.dims2();
                let mut off = 0;
                for &p in parts {
                    let t = val(p);
                    let w = t.dims2().1;
                    if wants(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&dy.data()[i * m + off..i * m + off + w]);
                        }
                        accumulate(grads, p, t.shape(), d);
                    }
                    off += w;
                }
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, val(*a).shape(), dy.data().to_vec());
            }
            Op::Sum(a) => {
                let ta = val(*a);
                accumulate(grads, *a, ta.shape(), vec![dy.data()[0]; ta.len()]);
            }
            Op::SampleLocs {
                refs,
                offsets,
                scale,
                shape,
            } => {
                let per = shape.offsets_per_query();
                let n = dy.dims2().0;
                let to = val(*offsets);
                let mut dref = vec![0.0; n * 2];
                let mut doff = vec![0.0; n * per];
                let mut dscale = match scale {
                    LocScale::PerQuery(_) => Some(vec![0.0; n * 2]),
                    LocScale::PerLevel(_) => None,
                };
                for q in 0..n {
                    for idx in 0..per {
                        let axis = idx % 2;
                        let level = shape.level_of(idx / 2);
                        let g = dy.data()[q * per + idx];
                        let s = match scale {
                            LocScale::PerLevel(s) => pick(s[level], axis),
                            LocScale::PerQuery(v) => val(*v).data()[q * 2 + axis],
                        };
                        dref[q * 2 + axis] += g;
                        doff[q * per + idx] = g * s;
                        if let Some(ds) = dscale.as_mut() {
                            ds[q * 2 + axis] += g * to.data()[q * per + idx];
                        }
                    }
                }
                if wants(*refs) {
                    accumulate(grads, *refs, val(*refs).shape(), dref);
                }
                if wants(*offsets) {
                    accumulate(grads, *offsets, to.shape(), doff);
                }
                if let (LocScale::PerQuery(v), Some(ds)) = (scale, dscale) {
                    if wants(*v) {
                        accumulate(grads, *v, val(*v).shape(), ds);
                    }
                }
            }
            Op::DeformSample {
                value,
                locs,
                weights,
                layout,
                shape,
            } => {
                let (dv, dl, dw) = sampling::deform_backward(
                    val(*value),
                    val(*locs),
                    val(*weights),
                    layout,
                    *shape,
                    dy,
                );
                if wants(*value) {
                    accumulate(grads, *value, val(*value).shape(), dv);
                }
                if wants(*locs) {
                    accumulate(grads, *locs, val(*locs).shape(), dl);
                }
                if wants(*weights) {
                    accumulate(grads, *weights, val(*weights).shape(), dw);
                }
            }
            Op::Focal {
                p,
                positive,
                params,
            } => {
                let tp = val(*p);
                let d = tp
                    .data()
                    .iter()
                    .zip(positive.iter())
                    .zip(dy.data())
                    .map(|((&x, &pos), g)| g * params.eval(x, pos).1)
                    .collect();
                accumulate(grads, *p, tp.shape(), d);
            }
        }
    }
}

fn pick(pair: (f64, f64), axis: usize) -> f64 {
    if axis == 0 {
        pair.0
    } else {
        pair.1
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), data)),
    }
}

pub(crate) fn masked_softmax_slice(row: &mut [f64], blocked: &[bool]) {
    let max = row
        .iter()
        .zip(blocked)
        .filter(|(_, &b)| !b)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (x, &b) in row.iter_mut().zip(blocked) {
        *x = if b { 0.0 } else { (*x - max).exp() };
        sum += *x;
    }
    if sum > 0.0 {
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(x: f64, eps: f64) -> f64 {
    let x = x.clamp(eps, 1.0 - eps);
    (x / (1.0 - x)).ln()
}
