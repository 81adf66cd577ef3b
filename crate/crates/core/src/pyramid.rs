//! Toy hierarchical backbone and the feature pre-processing that turns a pyramid
//! into one flattened token sequence.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numeric::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub const PE_TEMPERATURE: f64 = 10000.0;

/// Grayscale or RGB image with values in `[0, 1]`, stored as `H × W × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub data: Tensor,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::arg(format!("images have 1 or 3 channels, got {channels}")));
        }
        Ok(Self {
            data: Tensor::new(vec![height, width, channels], data)?,
        })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Backbone output: `(level index, H_l × W_l × C_l)` pairs in increasing level order.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<(usize, Tensor)>,
}

/// Shapes and token offsets of the levels stacked into a flattened memory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelLayout {
    pub levels: Vec<usize>,
    pub shapes: Vec<(usize, usize)>,
    pub offsets: Vec<usize>,
}

impl LevelLayout {
    pub fn new(levels: Vec<usize>, shapes: Vec<(usize, usize)>) -> Self {
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for &(h, w) in &shapes {
            offsets.push(acc);
            acc += h * w;
        }
        Self {
            levels,
            shapes,
            offsets,
        }
    }

    /// A layout with the given shapes and level indices `0..n`.
    pub fn from_shapes(shapes: Vec<(usize, usize)>) -> Self {
        let levels = (0..shapes.len()).collect();
        Self::new(levels, shapes)
    }

    pub fn num_levels(&self) -> usize {
        self.shapes.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }

    /// `(level position, row, col)` of token `t`.
    pub fn locate(&self, t: usize) -> (usize, usize, usize) {
        let pos = self.offsets.partition_point(|&o| o <= t) - 1;
        let (_, w) = self.shapes[pos];
        let local = t - self.offsets[pos];
        (pos, local / w, local % w)
    }

    /// Normalized `(x, y)` of the pixel center of token `t`.
    pub fn reference_point(&self, t: usize) -> (f64, f64) {
        let (pos, i, j) = self.locate(t);
        let (h, w) = self.shapes[pos];
        ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)
    }

    pub fn reference_points(&self) -> Tensor {
        let n = self.total_tokens();
        let mut data = Vec::with_capacity(n * 2);
        for t in 0..n {
            let (x, y) = self.reference_point(t);
            data.push(x);
            data.push(y);
        }
        Tensor::from_parts(vec![n, 2], data)
    }
}

/// Stacked encoder tokens `[L, d]` together with the level bookkeeping.
#[derive(Clone, Debug)]
pub struct FlattenedMemory {
    pub tokens: Tensor,
    pub layout: Arc<LevelLayout>,
}

impl FlattenedMemory {
    /// The `H_l × W_l × d` view of level position `pos`.
    pub fn level(&self, pos: usize) -> Tensor {
        let (h, w) = self.layout.shapes[pos];
        let d = self.tokens.dims2().1;
        let start = self.layout.offsets[pos] * d;
        let data = self.tokens.data()[start..start + h * w * d].to_vec();
        Tensor::from_parts(vec![h, w, d], data)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Retained pyramid levels, ascending, each in `1..=5`.
    pub levels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            levels: vec![2, 3, 4, 5],
        }
    }
}

impl BackboneConfig {
    pub fn max_level(&self) -> usize {
        self.levels.iter().copied().max().unwrap_or(0)
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("at least one pyramid level is required"));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("pyramid levels must be strictly ascending"));
        }
        if self.levels.iter().any(|&l| !(1..=5).contains(&l)) {
            return Err(Error::config("pyramid levels must lie in 1..=5"));
        }
        if self.base_channels == 0 || (self.in_channels != 1 && self.in_channels != 3) {
            return Err(Error::config("bad backbone channel configuration"));
        }
        Ok(())
    }

    /// `(H_l, W_l)` for every retained level of an `h × w` input.
    pub fn level_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let div = 1usize << (self.max_level() + 1);
        if !h.is_multiple_of(div) || !w.is_multiple_of(div) || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "image {h}x{w} is not divisible by {div} (deepest level {})",
                self.max_level()
            )));
        }
        Ok(self
            .levels
            .iter()
            .map(|&l| (h >> (l + 1), w >> (l + 1)))
            .collect())
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

/// Stride-2 3×3 convolutions with ReLU: a stem to `H/2`, then one stage per level.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    pub config: BackboneConfig,
    stem: Conv,
    stages: Vec<Conv>,
}

impl ToyBackbone {
    pub fn new<R: Rng>(store: &mut ParamStore, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut conv = |name: String, cin: usize, cout: usize| {
            let fan_in = 9 * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = store.add_uniform(format!("{name}.weight"), ParamGroup::Backbone, &[fan_in, cout], bound, rng);
            let b = store.add(format!("{name}.bias"), ParamGroup::Backbone, Tensor::zeros(&[cout]));
            Conv { w, b }
        };
        let stem = conv("backbone.stem".into(), config.in_channels, config.base_channels);
        let mut stages = Vec::new();
        let mut cin = config.base_channels;
        for level in 1..=config.max_level() {
            let cout = config.channels_at(level);
            stages.push(conv(format!("backbone.level{level}"), cin, cout));
            cin = cout;
        }
        Ok(Self {
            config,
            stem,
            stages,
        })
    }

    /// Pyramid levels as tape variables, in retained-level order.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &ImageTensor) -> Result<Vec<(usize, Var)>> {
        self.config.level_shapes(image.height(), image.width())?;
        if image.channels() != self.config.in_channels {
            return Err(Error::arg(format!(
                "backbone expects {} channels, image has {}",
                self.config.in_channels,
                image.channels()
            )));
        }
        let x = g.constant(image.data.clone());
        let mut h = self.conv(g, store, &self.stem, x);
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let level = i + 1;
            h = self.conv(g, store, stage, h);
            if self.config.levels.contains(&level) {
                out.push((level, h));
            }
        }
        Ok(out)
    }

    fn conv(&self, g: &mut Graph, store: &ParamStore, c: &Conv, x: Var) -> Var {
        let w = g.param(store, c.w);
        let b = g.param(store, c.b);
        let y = g.conv2d(x, w, b, 3, 2, 1);
        g.relu(y)
    }
}

/// Runs the backbone without recording gradients.
pub fn toy_backbone_forward(backbone: &ToyBackbone, store: &ParamStore, image: &ImageTensor) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let levels = backbone.forward(&mut g, store, image)?;
    Ok(FeaturePyramid {
        levels: levels.into_iter().map(|(l, v)| (l, g.value(v).clone())).collect(),
    })
}

/// Per-level 1×1 convolutions to a common channel count.
#[derive(Clone, Debug)]
pub struct LevelProjection {
    pub d: usize,
    pub maps: Vec<Linear>,
}

impl LevelProjection {
    pub fn new<R: Rng>(store: &mut ParamStore, backbone: &BackboneConfig, d: usize, rng: &mut R) -> Self {
        let maps = backbone
            .levels
            .iter()
            .map(|&l| {
                Linear::new(
                    store,
                    &format!("input_proj.level{l}"),
                    ParamGroup::Transformer,
                    backbone.channels_at(l),
                    d,
                    rng,
                )
            })
            .collect();
        Self { d, maps }
    }

    /// Projects each `H_l × W_l × C_l` level to `[H_l·W_l, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, levels: &[(usize, Var)]) -> Vec<Var> {
        levels
            .iter()
            .zip(&self.maps)
            .map(|(&(_, v), map)| {
                let s = g.shape(v).to_vec();
                let flat = g.reshape(v, vec![s[0] * s[1], s[2]]);
                map.forward(g, store, flat)
            })
            .collect()
    }
}

/// Applies the 1×1 projections to a pyramid without recording gradients.
pub fn project_levels(p: &FeaturePyramid, proj: &LevelProjection, store: &ParamStore) -> Result<FeaturePyramid> {
    if p.levels.len() != proj.maps.len() {
        return Err(Error::arg("pyramid and projection level counts differ"));
    }
    let mut out = Vec::new();
    for ((l, t), map) in p.levels.iter().zip(&proj.maps) {
        if t.rank() != 3 || t.shape()[2] != map.d_in {
            return Err(Error::arg(format!("level {l} has shape {:?}, projection expects {} channels", t.shape(), map.d_in)));
        }
        let (h, w) = (t.shape()[0], t.shape()[1]);
        let flat = t.clone().reshape(vec![h * w, map.d_in])?;
        let y = crate::numeric::linear_forward(&flat, store.get(map.w), store.get(map.b))?;
        out.push((*l, y.reshape(vec![h, w, map.d_out])?));
    }
    Ok(FeaturePyramid { levels: out })
}

/// 2D sinusoidal position encoding `[H, W, d]`.
///
/// Channels `[0, d/2)` encode the row and `[d/2, d)` the column. Within each half, channel
/// `2m` is `sin(pos / T^(2m/(d/2)))` and `2m + 1` the matching cosine, with positions
/// `2π·i/H` (resp. `2π·j/W`) and `T = 10000`.
pub fn sine_pos_enc(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::config(format!("position encoding width must be a positive multiple of 4, got {d}")));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|c| PE_TEMPERATURE.powf((2 * (c / 2)) as f64 / half as f64))
        .collect();
    let mut data = vec![0.0; h * w * d];
    for i in 0..h {
        let py = TAU * i as f64 / h as f64;
        for j in 0..w {
            let px = TAU * j as f64 / w as f64;
            let base = (i * w + j) * d;
            for c in 0..half {
                let (fy, fx) = (py / freqs[c], px / freqs[c]);
                let (vy, vx) = if c % 2 == 0 { (fy.sin(), fx.sin()) } else { (fy.cos(), fx.cos()) };
                data[base + c] = vy;
                data[base + half + c] = vx;
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, d], data))
}

/// Position encodings for every level of a layout, stacked as `[L, d]`.
pub fn stacked_pos_enc(layout: &LevelLayout, d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(layout.total_tokens() * d);
    for &(h, w) in &layout.shapes {
        data.extend(sine_pos_enc(h, w, d)?.into_data());
    }
    Ok(Tensor::from_parts(vec![layout.total_tokens(), d], data))
}

/// Flattens `f'_l + PE_l` for every level and stacks them in level order.
pub fn flatten_and_stack(p: &FeaturePyramid, pe: &[Tensor]) -> Result<FlattenedMemory> {
    if p.levels.is_empty() || p.levels.len() != pe.len() {
        return Err(Error::arg("need one position encoding per level"));
    }
    let d = p.levels[0].1.shape().last().copied().unwrap_or(0);
    let mut shapes = Vec::new();
    let mut data = Vec::new();
    for ((_, f), e) in p.levels.iter().zip(pe) {
        if f.rank() != 3 || f.shape()[2] != d {
            return Err(Error::arg(format!("level shape {:?} does not have {d} channels", f.shape())));
        }
        if e.shape() != f.shape() {
            return Err(Error::arg(format!("encoding {:?} does not match level {:?}", e.shape(), f.shape())));
        }
        shapes.push((f.shape()[0], f.shape()[1]));
        data.extend(f.data().iter().zip(e.data()).map(|(a, b)| a + b));
    }
    let layout = LevelLayout::new(p.levels.iter().map(|(l, _)| *l).collect(), shapes);
    let n = layout.total_tokens();
    Ok(FlattenedMemory {
        tokens: Tensor::from_parts(vec![n, d], data),
        layout: Arc::new(layout),
    })
}
