//! Line contrastive denoising: noised copies of ground-truth lines fed to the decoder during
//! training, grouped so that groups cannot see each other and matching queries cannot see them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LineSegment;

/// Denoising branch settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoisingConfig {
    /// Upper bound on the number of denoising queries.
    pub dn_number: usize,
    pub label_noise_ratio: f64,
    /// Half-width `s` of the length factor ranges `[1 − s, 1]` and `(1, 1 + s)`.
    pub line_scale: f64,
    /// Rotation threshold `τ` in degrees.
    pub line_rotation_deg: f64,
    pub line_scaling: bool,
    pub line_rotation: bool,
    /// Box-style noise: independent per-axis extent scaling.
    pub box_scaling: bool,
    /// Box-style noise: midpoint translation proportional to the extent.
    pub box_translation: bool,
}

impl Default for DenoisingConfig {
    fn default() -> Self {
        Self {
            dn_number: 300,
            label_noise_ratio: 0.5,
            line_scale: 1.0,
            line_rotation_deg: 7.0,
            line_scaling: true,
            line_rotation: true,
            box_scaling: false,
            box_translation: false,
        }
    }
}

impl DenoisingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.label_noise_ratio) {
            return Err(Error::config(format!("label noise ratio {} outside [0, 1]", self.label_noise_ratio)));
        }
        if !(self.line_scale > 0.0 && self.line_scale <= 1.0) {
            return Err(Error::config(format!("line scale {} outside (0, 1]", self.line_scale)));
        }
        if !(self.line_rotation_deg > 0.0 && self.line_rotation_deg < 90.0) {
            return Err(Error::config(format!("line rotation {} outside (0, 90) degrees", self.line_rotation_deg)));
        }
        Ok(())
    }

    /// DINO-style box noise (translation and per-axis scaling) instead of line noise.
    pub fn box_style() -> Self {
        Self {
            line_scaling: false,
            line_rotation: false,
            box_scaling: true,
            box_translation: true,
            ..Self::default()
        }
    }
}

/// One noised query with the noise that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoisingQuery {
    pub group: usize,
    pub gt_index: usize,
    pub positive: bool,
    /// Noised line, clamped to the unit square.
    pub anchor: LineSegment,
    /// Length factor.
    pub u: f64,
    /// Rotation about the midpoint in degrees.
    pub theta_deg: f64,
    /// Per-axis extent factors of box-style scaling.
    pub axis_scale: [f64; 2],
    /// Midpoint shift of box-style translation, in normalized units.
    pub shift: [f64; 2],
    /// Class label fed as content: `true` is line.
    pub label: bool,
    pub label_flipped: bool,
}

impl DenoisingQuery {
    /// Supervision class: positives are lines, negatives are background.
    pub fn target_is_line(&self) -> bool {
        self.positive
    }
}

/// Square mask over `[denoising groups | matching queries]`; `true` blocks attention.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMask {
    pub size: usize,
    pub n_denoising: usize,
    pub group_size: usize,
    pub blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.size + j]
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        !self.is_blocked(i, j)
    }
}

/// Everything the decoder and loss need from the denoising branch of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoisingBatch {
    pub queries: Vec<DenoisingQuery>,
    pub group_count: usize,
    /// Ground-truth lines used (after subsampling), in query order within a group.
    pub used_gt: Vec<usize>,
    pub n_match: usize,
    pub mask: AttentionMask,
}

impl DenoisingBatch {
    pub fn group_size(&self) -> usize {
        2 * self.used_gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Builds the group-structured mask; layout `[group 0 | group 1 | … | matching]`.
pub fn build_attention_mask(n_dn_per_group: usize, group_count: usize, n_match: usize) -> AttentionMask {
    let n_dn = n_dn_per_group * group_count;
    let size = n_dn + n_match;
    let mut blocked = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            blocked[i * size + j] = match (i < n_dn, j < n_dn) {
                (true, true) => i / n_dn_per_group != j / n_dn_per_group,
                (false, true) => true,
                _ => false,
            };
        }
    }
    AttentionMask {
        size,
        n_denoising: n_dn,
        group_size: n_dn_per_group,
        blocked,
    }
}

/// Open interval sample in `(lo, hi)`.
fn open<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

fn signed<R: Rng>(rng: &mut R, magnitude: f64) -> f64 {
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// Noise magnitude pair: positive inside `(0, a)`, negative inside `[a, 2a)`.
fn axis_noise<R: Rng>(rng: &mut R, a: f64, positive: bool) -> f64 {
    let m = if positive {
        rng.random_range(0.0..a)
    } else {
        rng.random_range(a..2.0 * a)
    };
    signed(rng, m)
}

fn apply_noise(gt: LineSegment, q: &DenoisingQuery) -> LineSegment {
    let mut l = gt.scale_about_midpoint(q.u).expect("length factors are non-negative");
    let (mx, my) = l.midpoint();
    let (hx, hy) = ((l.x2 - l.x1) * 0.5 * q.axis_scale[0], (l.y2 - l.y1) * 0.5 * q.axis_scale[1]);
    l = LineSegment::new(mx - hx, my - hy, mx + hx, my + hy);
    l = l.rotate_about_midpoint(q.theta_deg.to_radians());
    LineSegment::new(l.x1 + q.shift[0], l.y1 + q.shift[1], l.x2 + q.shift[0], l.y2 + q.shift[1])
}

/// The unclamped noised line a query was derived from.
pub fn noised_line(gt: LineSegment, q: &DenoisingQuery) -> LineSegment {
    apply_noise(gt, q)
}

/// Generates positive/negative query pairs for every (used) ground-truth line in each group.
///
/// A positive and its negative share one length-noise magnitude `a ∈ (0, s)`:
/// `u = 1 − a` and `u = 1 + a` respectively, so the pair differs in length by construction.
/// Labels start as "line"; see [`apply_label_noise`].
pub fn generate_denoising_batch<R: Rng>(gt: &[LineSegment], cfg: &DenoisingConfig, n_match: usize, rng: &mut R) -> DenoisingBatch {
    let n_use = gt.len().min(cfg.dn_number / 2);
    if n_use == 0 {
        return DenoisingBatch {
            queries: Vec::new(),
            group_count: 0,
            used_gt: Vec::new(),
            n_match,
            mask: build_attention_mask(0, 0, n_match),
        };
    }
    let mut used_gt: Vec<usize> = if n_use < gt.len() {
        sample(rng, gt.len(), n_use).into_vec()
    } else {
        (0..gt.len()).collect()
    };
    used_gt.sort_unstable();
    let group_count = (cfg.dn_number / (2 * n_use)).max(1);
    let tau = cfg.line_rotation_deg;
    let s = cfg.line_scale;
    let mut queries = Vec::with_capacity(group_count * 2 * n_use);
    for group in 0..group_count {
        for &gi in &used_gt {
            let a = if cfg.line_scaling { open(rng, 0.0, s) } else { 0.0 };
            let pos_theta = if cfg.line_rotation { open(rng, -tau, tau) } else { 0.0 };
            let neg_theta = if cfg.line_rotation {
                let m = rng.random_range(tau..2.0 * tau);
                signed(rng, m)
            } else {
                0.0
            };
            for positive in [true, false] {
                let axis_scale = if cfg.box_scaling {
                    [1.0 + axis_noise(rng, s, positive), 1.0 + axis_noise(rng, s, positive)]
                } else {
                    [1.0, 1.0]
                };
                let mut q = DenoisingQuery {
                    group,
                    gt_index: gi,
                    positive,
                    anchor: gt[gi],
                    u: if positive { 1.0 - a } else { 1.0 + a },
                    theta_deg: if positive { pos_theta } else { neg_theta },
                    axis_scale: axis_scale.map(f64::abs),
                    shift: [0.0, 0.0],
                    label: true,
                    label_flipped: false,
                };
                if cfg.box_translation {
                    let l = gt[gi];
                    let (hx, hy) = ((l.x2 - l.x1).abs() * 0.5, (l.y2 - l.y1).abs() * 0.5);
                    q.shift = [axis_noise(rng, s, positive) * hx, axis_noise(rng, s, positive) * hy];
                }
                q.anchor = apply_noise(gt[gi], &q).clamp_unit();
                queries.push(q);
            }
        }
    }
    DenoisingBatch {
        mask: build_attention_mask(2 * n_use, group_count, n_match),
        queries,
        group_count,
        used_gt,
        n_match,
    }
}

/// Flips each query's class label independently with probability `ratio`.
pub fn apply_label_noise<R: Rng>(mut batch: DenoisingBatch, ratio: f64, rng: &mut R) -> DenoisingBatch {
    let ratio = ratio.clamp(0.0, 1.0);
    for q in &mut batch.queries {
        if rng.random_bool(ratio) {
            q.label = !q.label;
            q.label_flipped = !q.label_flipped;
        }
    }
    batch
}

/// Generation followed by label noise from a fresh ChaCha8 stream seeded with `seed`.
pub fn seeded_denoising_batch(gt: &[LineSegment], cfg: &DenoisingConfig, n_match: usize, seed: u64) -> DenoisingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = generate_denoising_batch(gt, cfg, n_match, &mut rng);
    apply_label_noise(b, cfg.label_noise_ratio, &mut rng)
}
