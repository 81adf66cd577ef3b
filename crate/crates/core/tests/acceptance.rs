//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.
//!
//! Run with `cargo test -p dtlsd-core --test acceptance` (release-grade optimization is enabled
//! for the test profile). Set `DTLSD_ACCEPTANCE_ONLY=1,4,7` to run a subset.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use dtlsd::attention::{
    complexity_probe, global_attention, ms_deform_attn_detailed, DeformShape, Mechanism, MsDeformAttn, OffsetInit,
    ReferencePoint,
};
use dtlsd::harness::{
    evaluate_with, image_loss, synth_generate, synth_generate_with, LossLogEntry, Sample, SynthConfig, TrainConfig,
    Trainer,
};
use dtlsd::lcdn::{build_attention_mask, generate_denoising_batch, noised_line, seeded_denoising_batch, DenoisingConfig};
use dtlsd::matching::{focal_loss, hungarian_assign, line_l1_loss, total_loss, CostMatrix, LossWeights, Prediction};
use dtlsd::metrics::{structural_ap, Detection, ImageResult, STRUCTURAL_SCALE};
use dtlsd::numeric::{grad_check, GradCheckConfig, Graph, ParamStore, Tensor};
use dtlsd::pyramid::{FlattenedMemory, LevelLayout};
use dtlsd::transformer::DtLsd;
use dtlsd::LineSegment;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ATTN_SUM_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const LOSS_TOL: f64 = 1e-6;
const GLOBAL_SLOPE: (f64, f64) = (1.8, 2.3);
const DEFORM_SLOPE: (f64, f64) = (0.8, 1.3);
const LOSS_RATIO_MAX: f64 = 0.3;
const SAP10_MIN: f64 = 0.5;
const TRAIN_STEPS: usize = 2000;
const ABLATION_STEPS: usize = 1000;
const HELD_OUT: usize = 100;

type Criterion = (usize, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("DTLSD_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [Criterion; 11] = [
        (1, "attention weights sum to one", c1_weight_normalization),
        (2, "attention matches nested-loop oracles", c2_attention_oracles),
        (3, "full-loss gradient check", c3_gradient_check),
        (4, "Hungarian equals brute force", c4_hungarian),
        (5, "denoising ranges and mask predicate", c5_lcdn),
        (6, "loss unit values", c6_loss_values),
        (7, "structural AP oracle and monotonicity", c7_metrics),
        (8, "attention complexity slopes", c8_complexity),
        (9, "toy learning run", c9_learning),
        (10, "denoising ablation at step 1000", c10_ablation),
        (11, "denoising branch leaves predictions unchanged", c11_training_only),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "[{}] {id:>2}. {name}: {} ({secs:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------------------------
// Attention

struct AttnCase {
    attn: MsDeformAttn,
    store: ParamStore,
    memory: FlattenedMemory,
    z: Tensor,
    refs: Vec<ReferencePoint>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).unwrap()
}

fn random_attn_case(rng: &mut ChaCha8Rng, max_levels: usize, max_points: usize, max_d: usize) -> AttnCase {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let per_head = rng.random_range(1..=(max_d / heads).max(1));
    let d = heads * per_head;
    let levels = rng.random_range(1..=max_levels);
    let points = rng.random_range(1..=max_points);
    let shape = DeformShape { heads, levels, points };
    let mut store = ParamStore::new();
    let attn = MsDeformAttn::new(&mut store, "a", d, shape, OffsetInit::Random, rng).unwrap();
    // Offsets of a few cells so samples fall inside, across and outside the maps.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let scale = if store.name(id).contains("sampling_offsets") { 3.0 } else { 1.0 };
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0) * scale;
        }
    }
    let shapes: Vec<(usize, usize)> = (0..levels).map(|_| (rng.random_range(1..=6), rng.random_range(1..=6))).collect();
    let layout = LevelLayout::new((1..=levels).collect(), shapes);
    let tokens = random_tensor(rng, &[layout.total_tokens(), d], 1.0);
    let n = rng.random_range(1..=4);
    let z = random_tensor(rng, &[n, d], 1.0);
    let refs = (0..n)
        .map(|_| ReferencePoint::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
        .collect();
    AttnCase {
        attn,
        store,
        memory: FlattenedMemory {
            tokens,
            layout: Arc::new(layout),
        },
        z,
        refs,
    }
}

fn c1_weight_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for _ in 0..1000 {
        let c = random_attn_case(&mut rng, 4, 4, 16);
        let (_, w, _) = ms_deform_attn_detailed(&c.z, &c.refs, &c.memory, &c.attn, &c.store).unwrap();
        let per = c.attn.shape.levels * c.attn.shape.points;
        for q in 0..c.z.shape()[0] {
            for m in 0..c.attn.shape.heads {
                let s: f64 = w.row(q)[m * per..(m + 1) * per].iter().sum();
                worst = worst.max((s - 1.0).abs());
                rows += 1;
            }
        }
    }
    outcome(worst <= ATTN_SUM_TOL, format!("max |Σ A − 1| = {worst:.2e} over {rows} query-heads, tol {ATTN_SUM_TOL:e}"))
}

fn linear(x: &[f64], store: &ParamStore, w: dtlsd::numeric::ParamId, b: dtlsd::numeric::ParamId) -> Vec<f64> {
    let (w, b) = (store.value(w), store.value(b));
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|o| b.data()[o] + (0..din).map(|i| x[i] * w.data()[i * dout + o]).sum::<f64>())
        .collect()
}

/// Multi-scale deformable attention written as plain nested loops over queries, heads, levels
/// and points, with bilinear interpolation over the four neighbouring cells.
fn deform_oracle(c: &AttnCase) -> Vec<f64> {
    let sh = c.attn.shape;
    let d = c.attn.d;
    let dh = d / sh.heads;
    let layout = &c.memory.layout;
    let values: Vec<Vec<f64>> = (0..layout.total_tokens())
        .map(|t| linear(c.memory.tokens.row(t), &c.store, c.attn.value_proj.w, c.attn.value_proj.b))
        .collect();
    let mut out = Vec::new();
    for (q, p) in c.refs.iter().enumerate() {
        let z = c.z.row(q);
        let off = linear(z, &c.store, c.attn.offset_proj.w, c.attn.offset_proj.b);
        let logits = linear(z, &c.store, c.attn.weight_proj.w, c.attn.weight_proj.b);
        let mut head_out = vec![0.0; d];
        for m in 0..sh.heads {
            let idx = |l: usize, k: usize| (m * sh.levels + l) * sh.points + k;
            let mut mx = f64::NEG_INFINITY;
            for l in 0..sh.levels {
                for k in 0..sh.points {
                    mx = mx.max(logits[idx(l, k)]);
                }
            }
            let mut denom = 0.0;
            for l in 0..sh.levels {
                for k in 0..sh.points {
                    denom += (logits[idx(l, k)] - mx).exp();
                }
            }
            for l in 0..sh.levels {
                let (h, w) = layout.shapes[l];
                for k in 0..sh.points {
                    let a = (logits[idx(l, k)] - mx).exp() / denom;
                    let x = p.x + off[2 * idx(l, k)] / w as f64;
                    let y = p.y + off[2 * idx(l, k) + 1] / h as f64;
                    let (col, row) = (x * w as f64 - 0.5, y * h as f64 - 0.5);
                    let (c0, r0) = (col.floor(), row.floor());
                    for (dr, dc) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
                        let (rr, cc) = (r0 + dr, c0 + dc);
                        if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 {
                            continue;
                        }
                        let wt = (1.0 - (row - rr).abs()) * (1.0 - (col - cc).abs());
                        let t = layout.offsets[l] + rr as usize * w + cc as usize;
                        for ch in 0..dh {
                            head_out[m * dh + ch] += a * wt * values[t][m * dh + ch];
                        }
                    }
                }
            }
        }
        out.extend(linear(&head_out, &c.store, c.attn.output_proj.w, c.attn.output_proj.b));
    }
    out
}

/// Single-head `softmax(QKᵀ/√d) V` from the full score matrix.
fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let dv = v.shape()[1];
    let scores: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..nk).map(|j| (0..d).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() / (d as f64).sqrt()).collect())
        .collect();
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let mx = scores[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores[i].iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..nk {
            for c in 0..dv {
                out[i * dv + c] += e[j] / z * v.row(j)[c];
            }
        }
    }
    out
}

fn c2_attention_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_deform: f64 = 0.0;
    for _ in 0..100 {
        let c = random_attn_case(&mut rng, 3, 4, 16);
        let (out, _, _) = ms_deform_attn_detailed(&c.z, &c.refs, &c.memory, &c.attn, &c.store).unwrap();
        for (a, b) in out.data().iter().zip(deform_oracle(&c)) {
            worst_deform = worst_deform.max((a - b).abs());
        }
    }
    let mut worst_global: f64 = 0.0;
    for _ in 0..100 {
        let (n, nk, d, dv) = (
            rng.random_range(1..=8),
            rng.random_range(1..=12),
            rng.random_range(1..=16),
            rng.random_range(1..=16),
        );
        let q = random_tensor(&mut rng, &[n, d], 2.0);
        let k = random_tensor(&mut rng, &[nk, d], 2.0);
        let v = random_tensor(&mut rng, &[nk, dv], 2.0);
        let out = global_attention(&q, &k, &v, 1).unwrap();
        for (a, b) in out.data().iter().zip(dense_attention(&q, &k, &v)) {
            worst_global = worst_global.max((a - b).abs());
        }
    }
    outcome(
        worst_deform <= ORACLE_TOL && worst_global <= ORACLE_TOL,
        format!("deformable max err {worst_deform:.2e}, global max err {worst_global:.2e}, tol {ORACLE_TOL:e}"),
    )
}

// ---------------------------------------------------------------------------------------------
// Gradients, matching, denoising, losses

fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.model.d = 8;
    cfg.model.heads = 2;
    cfg.model.points = 2;
    cfg.model.ffn_dim = 16;
    cfg.model.encoder_layers = 1;
    cfg.model.decoder_layers = 1;
    cfg.model.num_queries = 4;
    cfg.model.backbone.base_channels = 2;
    cfg.model.detach_anchors = false;
    cfg.dn.dn_number = 8;
    cfg.seed = seed;
    cfg
}

fn c3_gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut where_ = String::new();
    let mut checked = 0;
    for seed in 0..10 {
        let cfg = tiny_config(seed);
        let synth = SynthConfig {
            max_lines: 4,
            ..SynthConfig::default()
        };
        let sample = Sample::from(synth_generate_with(100 + seed, 1, 64, &synth).unwrap().remove(0));
        let (model, mut store) = DtLsd::new(cfg.model.clone(), seed).unwrap();
        // Off the exact initialization, where sampling points sit on bilinear kinks.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v += rng.random_range(-0.02..0.02);
            }
        }
        let dn = seeded_denoising_batch(&sample.gt, &cfg.dn, cfg.model.num_queries, seed);
        let check = GradCheckConfig {
            h: 1e-6,
            max_entries_per_param: Some(8),
            seed,
        };
        let r = grad_check(&mut store, &check, |s| {
            let mut g = Graph::new();
            let l = image_loss(&mut g, &model, s, &sample, &cfg, Some(&dn))?;
            Ok((g, l.total))
        })
        .unwrap();
        checked += r.entries_checked;
        if r.max_rel_error > worst {
            worst = r.max_rel_error;
            where_ = format!("{}[{}] seed {seed}", r.worst_param, r.worst_index);
        }
    }
    outcome(worst < GRAD_TOL, format!("max rel err {worst:.2e} at {where_}, {checked} entries, tol {GRAD_TOL:e}"))
}

fn brute_force(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, g: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if g == c.cols() {
            *best = best.min(acc);
            return;
        }
        for p in 0..c.rows() {
            if !used[p] {
                used[p] = true;
                go(c, g + 1, used, acc + c.get(p, g), best);
                used[p] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.rows()], 0.0, &mut best);
    best
}

fn c4_hungarian() -> Outcome {
    let mut instances = 0;
    let mut mismatches = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n_gt in 1..=7 {
            for n_pred in n_gt..=7 {
                // Dyadic costs keep every partial sum exact.
                let data: Vec<f64> = (0..n_pred * n_gt).map(|_| rng.random_range(-64..64) as f64 / 8.0).collect();
                let c = CostMatrix::new(n_pred, n_gt, data).unwrap();
                let a = hungarian_assign(&c).unwrap();
                let distinct: BTreeSet<usize> = a.pred_for_gt.iter().copied().collect();
                let cost: f64 = a.pred_for_gt.iter().enumerate().map(|(g, &p)| c.get(p, g)).sum();
                if distinct.len() != n_gt || cost != brute_force(&c) {
                    mismatches += 1;
                }
                instances += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over {instances} instances (n ≤ 7, 100 seeds)"))
}

fn angle_between(a: &LineSegment, b: &LineSegment) -> f64 {
    let (ax, ay) = (a.x2 - a.x1, a.y2 - a.y1);
    let (bx, by) = (b.x2 - b.x1, b.y2 - b.y1);
    (ax * by - ay * bx).atan2(ax * bx + ay * by).to_degrees()
}

fn c5_lcdn() -> Outcome {
    let cfg = DenoisingConfig::default();
    let tau = cfg.line_rotation_deg;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs = 0;
    let mut bad = 0;
    while pairs < 10_000 {
        let n = rng.random_range(1..=12);
        let gt: Vec<LineSegment> = (0..n)
            .map(|_| {
                LineSegment::new(
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                )
                .canonicalize()
            })
            .filter(|l| l.length() > 0.05)
            .collect();
        if gt.is_empty() {
            continue;
        }
        let b = generate_denoising_batch(&gt, &cfg, 900, &mut rng);
        for pair in b.queries.chunks(2) {
            let (pos, neg) = (&pair[0], &pair[1]);
            let l = gt[pos.gt_index];
            let (lp, ln) = (noised_line(l, pos), noised_line(l, neg));
            let len = l.length();
            let (ap, an) = (angle_between(&l, &lp).abs(), angle_between(&l, &ln).abs());
            let ok = pos.positive
                && !neg.positive
                && pos.gt_index == neg.gt_index
                && lp.length() <= len
                && len < ln.length()
                && ap < tau
                && tau <= an + 1e-9
                && an < 2.0 * tau;
            if !ok {
                bad += 1;
            }
            pairs += 1;
        }
    }
    // Exhaustive mask check against the three rules.
    let mut mask_errors = 0;
    let mut masks = 0;
    for groups in 1..=3 {
        for n_gt in 1..=4 {
            for n_match in 0..=8 {
                let size = 2 * n_gt;
                let n_dn = groups * size;
                let m = build_attention_mask(size, groups, n_match);
                for i in 0..n_dn + n_match {
                    for j in 0..n_dn + n_match {
                        let (di, dj) = (i < n_dn, j < n_dn);
                        // Matching queries never see denoising queries; groups never see each
                        // other; everything else is visible.
                        let blocked = (!di && dj) || (di && dj && i / size != j / size);
                        if m.is_blocked(i, j) != blocked {
                            mask_errors += 1;
                        }
                    }
                }
                masks += 1;
            }
        }
    }
    outcome(
        bad == 0 && mask_errors == 0,
        format!("{bad} of {pairs} pairs out of range; {mask_errors} mask entries wrong over {masks} masks"),
    )
}

fn c6_loss_values() -> Outcome {
    let w = LossWeights::default();
    let gt = LineSegment::new(0.2, 0.3, 0.6, 0.7);
    let pred = LineSegment::new(0.25, 0.3, 0.5, 0.75);
    let preds = [Prediction { prob: 0.5, line: pred }];
    let a = hungarian_assign(&CostMatrix::new(1, 1, vec![0.0]).unwrap()).unwrap();
    let values = [
        ("focal(line, 0.5)", focal_loss(0.5, true), 0.173287),
        ("focal(no-line, 0.5)", focal_loss(0.5, false), 0.043322),
        ("L1", line_l1_loss(&pred, &gt, true), 0.2),
        ("total", total_loss(&preds, &[gt], &a, &w).total, 1.346574),
    ];
    let worst = values.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let detail = values
        .iter()
        .map(|(n, got, _)| format!("{n} = {got:.6}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(worst < LOSS_TOL, format!("{detail}; max err {worst:.1e}, tol {LOSS_TOL:e}"))
}

// ---------------------------------------------------------------------------------------------
// Metrics

/// Precision/recall by explicit enumeration of every confidence cut-off, then the all-point
/// interpolated area: each recall step earns the best precision at any later cut-off.
fn ap_oracle(images: &[ImageResult], tau: f64) -> f64 {
    let n_gt: usize = images.iter().map(|i| i.gt.len()).sum();
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (ii, im) in images.iter().enumerate() {
        for (di, d) in im.detections.iter().enumerate() {
            all.push((d.confidence, ii, di));
        }
    }
    // Stable descending confidence order over (image, detection) enumeration order.
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut taken: Vec<Vec<bool>> = images.iter().map(|i| vec![false; i.gt.len()]).collect();
    let mut tp = Vec::new();
    for &(_, ii, di) in &all {
        let det = images[ii].detections[di].line;
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in images[ii].gt.iter().enumerate() {
            if taken[ii][gi] {
                continue;
            }
            let s = STRUCTURAL_SCALE;
            let direct = (det.x1 - g.x1).powi(2) + (det.y1 - g.y1).powi(2) + (det.x2 - g.x2).powi(2) + (det.y2 - g.y2).powi(2);
            let crossed = (det.x1 - g.x2).powi(2) + (det.y1 - g.y2).powi(2) + (det.x2 - g.x1).powi(2) + (det.y2 - g.y1).powi(2);
            let dist = direct.min(crossed) * s * s;
            if dist <= tau && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                taken[ii][gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut hits = 0;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for k in 0..tp.len() {
        if rec[k] > last_recall {
            let best = prec[k..].iter().cloned().fold(0.0, f64::max);
            ap += (rec[k] - last_recall) * best;
            last_recall = rec[k];
        }
    }
    ap
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn c7_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Lines on a coarse lattice so that exact ties, near misses and competing detections occur.
    let lattice = |rng: &mut ChaCha8Rng| rng.random_range(0..6) as f64 / 64.0 + 0.25;
    let mut cases = 0;
    let mut mismatches = 0;
    for _ in 0..300 {
        let n_gt = rng.random_range(1..=3);
        let n_det = rng.random_range(0..=3);
        let gt: Vec<LineSegment> = (0..n_gt)
            .map(|_| LineSegment::new(lattice(&mut rng), lattice(&mut rng), lattice(&mut rng), lattice(&mut rng)))
            .collect();
        let lines: Vec<LineSegment> = (0..n_det)
            .map(|_| LineSegment::new(lattice(&mut rng), lattice(&mut rng), lattice(&mut rng), lattice(&mut rng)))
            .collect();
        for order in permutations(n_det) {
            let detections: Vec<Detection> = lines
                .iter()
                .zip(&order)
                .map(|(&line, &rank)| Detection {
                    line,
                    confidence: 1.0 - rank as f64 / 8.0,
                })
                .collect();
            let images = [ImageResult {
                detections,
                gt: gt.clone(),
            }];
            for tau in [5.0, 10.0, 15.0, 40.0] {
                if structural_ap(&images, tau).unwrap() != ap_oracle(&images, tau) {
                    mismatches += 1;
                }
                cases += 1;
            }
        }
    }
    let mut violations = 0;
    for set in 0..50u64 {
        let scenes = synth_generate(1000 + set, 10, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(set);
        let images: Vec<ImageResult> = scenes
            .iter()
            .map(|s| {
                let mut detections: Vec<Detection> = s
                    .gt
                    .iter()
                    .map(|g| {
                        let j = rng.random_range(0.0..0.03);
                        let mut c = || rng.random_range(-j..j);
                        Detection {
                            line: LineSegment::clamped(g.x1 + c(), g.y1 + c(), g.x2 + c(), g.y2 + c()),
                            confidence: rng.random_range(0.0..1.0),
                        }
                    })
                    .collect();
                for _ in 0..rng.random_range(0..5) {
                    let mut u = || rng.random_range(0.0..1.0);
                    detections.push(Detection {
                        line: LineSegment::new(u(), u(), u(), u()),
                        confidence: u(),
                    });
                }
                detections.shuffle(&mut rng);
                ImageResult {
                    detections,
                    gt: s.gt.clone(),
                }
            })
            .collect();
        let s5 = structural_ap(&images, 5.0).unwrap();
        let s10 = structural_ap(&images, 10.0).unwrap();
        let s15 = structural_ap(&images, 15.0).unwrap();
        if !(s5 <= s10 && s10 <= s15) {
            violations += 1;
        }
    }
    outcome(
        mismatches == 0 && violations == 0,
        format!("{mismatches} oracle mismatches over {cases} cases; {violations} of 50 sets violate sAP5 ≤ sAP10 ≤ sAP15"),
    )
}

fn c8_complexity() -> Outcome {
    let tokens = [256, 1024, 4096];
    let g = complexity_probe(Mechanism::Global, &tokens, 32, 20, 8).unwrap();
    let d = complexity_probe(Mechanism::Deformable, &tokens, 32, 20, 8).unwrap();
    let ok_g = (GLOBAL_SLOPE.0..=GLOBAL_SLOPE.1).contains(&g.slope);
    let ok_d = (DEFORM_SLOPE.0..=DEFORM_SLOPE.1).contains(&d.slope);
    outcome(
        ok_g && ok_d,
        format!(
            "global slope {:.3} in [{}, {}], deformable slope {:.3} in [{}, {}]",
            g.slope, GLOBAL_SLOPE.0, GLOBAL_SLOPE.1, d.slope, DEFORM_SLOPE.0, DEFORM_SLOPE.1
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// Training runs

fn toy_data(seed: u64, count: usize) -> Vec<Sample> {
    synth_generate(seed, count, 64).unwrap().into_iter().map(Sample::from).collect()
}

fn window_mean(log: &[LossLogEntry]) -> f64 {
    log.iter().map(|e| e.loss).sum::<f64>() / log.len() as f64
}

fn c9_learning() -> Outcome {
    let cfg = TrainConfig::toy();
    let train = toy_data(1, cfg.batch_size * TRAIN_STEPS);
    let test = toy_data(2, HELD_OUT);
    let mut t = Trainer::new(cfg).unwrap();
    let log = t.run(&train, TRAIN_STEPS, |_| {}).unwrap();
    let ratio = window_mean(&log[log.len() - 100..]) / window_mean(&log[..100]);
    let sap10 = evaluate_with(&t.model, &t.store, &test, &[10.0]).unwrap().sap_at(10.0).unwrap();
    outcome(
        ratio < LOSS_RATIO_MAX && sap10 >= SAP10_MIN,
        format!("loss ratio {ratio:.3} (< {LOSS_RATIO_MAX}), held-out sAP10 {sap10:.3} (≥ {SAP10_MIN})"),
    )
}

fn c10_ablation() -> Outcome {
    let mut on = Vec::new();
    let mut off = Vec::new();
    let test = toy_data(2, HELD_OUT);
    for seed in 0..3 {
        for lcdn in [true, false] {
            let mut cfg = TrainConfig::toy();
            cfg.seed = seed;
            cfg.lcdn_enabled = lcdn;
            let train = toy_data(10 + seed, cfg.batch_size * ABLATION_STEPS);
            let mut t = Trainer::new(cfg).unwrap();
            t.run(&train, ABLATION_STEPS, |_| {}).unwrap();
            let s = evaluate_with(&t.model, &t.store, &test, &[10.0]).unwrap().sap_at(10.0).unwrap();
            if lcdn { on.push(s) } else { off.push(s) }
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[1]
    };
    let (m_on, m_off) = (median(&mut on), median(&mut off));
    outcome(
        m_on > m_off,
        format!("median sAP10 with denoising {m_on:.4} vs without {m_off:.4} (seeds 0..3, {ABLATION_STEPS} steps)"),
    )
}

fn c11_training_only() -> Outcome {
    let mut cfg = TrainConfig::toy();
    cfg.max_steps = Some(20);
    let train = toy_data(3, 40);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    t.run(&train, 20, |_| {}).unwrap();
    let ckpt = t.checkpoint();
    let (model, store) = ckpt.build_model().unwrap();
    let mut differing = 0;
    let mut compared = 0;
    for (i, s) in toy_data(4, 10).iter().enumerate() {
        let plain = model.predict(&store, &s.image).unwrap();
        let dn = seeded_denoising_batch(&s.gt, &cfg.dn, cfg.model.num_queries, i as u64);
        let with = model.predict_with_denoising(&store, &s.image, Some(&dn)).unwrap();
        for (a, b) in plain.iter().zip(&with) {
            let bits = |p: &Prediction| {
                let mut v = vec![p.prob.to_bits()];
                v.extend(p.line.to_array().map(f64::to_bits));
                v
            };
            if bits(a) != bits(b) {
                differing += 1;
            }
            compared += 1;
        }
        if plain.len() != with.len() {
            differing += 1;
        }
    }
    outcome(differing == 0, format!("{differing} of {compared} predictions differ bitwise"))
}
