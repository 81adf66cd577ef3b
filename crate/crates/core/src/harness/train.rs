use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::dataset::Sample;
use crate::error::{Error, Result};
use crate::lcdn::{apply_label_noise, generate_denoising_batch, DenoisingBatch};
use crate::matching::{build_cost_matrix, hungarian_assign, loss_on_graph, targets_from_assignment, QueryTarget};
use crate::numeric::{AdamW, AdamWConfig, Graph, ParamGroup, ParamStore, Var};
use crate::transformer::{DtLsd, LayerOutput};

/// Random stream used for epoch shuffling.
const SHUFFLE_STREAM: u64 = 1;
/// Random stream used for denoising noise.
const DENOISE_STREAM: u64 = 2;

/// One line of the training log; values are means over the images of the step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub step: usize,
    pub loss: f64,
    pub loss_class: f64,
    pub loss_line: f64,
    pub loss_dn: f64,
}

impl LossLogEntry {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

/// Loss terms of one image, recorded on its graph.
#[derive(Clone, Copy, Debug)]
pub struct ImageLoss {
    pub total: Var,
    pub class: Var,
    pub line: Var,
    pub dn: Var,
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    match vars.split_first() {
        None => g.constant(crate::numeric::Tensor::scalar(0.0)),
        Some((first, rest)) => rest.iter().fold(*first, |acc, &v| g.add(acc, v)),
    }
}

fn rows(g: &mut Graph, out: LayerOutput, start: usize, n: usize) -> LayerOutput {
    if start == 0 && g.shape(out.probs)[0] == n {
        return out;
    }
    let idx: Vec<usize> = (start..start + n).collect();
    LayerOutput {
        probs: g.gather_rows(out.probs, idx.clone()),
        lines: g.gather_rows(out.lines, idx),
    }
}

/// Builds the training loss of one image: Hungarian-matched set loss on the proposals and on
/// the decoder layers (all of them with `aux_loss`, else the last), plus the denoising loss.
pub fn image_loss(
    g: &mut Graph,
    model: &DtLsd,
    store: &ParamStore,
    sample: &Sample,
    cfg: &TrainConfig,
    dn: Option<&DenoisingBatch>,
) -> Result<ImageLoss> {
    let out = model.forward(g, store, &sample.image, dn)?;
    let k = out.n_matching;
    let norm = 1.0 / sample.gt.len().max(1) as f64;
    let mut class_terms = Vec::new();
    let mut line_terms = Vec::new();
    let mut dn_terms = Vec::new();

    let mut matched = |g: &mut Graph, o: LayerOutput| {
        let preds = o.predictions(g, 0, k);
        let cost = build_cost_matrix(&preds, &sample.gt, &cfg.weights);
        let a = hungarian_assign(&cost)?;
        let targets = targets_from_assignment(k, &sample.gt, &a);
        let v = loss_on_graph(g, o.probs, o.lines, &targets, &cfg.weights);
        class_terms.push(g.scale(v.class, norm));
        line_terms.push(g.scale(v.line, norm));
        Ok::<(), Error>(())
    };
    matched(g, out.proposals)?;
    let first = if cfg.aux_loss { 0 } else { out.layers.len().saturating_sub(1) };
    for &layer in &out.layers[first..] {
        let m = rows(g, layer, out.n_denoising, k);
        matched(g, m)?;
    }

    if let Some(b) = dn.filter(|b| !b.is_empty()) {
        let dn_norm = 1.0 / (b.used_gt.len() * b.group_count).max(1) as f64;
        let targets: Vec<QueryTarget> = b
            .queries
            .iter()
            .map(|q| {
                if q.target_is_line() {
                    QueryTarget::Line(sample.gt[q.gt_index])
                } else {
                    QueryTarget::NoLine
                }
            })
            .collect();
        for &layer in &out.layers[first..] {
            let d = rows(g, layer, 0, out.n_denoising);
            let v = loss_on_graph(g, d.probs, d.lines, &targets, &cfg.weights);
            dn_terms.push(g.scale(v.total, dn_norm));
        }
    }
    let class = sum_vars(g, &class_terms);
    let line = sum_vars(g, &line_terms);
    let dn = sum_vars(g, &dn_terms);
    let cl = g.add(class, line);
    let total = g.add(cl, dn);
    Ok(ImageLoss { total, class, line, dn })
}

/// Optimizer state and data order of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: DtLsd,
    pub store: ParamStore,
    optimizer: AdamW,
    shuffle_rng: ChaCha8Rng,
    dn_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = DtLsd::new(config.model.clone(), config.seed)?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(SHUFFLE_STREAM);
        let mut dn_rng = ChaCha8Rng::seed_from_u64(config.seed);
        dn_rng.set_stream(DENOISE_STREAM);
        let optimizer = AdamW::new(AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(Self {
            config,
            model,
            store,
            optimizer,
            shuffle_rng,
            dn_rng,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self, n_data: usize) -> usize {
        n_data.div_ceil(self.config.batch_size)
    }

    /// Total steps of a run over `n_data` images.
    pub fn planned_steps(&self, n_data: usize) -> usize {
        self.config
            .max_steps
            .unwrap_or(self.config.epochs * self.steps_per_epoch(n_data))
    }

    fn lr_factor(&self, n_data: usize) -> f64 {
        let epoch = self.step / self.steps_per_epoch(n_data).max(1);
        if epoch >= self.config.lr_drop_epoch {
            0.1
        } else {
            1.0
        }
    }

    fn next_batch(&mut self, n_data: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size.min(n_data) {
            if self.cursor >= self.order.len() {
                self.order = (0..n_data).collect();
                self.order.shuffle(&mut self.shuffle_rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Denoising batch for one image, or `None` when the branch is off.
    pub fn denoising_for(&mut self, sample: &Sample) -> Option<DenoisingBatch> {
        if !self.config.lcdn_enabled || self.config.dn.dn_number == 0 {
            return None;
        }
        let b = generate_denoising_batch(&sample.gt, &self.config.dn, self.config.model.num_queries, &mut self.dn_rng);
        Some(apply_label_noise(b, self.config.dn.label_noise_ratio, &mut self.dn_rng))
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<LossLogEntry> {
        if data.is_empty() {
            return Err(Error::arg("training data is empty"));
        }
        let batch = self.next_batch(data.len());
        let inv = 1.0 / batch.len() as f64;
        self.store.zero_grad();
        let mut entry = LossLogEntry {
            step: self.step,
            loss: 0.0,
            loss_class: 0.0,
            loss_line: 0.0,
            loss_dn: 0.0,
        };
        for &i in &batch {
            let dn = self.denoising_for(&data[i]);
            let mut g = Graph::new();
            let l = image_loss(&mut g, &self.model, &self.store, &data[i], &self.config, dn.as_ref())?;
            let v = |x: Var| g.value(x).data()[0];
            let (total, class, line, dnv) = (v(l.total), v(l.class), v(l.line), v(l.dn));
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    detail: format!("image {} ({}): class {class}, line {line}, denoising {dnv}", i, data[i].name),
                });
            }
            entry.loss += total * inv;
            entry.loss_class += class * inv;
            entry.loss_line += line * inv;
            entry.loss_dn += dnv * inv;
            let scaled = g.scale(l.total, inv);
            g.backward_into(scaled, &mut self.store);
        }
        if let Some(max) = self.config.grad_clip_norm {
            clip_grad_norm(&mut self.store, max);
        }
        let f = self.lr_factor(data.len());
        let (lr, blr) = (self.config.lr * f, self.config.backbone_lr * f);
        self.optimizer.step_grouped(&mut self.store, |grp| match grp {
            ParamGroup::Backbone => blr,
            ParamGroup::Transformer => lr,
        })?;
        self.step += 1;
        Ok(entry)
    }

    /// Runs `steps` optimizer steps, calling `on_step` after each.
    pub fn run(&mut self, data: &[Sample], steps: usize, mut on_step: impl FnMut(&LossLogEntry)) -> Result<Vec<LossLogEntry>> {
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let e = self.train_step(data)?;
            on_step(&e);
            log.push(e);
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, &self.config, self.step as u64)
    }
}

/// Rescales all gradients so their global L2 norm is at most `max`; returns the norm before.
pub fn clip_grad_norm(store: &mut ParamStore, max: f64) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let norm = ids
        .iter()
        .map(|&id| store.grad(id).data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = max / norm;
        for id in ids {
            for v in store.get_mut(id).grad.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossLogEntry>,
}

/// Trains for the configured length and returns the final checkpoint and per-step log.
pub fn train_loop(cfg: &TrainConfig, data: &[Sample], on_step: impl FnMut(&LossLogEntry)) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::arg("training data is empty"));
    }
    let mut t = Trainer::new(cfg.clone())?;
    let steps = t.planned_steps(data.len());
    let log = t.run(data, steps, on_step)?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::synth_generate;

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::toy();
        cfg.model.d = 8;
        cfg.model.heads = 2;
        cfg.model.ffn_dim = 16;
        cfg.model.encoder_layers = 1;
        cfg.model.decoder_layers = 1;
        cfg.model.num_queries = 16;
        cfg.model.backbone.base_channels = 2;
        cfg.dn.dn_number = 20;
        cfg.max_steps = Some(3);
        cfg
    }

    #[test]
    fn deterministic_log() {
        let data: Vec<Sample> = synth_generate(1, 3, 64).unwrap().into_iter().map(Sample::from).collect();
        let a = train_loop(&tiny(), &data, |_| {}).unwrap();
        let b = train_loop(&tiny(), &data, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 3);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert!(a.log.iter().all(|e| e.loss_dn > 0.0));
    }

    #[test]
    fn flag_disables_denoising() {
        let mut cfg = tiny();
        cfg.lcdn_enabled = false;
        let data: Vec<Sample> = synth_generate(2, 2, 64).unwrap().into_iter().map(Sample::from).collect();
        let mut t = Trainer::new(cfg).unwrap();
        assert!(t.denoising_for(&data[0]).is_none());
        let e = t.train_step(&data).unwrap();
        assert_eq!(e.loss_dn, 0.0);
        let back: LossLogEntry = serde_json::from_str(&e.to_json_line()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn clipping() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Transformer, crate::numeric::Tensor::zeros(&[2]));
        store.get_mut(id).grad.data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        let g = store.grad(id).data();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
