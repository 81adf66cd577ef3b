use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{DecoderLayer, EncoderLayer};
use super::{frames_on, sine_embed_on, LineQuery, ModelConfig, ANCHOR_LOGIT_EPS};
use crate::attention::DeformShape;
use crate::error::{Error, Result};
use crate::geometry::LineSegment;
use crate::lcdn::{AttentionMask, DenoisingBatch};
use crate::matching::Prediction;
use crate::nn::{zero_param, Linear, Mlp};
use crate::numeric::{logit, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::pyramid::{stacked_pos_enc, FlattenedMemory, ImageTensor, LevelLayout, LevelProjection, ToyBackbone};

/// Initial class bias: every query starts at probability 0.01.
fn prior_bias() -> f64 {
    -((1.0 - 0.01) / 0.01f64).ln()
}

fn zero_last(store: &mut ParamStore, mlp: &Mlp) {
    zero_param(store, mlp.last().w);
    zero_param(store, mlp.last().b);
}

/// Class and line heads applied to one decoder layer's output.
#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub class: Linear,
    pub line: Mlp,
}

/// Probabilities `[N, 1]` and lines `[N, 4]` on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub probs: Var,
    pub lines: Var,
}

impl PredictionHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Transformer;
        let class = Linear::new(store, &format!("{name}.class"), g, d, 1, rng);
        store.value_mut(class.b).data_mut()[0] = prior_bias();
        let line = Mlp::new(store, &format!("{name}.line"), g, &[d, d, d, 4], rng);
        zero_last(store, &line);
        Self { class, line }
    }

    /// `p̂ = σ(class(c))`, `l̂ = σ(logit(anchor) + line(c))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, content: Var, anchors: Var) -> LayerOutput {
        let c = self.class.forward(g, store, content);
        let probs = g.sigmoid(c);
        let delta = self.line.forward(g, store, content);
        let base = g.logit(anchors, ANCHOR_LOGIT_EPS);
        let s = g.add(base, delta);
        let lines = g.sigmoid(s);
        LayerOutput { probs, lines }
    }
}

/// Token scoring and proposal heads plus the learnable content queries.
#[derive(Clone, Debug)]
pub struct QuerySelector {
    pub score: Linear,
    pub proposal: Mlp,
    pub content: ParamId,
    pub num_queries: usize,
}

impl QuerySelector {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, num_queries: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Transformer;
        let score = Linear::new(store, "enc.score", g, d, 1, rng);
        store.value_mut(score.b).data_mut()[0] = prior_bias();
        let proposal = Mlp::new(store, "enc.proposal", g, &[d, d, d, 4], rng);
        zero_last(store, &proposal);
        let content = store.add_uniform("query.content", g, &[num_queries, d], 1.0, rng);
        Self {
            score,
            proposal,
            content,
            num_queries,
        }
    }

    /// Token indices of the `k` highest scores, ties to the lower index.
    pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
        if k > scores.len() {
            return Err(Error::config(format!("cannot select {k} queries from {} tokens", scores.len())));
        }
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        idx.truncate(k);
        Ok(idx)
    }

    /// Scores every token, keeps the top `k`, and proposes their anchors.
    ///
    /// Returns the proposal output (for the proposal loss) and the selected token indices.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Var,
        layout: &LevelLayout,
        k: usize,
    ) -> Result<(LayerOutput, Vec<usize>)> {
        let scores = self.score.forward(g, store, memory);
        let idx = Self::top_k(g.value(scores).data(), k)?;
        let picked_scores = g.gather_rows(scores, idx.clone());
        let probs = g.sigmoid(picked_scores);
        let picked = g.gather_rows(memory, idx.clone());
        let delta = self.proposal.forward(g, store, picked);
        let mut base = Vec::with_capacity(4 * k);
        for &t in &idx {
            let (x, y) = layout.reference_point(t);
            let (lx, ly) = (logit(x, ANCHOR_LOGIT_EPS), logit(y, ANCHOR_LOGIT_EPS));
            base.extend([lx, ly, lx, ly]);
        }
        let base = g.constant(Tensor::from_parts(vec![k, 4], base));
        let s = g.add(base, delta);
        let lines = g.sigmoid(s);
        Ok((LayerOutput { probs, lines }, idx))
    }
}

/// Decoder layers with the shared query-position MLP and per-layer heads.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub query_pos: Mlp,
    pub heads: Vec<PredictionHeads>,
    /// Stop gradients through the anchors each layer starts from.
    pub detach_anchors: bool,
}

/// One decoder layer's result: output content, the anchors it attended from, and its predictions.
#[derive(Clone, Debug)]
pub struct DecoderStep {
    pub content: Var,
    pub anchors: Tensor,
    pub output: LayerOutput,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        content: Var,
        anchors: Var,
        memory: Var,
        layout: &Arc<LevelLayout>,
        mask: Option<&AttentionMask>,
    ) -> Result<Vec<DecoderStep>> {
        let n = g.shape(content)[0];
        let d = g.shape(content)[1];
        if let Some(m) = mask {
            if m.size != n || m.blocked.len() != n * n {
                return Err(Error::arg(format!("attention mask of size {} does not cover {n} queries", m.size)));
            }
        }
        let mask = mask.map(|m| Arc::new(m.blocked.clone()));
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut content = content;
        let mut anchors = anchors;
        for (layer, heads) in self.layers.iter().zip(&self.heads) {
            let a = if self.detach_anchors { g.detach(anchors) } else { anchors };
            let embed = sine_embed_on(g, a, d);
            let pos = self.query_pos.forward(g, store, embed);
            let (mids, halves) = frames_on(g, a);
            content = layer.forward(g, store, content, pos, mids, halves, memory, layout, mask.clone());
            let output = heads.forward(g, store, content, a);
            steps.push(DecoderStep {
                content,
                anchors: g.value(a).clone(),
                output,
            });
            anchors = output.lines;
        }
        Ok(steps)
    }
}

/// Tape outputs of a full forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Proposals of the selected tokens.
    pub proposals: LayerOutput,
    /// Per decoder layer, covering `[denoising | matching]` queries.
    pub layers: Vec<LayerOutput>,
    pub n_denoising: usize,
    pub n_matching: usize,
    pub selected_tokens: Vec<usize>,
}

/// The complete detector.
#[derive(Clone, Debug)]
pub struct DtLsd {
    pub config: ModelConfig,
    pub backbone: ToyBackbone,
    pub input_proj: LevelProjection,
    pub encoder: Vec<EncoderLayer>,
    pub selector: QuerySelector,
    /// Content embeddings of the "no-line" (row 0) and "line" (row 1) labels.
    pub label_embed: ParamId,
    pub decoder: Decoder,
}

impl DtLsd {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = ToyBackbone::new(&mut store, config.backbone.clone(), &mut rng)?;
        let input_proj = LevelProjection::new(&mut store, &config.backbone, config.d, &mut rng);
        let shape = DeformShape {
            heads: config.heads,
            levels: config.backbone.levels.len(),
            points: config.points,
        };
        let (d, ffn) = (config.d, config.ffn_dim);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("enc.layer{i}"), d, ffn, shape, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let selector = QuerySelector::new(&mut store, d, config.num_queries, &mut rng);
        let label_embed = store.add_uniform("dn.label_embed", ParamGroup::Transformer, &[2, d], 1.0, &mut rng);
        let layers = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("dec.layer{i}"), d, ffn, shape, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let query_pos = Mlp::new(&mut store, "dec.query_pos", ParamGroup::Transformer, &[d, d, d], &mut rng);
        let heads = (0..config.decoder_layers)
            .map(|i| PredictionHeads::new(&mut store, &format!("dec.head{i}"), d, &mut rng))
            .collect();
        let detach_anchors = config.detach_anchors;
        let model = Self {
            config,
            backbone,
            input_proj,
            encoder,
            selector,
            label_embed,
            decoder: Decoder {
                layers,
                query_pos,
                heads,
                detach_anchors,
            },
        };
        Ok((model, store))
    }

    /// Backbone, projection and position encoding: the flattened memory before the encoder.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, image: &ImageTensor) -> Result<(Var, Arc<LevelLayout>)> {
        let levels = self.backbone.forward(g, store, image)?;
        let shapes = self.config.backbone.level_shapes(image.height(), image.width())?;
        let layout = Arc::new(LevelLayout::new(self.config.backbone.levels.clone(), shapes));
        let projected = self.input_proj.forward(g, store, &levels);
        let stacked = if projected.len() == 1 {
            projected[0]
        } else {
            g.concat_rows(&projected)
        };
        let pe = g.constant(stacked_pos_enc(&layout, self.config.d)?);
        Ok((g.add(stacked, pe), layout))
    }

    /// Runs the encoder layers on `[L, d]` tokens.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: Var, layout: &Arc<LevelLayout>) -> Var {
        let refs = g.constant(layout.reference_points());
        self.encoder
            .iter()
            .fold(tokens, |x, layer| layer.forward(g, store, x, refs, layout))
    }

    /// Full forward pass; `dn` adds a denoising branch in front of the matching queries.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &ImageTensor,
        dn: Option<&DenoisingBatch>,
    ) -> Result<ModelOutput> {
        let (tokens, layout) = self.embed(g, store, image)?;
        let memory = self.encode(g, store, tokens, &layout);
        let k = self.config.num_queries;
        let (proposals, selected_tokens) = self.selector.forward(g, store, memory, &layout, k)?;
        let match_anchors = proposals.lines;
        let match_content = g.param(store, self.selector.content);
        let dn = dn.filter(|b| !b.is_empty());
        let (content, anchors, mask, n_dn) = match dn {
            None => (match_content, match_anchors, None, 0),
            Some(b) => {
                if b.n_match != k {
                    return Err(Error::arg(format!("denoising batch built for {} matching queries, model has {k}", b.n_match)));
                }
                let labels: Vec<usize> = b.queries.iter().map(|q| usize::from(q.label)).collect();
                let table = g.param(store, self.label_embed);
                let dn_content = g.gather_rows(table, labels);
                let content = g.concat_rows(&[dn_content, match_content]);
                let data: Vec<f64> = b.queries.iter().flat_map(|q| q.anchor.to_array()).collect();
                let dn_anchors = g.constant(Tensor::from_parts(vec![b.queries.len(), 4], data));
                let anchors = g.concat_rows(&[dn_anchors, match_anchors]);
                (content, anchors, Some(&b.mask), b.queries.len())
            }
        };
        let steps = self.decoder.forward(g, store, content, anchors, memory, &layout, mask)?;
        Ok(ModelOutput {
            proposals,
            layers: steps.into_iter().map(|s| s.output).collect(),
            n_denoising: n_dn,
            n_matching: k,
            selected_tokens,
        })
    }

    /// Final-layer predictions of the matching queries.
    pub fn predict(&self, store: &ParamStore, image: &ImageTensor) -> Result<Vec<Prediction>> {
        self.predict_with_denoising(store, image, None)
    }

    /// Like [`DtLsd::predict`] with a denoising branch present; only matching queries are returned.
    pub fn predict_with_denoising(
        &self,
        store: &ParamStore,
        image: &ImageTensor,
        dn: Option<&DenoisingBatch>,
    ) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, image, dn)?;
        let last = out.layers.last().copied().unwrap_or(out.proposals);
        let skip = if out.layers.is_empty() { 0 } else { out.n_denoising };
        Ok(read_predictions(&g, last, skip, out.n_matching))
    }
}

impl LayerOutput {
    /// Reads rows `skip..skip + n` as predictions.
    pub fn predictions(&self, g: &Graph, skip: usize, n: usize) -> Vec<Prediction> {
        read_predictions(g, *self, skip, n)
    }
}

fn read_predictions(g: &Graph, out: LayerOutput, skip: usize, n: usize) -> Vec<Prediction> {
    let (p, l) = (g.value(out.probs), g.value(out.lines));
    (skip..skip + n)
        .map(|i| {
            let r = l.row(i);
            Prediction {
                prob: p.data()[i],
                line: LineSegment::new(r[0], r[1], r[2], r[3]),
            }
        })
        .collect()
}

/// Applies the encoder layers to a flattened memory.
pub fn encoder_forward(layers: &[EncoderLayer], store: &ParamStore, memory: &FlattenedMemory) -> FlattenedMemory {
    let mut g = Graph::new();
    let x = g.constant(memory.tokens.clone());
    let refs = g.constant(memory.layout.reference_points());
    let y = layers
        .iter()
        .fold(x, |x, layer| layer.forward(&mut g, store, x, refs, &memory.layout));
    FlattenedMemory {
        tokens: g.value(y).clone(),
        layout: memory.layout.clone(),
    }
}

/// Selects the top-`k` tokens as decoder queries: learnable content, proposed anchors.
pub fn query_selection(
    selector: &QuerySelector,
    store: &ParamStore,
    memory: &FlattenedMemory,
    k: usize,
) -> Result<Vec<LineQuery>> {
    if k > selector.num_queries {
        return Err(Error::config(format!("only {} content queries exist, {k} requested", selector.num_queries)));
    }
    let mut g = Graph::new();
    let m = g.constant(memory.tokens.clone());
    let (out, _) = selector.forward(&mut g, store, m, &memory.layout, k)?;
    let content = store.value(selector.content);
    let lines = g.value(out.lines);
    Ok((0..k)
        .map(|i| {
            let r = lines.row(i);
            LineQuery {
                content: content.row(i).to_vec(),
                anchor: LineSegment::new(r[0], r[1], r[2], r[3]),
            }
        })
        .collect())
}

fn queries_to_tensors(queries: &[LineQuery]) -> Result<(Tensor, Tensor)> {
    let n = queries.len();
    let d = queries.first().map_or(0, |q| q.content.len());
    if n == 0 || queries.iter().any(|q| q.content.len() != d) {
        return Err(Error::arg("queries must be non-empty with equal content widths"));
    }
    let content = Tensor::new(vec![n, d], queries.iter().flat_map(|q| q.content.clone()).collect())?;
    let anchors = Tensor::from_parts(vec![n, 4], queries.iter().flat_map(|q| q.anchor.to_array()).collect());
    Ok((content, anchors))
}

/// Runs the decoder; each layer's entry pairs its output content with the refined anchors.
pub fn decoder_forward(
    decoder: &Decoder,
    store: &ParamStore,
    queries: &[LineQuery],
    memory: &FlattenedMemory,
    mask: Option<&AttentionMask>,
) -> Result<Vec<Vec<LineQuery>>> {
    let (content, anchors) = queries_to_tensors(queries)?;
    let mut g = Graph::new();
    let c = g.constant(content);
    let m = g.constant(memory.tokens.clone());
    let anchors = g.constant(anchors);
    let steps = decoder.forward(&mut g, store, c, anchors, m, &memory.layout, mask)?;
    Ok(steps
        .iter()
        .map(|s| {
            let c = g.value(s.content);
            let l = g.value(s.output.lines);
            (0..queries.len())
                .map(|i| {
                    let r = l.row(i);
                    LineQuery {
                        content: c.row(i).to_vec(),
                        anchor: LineSegment::new(r[0], r[1], r[2], r[3]),
                    }
                })
                .collect()
        })
        .collect())
}

/// Class probability and line for each query.
pub fn prediction_heads(heads: &PredictionHeads, store: &ParamStore, queries: &[LineQuery]) -> Result<Vec<Prediction>> {
    let (content, anchors) = queries_to_tensors(queries)?;
    let mut g = Graph::new();
    let c = g.constant(content);
    let a = g.constant(anchors);
    let out = heads.forward(&mut g, store, c, a);
    Ok(read_predictions(&g, out, 0, queries.len()))
}
