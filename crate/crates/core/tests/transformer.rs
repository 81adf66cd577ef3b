use dtlsd::harness::{synth_generate, Sample};
use dtlsd::numeric::{Graph, ParamStore, Tensor};
use dtlsd::pyramid::{FlattenedMemory, LevelLayout};
use dtlsd::transformer::{decoder_forward, encoder_forward, prediction_heads, DtLsd, LineQuery, ModelConfig, QuerySelector};
use dtlsd::{Error, LineSegment};
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        points: 2,
        ffn_dim: 32,
        num_queries: 10,
        ..ModelConfig::toy()
    }
}

fn scene(seed: u64) -> Sample {
    Sample::from(synth_generate(seed, 1, 64).unwrap().remove(0))
}

fn encoded(model: &DtLsd, store: &ParamStore, s: &Sample) -> FlattenedMemory {
    let mut g = Graph::new();
    let (tokens, layout) = model.embed(&mut g, store, &s.image).unwrap();
    let m = model.encode(&mut g, store, tokens, &layout);
    FlattenedMemory {
        tokens: g.value(m).clone(),
        layout,
    }
}

#[test]
fn top_k_examples() {
    assert_eq!(QuerySelector::top_k(&[0.9, 0.1, 0.5], 2).unwrap(), vec![0, 2]);
    assert_eq!(QuerySelector::top_k(&[0.2, 0.7, 0.2, 0.7], 4).unwrap(), vec![1, 3, 0, 2]);
    assert!(matches!(QuerySelector::top_k(&[0.1, 0.2], 3), Err(Error::Config(_))));
}

#[test]
fn more_queries_than_tokens_is_a_config_error() {
    // 64 × 64 input with levels 2..5 has 85 tokens.
    let cfg = ModelConfig { num_queries: 86, ..tiny() };
    let (model, store) = DtLsd::new(cfg, 0).unwrap();
    assert!(matches!(model.predict(&store, &scene(0).image), Err(Error::Config(_))));
}

#[test]
fn fresh_proposals_collapse_onto_reference_points() {
    let (model, store) = DtLsd::new(tiny(), 1).unwrap();
    let s = scene(1);
    let mut g = Graph::new();
    let (tokens, layout) = model.embed(&mut g, &store, &s.image).unwrap();
    let memory = model.encode(&mut g, &store, tokens, &layout);
    let (out, idx) = model.selector.forward(&mut g, &store, memory, &layout, 10).unwrap();
    let lines = g.value(out.lines);
    for (row, &t) in idx.iter().enumerate() {
        let (x, y) = layout.reference_point(t);
        let l = lines.row(row);
        for (got, want) in l.iter().zip([x, y, x, y]) {
            assert!((got - want).abs() < 1e-12, "token {t}: {l:?} vs ({x}, {y})");
        }
    }
}

#[test]
fn untrained_refinement_keeps_anchors() {
    let (model, store) = DtLsd::new(tiny(), 2).unwrap();
    let mem = encoded(&model, &store, &scene(2));
    let queries: Vec<LineQuery> = (0..6)
        .map(|i| LineQuery {
            content: (0..16).map(|c| ((i * 16 + c) as f64 * 0.37).sin()).collect(),
            anchor: LineSegment::new(0.1 + 0.1 * i as f64, 0.2, 0.7, 0.15 + 0.1 * i as f64),
        })
        .collect();
    let layers = decoder_forward(&model.decoder, &store, &queries, &mem, None).unwrap();
    assert_eq!(layers.len(), 2);
    for layer in &layers {
        for (q, out) in queries.iter().zip(layer) {
            for (a, b) in q.anchor.to_array().iter().zip(out.anchor.to_array()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_layers_are_identities() {
    let (mut model, store) = DtLsd::new(tiny(), 3).unwrap();
    let mem = encoded(&model, &store, &scene(3));
    let same = encoder_forward(&[], &store, &mem);
    assert_eq!(same.tokens, mem.tokens);

    model.decoder.layers.clear();
    model.decoder.heads.clear();
    let q = vec![LineQuery {
        content: vec![0.5; 16],
        anchor: LineSegment::new(0.2, 0.2, 0.4, 0.9),
    }];
    assert!(decoder_forward(&model.decoder, &store, &q, &mem, None).unwrap().is_empty());
}

#[test]
fn heads_at_zero_reproduce_anchor_and_half_probability() {
    let (model, mut store) = DtLsd::new(tiny(), 4).unwrap();
    let heads = &model.decoder.heads[0];
    for id in [heads.class.w, heads.class.b] {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
    let q = vec![LineQuery {
        content: vec![0.3; 16],
        anchor: LineSegment::new(0.25, 0.5, 0.75, 0.6),
    }];
    let p = prediction_heads(heads, &store, &q).unwrap();
    assert_eq!(p[0].prob, 0.5);
    for (a, b) in p[0].line.to_array().iter().zip(q[0].anchor.to_array()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encoder_reference_points_are_cell_centres() {
    let shapes = vec![(8, 8), (4, 4), (2, 2), (1, 1)];
    let layout = LevelLayout::from_shapes(shapes.clone());
    let mut t = 0;
    for (h, w) in shapes {
        for i in 0..h {
            for j in 0..w {
                let (x, y) = layout.reference_point(t);
                assert_eq!((x, y), ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64));
                t += 1;
            }
        }
    }
    assert_eq!(t, layout.total_tokens());
}

#[test]
fn forward_is_deterministic() {
    let s = scene(5);
    let (m1, s1) = DtLsd::new(tiny(), 9).unwrap();
    let (m2, s2) = DtLsd::new(tiny(), 9).unwrap();
    assert_eq!(m1.predict(&s1, &s.image).unwrap(), m2.predict(&s2, &s.image).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn predictions_stay_in_the_unit_square(seed in 0u64..1000) {
        let (model, store) = DtLsd::new(tiny(), seed).unwrap();
        for p in model.predict(&store, &scene(seed).image).unwrap() {
            prop_assert!(p.prob > 0.0 && p.prob < 1.0);
            prop_assert!(p.line.to_array().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
