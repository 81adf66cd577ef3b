//! Tape gradients of the complete training loss against central differences.

use dtlsd::harness::{image_loss, synth_generate_with, Sample, SynthConfig, TrainConfig};
use dtlsd::lcdn::seeded_denoising_batch;
use dtlsd::numeric::{grad_check, GradCheckConfig, Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use dtlsd::transformer::DtLsd;

fn tiny(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.model.d = 8;
    cfg.model.heads = 2;
    cfg.model.points = 2;
    cfg.model.ffn_dim = 16;
    cfg.model.encoder_layers = 1;
    cfg.model.decoder_layers = 1;
    cfg.model.num_queries = 4;
    cfg.model.backbone.base_channels = 2;
    cfg.dn.dn_number = 8;
    cfg.model.detach_anchors = false;
    cfg.seed = seed;
    cfg
}

/// Moves every parameter off the exact initial values, whose sampling points sit on grid
/// lines where bilinear interpolation has kinks.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.02..0.02);
        }
    }
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    for seed in 0..10 {
        let cfg = tiny(seed);
        let synth = SynthConfig {
            max_lines: 4,
            ..SynthConfig::default()
        };
        let sample = Sample::from(synth_generate_with(100 + seed, 1, 64, &synth).unwrap().remove(0));
        let (model, mut store) = DtLsd::new(cfg.model.clone(), seed).unwrap();
        jitter(&mut store, seed);
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
        assert!(
            r.max_rel_error < 1e-4,
            "seed {seed}: {} [{}] analytic {} numeric {} (err {})",
            r.worst_param,
            r.worst_index,
            r.analytic,
            r.numeric,
            r.max_rel_error
        );
    }
}
