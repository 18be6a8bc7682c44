use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scene::{RasterConfig, RasterImage};
use crate::tensor::Tape;

pub(crate) fn tiny_config(kind: AttentionKind) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        d_k: 4,
        d_v: 4,
        d_ff: 8,
        p: 3,
        shared_projection: false,
        modes: 2,
        history: 3,
        horizon: 5,
        dropout: 0.0,
        conv_channels: vec![2, 3],
        raster: RasterConfig {
            width_px: 8,
            height_px: 8,
            ..RasterConfig::desk()
        },
    }
    .with_attention(kind)
}

pub(crate) fn random_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelInput {
    let mut raster = RasterImage::zeros(&cfg.raster);
    for v in raster.pixels.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let pts = |rng: &mut ChaCha8Rng| {
        (0..cfg.history)
            .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)])
            .collect()
    };
    ModelInput {
        raster,
        target_history: pts(rng),
        av_history: pts(rng),
    }
}

const KINDS: [AttentionKind; 3] = [AttentionKind::Full, AttentionKind::Linear, AttentionKind::LinearShared];

#[test]
fn output_shapes_and_credibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ModelConfig {
        modes: 3,
        horizon: 50,
        ..tiny_config(AttentionKind::Linear)
    };
    let model = Catf::new(cfg.clone(), 1).unwrap();
    let inputs: Vec<_> = (0..3).map(|_| random_input(&cfg, &mut rng)).collect();
    let refs: Vec<_> = inputs.iter().collect();
    let preds = model.predict(&refs, true).unwrap();
    assert_eq!(preds.len(), 3);
    for p in preds {
        assert_eq!((p.modes(), p.horizon()), (3, 50));
        assert!((p.credibility.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn autoregressive_matches_teacher_forced() {
    for kind in KINDS {
        let cfg = tiny_config(kind);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = Catf::new(cfg.clone(), seed).unwrap();
            let inputs: Vec<_> = (0..2).map(|_| random_input(&cfg, &mut rng)).collect();
            let refs: Vec<_> = inputs.iter().collect();
            let batch = Batch::new(&refs, &cfg).unwrap();
            let (pos, logits) = model.generate_raw(&batch, true).unwrap();
            let prev = model.shift_positions(&pos).unwrap();
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, false);
            let out = model
                .forward_teacher(&mut tape, &p, &batch, &prev, &mut RunOptions::eval(true))
                .unwrap();
            assert!(tape.value(out.positions).max_abs_diff(&pos) < 1e-6, "{kind}");
            assert!(tape.value(out.logits).max_abs_diff(&logits) < 1e-6, "{kind}");
        }
    }
}

#[test]
fn later_decoder_inputs_do_not_affect_earlier_steps() {
    let cfg = tiny_config(AttentionKind::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Catf::new(cfg.clone(), 3).unwrap();
    let input = random_input(&cfg, &mut rng);
    let batch = Batch::new(&[&input], &cfg).unwrap();
    let (k, h) = (cfg.modes, cfg.horizon);
    let prev = Tensor::randn(&[1, h, 2 * k], 3.0, &mut rng);
    let run = |prev: &Tensor| {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let out = model
            .forward_teacher(&mut tape, &p, &batch, prev, &mut RunOptions::eval(true))
            .unwrap();
        tape.value(out.positions).clone()
    };
    let base = run(&prev);
    let t0 = 2;
    let mut perturbed = prev.clone();
    for t in t0 + 1..h {
        for c in 0..2 * k {
            perturbed.data_mut()[t * 2 * k + c] += 5.0;
        }
    }
    let changed = run(&perturbed);
    for m in 0..k {
        for t in 0..h {
            let same = (0..2).all(|c| base.at(&[0, m, t, c]) == changed.at(&[0, m, t, c]));
            assert_eq!(same, t <= t0, "mode {m} step {t}");
        }
    }
}

#[test]
fn small_weights_give_finite_outputs() {
    for kind in KINDS {
        let cfg = ModelConfig {
            d_model: 16,
            heads: 4,
            d_k: 4,
            d_v: 4,
            ..tiny_config(kind)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = param_shapes(&cfg)
            .into_iter()
            .map(|(n, s)| (n, Tensor::randn(&s, 0.02, &mut rng)))
            .collect();
        let model = Catf::from_params(cfg.clone(), params).unwrap();
        let mut input = random_input(&cfg, &mut rng);
        input.target_history = (0..cfg.history).map(|i| [100.0 - i as f64, -100.0]).collect();
        let pred = &model.predict(&[&input], true).unwrap()[0];
        assert!(pred
            .trajectories
            .iter()
            .flatten()
            .all(|p| p[0].is_finite() && p[1].is_finite()));
    }
}

#[test]
fn nan_parameters_are_rejected() {
    let cfg = tiny_config(AttentionKind::Full);
    let mut model = Catf::new(cfg.clone(), 0).unwrap();
    let mut params = model.params().clone();
    params.get_mut("enc.0.ffn.w1").unwrap().data_mut()[3] = f64::NAN;
    assert!(model.set_params(params.clone()).is_err());
    assert!(Catf::from_params(cfg.clone(), params).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = random_input(&cfg, &mut rng);
    assert!(model.predict(&[&input], true).is_ok());
}

#[test]
fn disabled_context_gives_zero_encoder_gradients() {
    let cfg = tiny_config(AttentionKind::Linear);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Catf::new(cfg.clone(), 5).unwrap();
    let input = random_input(&cfg, &mut rng);
    let batch = Batch::new(&[&input], &cfg).unwrap();
    for use_context in [false, true] {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let out = model
            .forward_train(&mut tape, &p, &batch, &mut RunOptions::eval(use_context))
            .unwrap();
        let s = tape.sum(out.positions);
        let l = tape.sum(out.logits);
        let total = tape.add(s, l).unwrap();
        let mut grads = tape.backward(total);
        let g = p.gradients(&tape, &mut grads);
        let ctx_norm: f64 = g
            .iter()
            .filter(|(k, _)| k.starts_with("ctx."))
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        if use_context {
            assert!(ctx_norm > 0.0);
        } else {
            assert_eq!(ctx_norm, 0.0);
        }
    }
}

#[test]
fn ranking_breaks_ties_by_index() {
    let t = vec![vec![[0.0, 0.0]]; 4];
    let p = PredictionSet::new(t, vec![0.25, 0.4, 0.25, 0.1]).unwrap();
    assert_eq!(p.ranked(), vec![1, 0, 2, 3]);
    assert!(PredictionSet::new(vec![vec![[0.0, 0.0]]; 2], vec![0.5, 0.6]).is_err());
}

#[test]
fn from_scene_produces_consistent_input() {
    use crate::scene::{generate_scene, GenConfig};
    let scene = generate_scene(&GenConfig::default(), 2).unwrap();
    let cfg = ModelConfig::desk();
    let (input, _) = ModelInput::from_scene(&scene, 1, &cfg).unwrap();
    let last = input.target_history.last().unwrap();
    assert!(last[0].abs() < 1e-9 && last[1].abs() < 1e-9);
    let model = Catf::new(cfg, 0).unwrap();
    let pred = model.predict(&[&input], true).unwrap();
    assert_eq!(pred[0].horizon(), 50);
}
