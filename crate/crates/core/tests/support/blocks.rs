//! Gradient checks of each differentiable block on seeded random inputs.

use catf_core::losses::{multitask_tape, nll_mixture_tape};
use catf_core::model::attention::{
    linear_attention, multi_head_attention, scaled_dot_product_attention, AttentionParams, Mask,
};
use catf_core::model::context::{encode_context, INPUT_CHANNELS};
use catf_core::model::{AttentionKind, Batch, Bound, Catf, ModelConfig, ModelInput, RunOptions};
use catf_core::scene::{generate_scene, GenConfig, RasterConfig, RoadTemplate};
use catf_core::tensor::{check_gradient, GradReport};
use catf_core::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Finite-difference step.
pub const H: f64 = 1e-5;

pub const BLOCKS: [&str; 10] = [
    "attention",
    "masked attention",
    "multi-head attention",
    "linear attention",
    "shared linear attention",
    "feed-forward",
    "layer norm",
    "context encoder",
    "mixture nll",
    "multitask",
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(out * w)` for fixed random weights, so every output entry matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(out), 1.0, &mut rng(seed ^ 0xabc));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn attn_params(v: &[Var], heads: usize) -> AttentionParams {
    AttentionParams {
        wq: v[0],
        wk: v[1],
        wv: v[2],
        wo: v[3],
        heads,
    }
}

fn attn_weights(d: usize, hd: usize, r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = 1.0 / (d as f64).sqrt();
    vec![
        Tensor::randn(&[d, hd], s, r),
        Tensor::randn(&[d, hd], s, r),
        Tensor::randn(&[d, hd], s, r),
        Tensor::randn(&[hd, d], s, r),
    ]
}

pub fn tiny_config(kind: AttentionKind) -> ModelConfig {
    ModelConfig {
        d_model: 6,
        layers: 1,
        heads: 2,
        d_k: 3,
        d_v: 3,
        d_ff: 5,
        p: 3,
        modes: 2,
        history: 3,
        horizon: 4,
        dropout: 0.0,
        conv_channels: vec![2, 3],
        raster: RasterConfig {
            width_px: 8,
            height_px: 8,
            resolution: 4.0,
            ..RasterConfig::desk()
        },
        ..ModelConfig::desk()
    }
    .with_attention(kind)
}

fn bind(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// Gradient report of one named block at one seed.
pub fn block_report(block: &str, seed: u64) -> GradReport {
    let r = &mut rng(seed);
    let report = match block {
        "attention" | "masked attention" => {
            let params = vec![
                Tensor::randn(&[2, 4, 3], 1.0, r),
                Tensor::randn(&[2, 4, 3], 1.0, r),
                Tensor::randn(&[2, 4, 2], 1.0, r),
            ];
            let mask = (block == "masked attention").then(|| Mask::causal(4));
            check_gradient(
                |t, v| {
                    let out = scaled_dot_product_attention(t, v[0], v[1], v[2], mask.as_ref())?;
                    project(t, out, seed)
                },
                &params,
                H,
            )
        }
        "multi-head attention" => {
            let mut params = vec![Tensor::randn(&[2, 3, 6], 1.0, r), Tensor::randn(&[2, 5, 6], 1.0, r)];
            params.extend(attn_weights(6, 6, r));
            check_gradient(
                |t, v| {
                    let out = multi_head_attention(t, v[0], v[1], &attn_params(&v[2..], 2), None)?;
                    project(t, out, seed)
                },
                &params,
                H,
            )
        }
        "linear attention" | "shared linear attention" => {
            let proj: &[usize] = if block == "linear attention" {
                &[2, 5, 3]
            } else {
                &[5, 3]
            };
            let mut params = vec![Tensor::randn(&[2, 3, 6], 1.0, r), Tensor::randn(&[2, 5, 6], 1.0, r)];
            params.extend(attn_weights(6, 6, r));
            params.push(Tensor::randn(proj, 0.5, r));
            params.push(Tensor::randn(proj, 0.5, r));
            check_gradient(
                |t, v| {
                    let out = linear_attention(t, v[0], v[1], &attn_params(&v[2..6], 2), v[6], v[7])?;
                    project(t, out, seed)
                },
                &params,
                H,
            )
        }
        "feed-forward" => {
            let model = Catf::new(tiny_config(AttentionKind::Full), 0).unwrap();
            let names: Vec<String> = ["x", "f.w1", "f.b1", "f.w2", "f.b2"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            let params = vec![
                Tensor::randn(&[2, 3, 6], 1.0, r),
                Tensor::randn(&[6, 5], 0.5, r),
                Tensor::randn(&[5], 0.5, r),
                Tensor::randn(&[5, 6], 0.5, r),
                Tensor::randn(&[6], 0.5, r),
            ];
            check_gradient(
                |t, v| {
                    let out = model.ffn(t, &bind(&names, v), v[0], "f")?;
                    project(t, out, seed)
                },
                &params,
                H,
            )
        }
        "layer norm" => {
            let params = vec![
                Tensor::randn(&[3, 4, 6], 1.0, r),
                Tensor::randn(&[6], 1.0, r),
                Tensor::randn(&[6], 1.0, r),
            ];
            check_gradient(
                |t, v| {
                    let out = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    project(t, out, seed)
                },
                &params,
                H,
            )
        }
        "context encoder" => {
            let cfg = tiny_config(AttentionKind::Full);
            let init = Catf::new(cfg.clone(), seed).unwrap();
            let names: Vec<String> = std::iter::once("input".to_string())
                .chain(init.params().keys().filter(|k| k.starts_with("ctx.")).cloned())
                .collect();
            let mut params = vec![Tensor::randn(&[2, INPUT_CHANNELS, 8, 8], 1.0, r)];
            params.extend(names[1..].iter().map(|n| init.params()[n].clone()));
            check_gradient(
                |t, v| {
                    let out = encode_context(t, &bind(&names, v), &cfg, v[0])?;
                    project(t, out, seed)
                },
                &params,
                H,
            )
        }
        "mixture nll" => {
            let truth = Tensor::randn(&[2, 4, 2], 1.0, r);
            // modes near the truth keep every responsibility, and so every
            // gradient entry, well away from the finite-difference noise floor
            let offsets = Tensor::randn(&[2, 3, 4, 2], 0.3, r);
            let positions = Tensor::from_fn(&[2, 3, 4, 2], |i| {
                truth.data()[(i / 24) * 8 + i % 8] + offsets.data()[i]
            });
            let params = vec![positions, Tensor::randn(&[2, 3], 1.0, r)];
            check_gradient(|t, v| nll_mixture_tape(t, v[0], v[1], &truth), &params, H)
        }
        "multitask" => {
            let params: Vec<Tensor> = (0..4)
                .map(|i| {
                    let v = Tensor::randn(&[], 0.5, r).data()[0];
                    Tensor::scalar(if i < 2 { 1.0 + v.abs() } else { v })
                })
                .collect();
            let with = check_gradient(|t, v| multitask_tape(t, v[0], Some(v[1]), v[2], v[3]), &params, H).unwrap();
            let without = check_gradient(|t, v| multitask_tape(t, v[0], None, v[2], v[3]), &params, H).unwrap();
            Ok(if with.max_rel_diff >= without.max_rel_diff {
                with
            } else {
                without
            })
        }
        other => panic!("unknown block {other}"),
    };
    report.unwrap()
}

/// Gradient report of a whole teacher-forced model pass.
pub fn model_report(kind: AttentionKind, seed: u64) -> GradReport {
    let gen = GenConfig {
        template: RoadTemplate::Fork,
        history: 3,
        horizon: 4,
        ..GenConfig::default()
    };
    let cfg = tiny_config(kind);
    let scene = generate_scene(&gen, seed).unwrap();
    let id = scene.targets()[0];
    let (input, _) = ModelInput::from_scene(&scene, id, &cfg).unwrap();
    let batch = Batch::new(&[&input], &cfg).unwrap();
    let model = Catf::new(cfg.clone(), seed).unwrap();
    let names: Vec<String> = model.params().keys().cloned().collect();
    let params: Vec<Tensor> = model.params().values().cloned().collect();
    let prev = Tensor::randn(&[1, cfg.horizon, 2 * cfg.modes], 1.0, &mut rng(seed));
    check_gradient(
        |t, v| {
            let out = model.forward_teacher(t, &bind(&names, v), &batch, &prev, &mut RunOptions::eval(true))?;
            let a = project(t, out.positions, seed)?;
            let b = project(t, out.logits, seed + 1)?;
            t.add(a, b)
        },
        &params,
        H,
    )
    .unwrap()
}
