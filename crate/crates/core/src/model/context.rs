//! Convolutional encoder turning the raster into a D-dimensional context vector.
//!
//! Each raster channel `r` is lifted to `(r, r * x, r * y)` with `x, y` the pixel
//! coordinates scaled to `[-1, 1]`, so that global average pooling keeps first
//! moments of where things are. Zero input still maps to zero features.

use super::config::ModelConfig;
use super::params::Bound;
use crate::error::{Error, Result};
use crate::scene::{RasterImage, CHANNELS};
use crate::tensor::{conv_out_len, Tape, Var};

pub const INPUT_CHANNELS: usize = 3 * CHANNELS;

/// Channel-first lifted input `[9, H, W]` for one raster.
pub fn lift_raster(raster: &RasterImage, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let (h, w) = (raster.height, raster.width);
    if h != cfg.raster.height_px || w != cfg.raster.width_px {
        return Err(Error::invalid(format!(
            "raster is {w}x{h}, model expects {}x{}",
            cfg.raster.width_px, cfg.raster.height_px
        )));
    }
    let chw = raster.to_chw();
    let mut out = Vec::with_capacity(INPUT_CHANNELS * h * w);
    out.extend_from_slice(&chw);
    let coord = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    for axis in 0..2 {
        for c in 0..CHANNELS {
            let plane = &chw[c * h * w..(c + 1) * h * w];
            for r in 0..h {
                for col in 0..w {
                    // x grows to the right, y grows upward (row 0 is the top)
                    let s = if axis == 0 { coord(col, w) } else { -coord(r, h) };
                    out.push(plane[r * w + col] * s);
                }
            }
        }
    }
    Ok(out)
}

/// Convolution stack, pooling and output projection: `[B, 9, H, W] -> [B, D]`.
pub fn encode_context(tape: &mut Tape, params: &Bound, cfg: &ModelConfig, input: Var) -> Result<Var> {
    let s = tape.shape(input).to_vec();
    if s.len() != 4 || s[1] != INPUT_CHANNELS || s[2] != cfg.raster.height_px || s[3] != cfg.raster.width_px {
        return Err(Error::shape(
            "encode_context",
            &s,
            &[INPUT_CHANNELS, cfg.raster.height_px, cfg.raster.width_px],
        ));
    }
    let mut x = input;
    for i in 0..cfg.conv_channels.len() {
        let w = params.get(&format!("ctx.conv{i}.w"))?;
        let b = params.get(&format!("ctx.conv{i}.b"))?;
        let c = tape.conv2d(x, w, b)?;
        x = tape.tanh(c);
    }
    let pooled = tape.global_avg_pool(x)?;
    let y = tape.matmul(pooled, params.get("ctx.out.w")?)?;
    tape.add_broadcast(y, params.get("ctx.out.b")?)
}

/// Input rows and columns that can influence feature `(row, col)` after
/// `layers` stride-2 3x3 convolutions with padding 1, as inclusive ranges
/// clipped to the image.
pub fn receptive_field(
    layers: usize,
    row: usize,
    col: usize,
    height: usize,
    width: usize,
) -> ((usize, usize), (usize, usize)) {
    let (mut r0, mut r1, mut c0, mut c1) = (row as i64, row as i64, col as i64, col as i64);
    for _ in 0..layers {
        r0 = 2 * r0 - 1;
        r1 = 2 * r1 + 1;
        c0 = 2 * c0 - 1;
        c1 = 2 * c1 + 1;
    }
    let clip = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    ((clip(r0, height), clip(r1, height)), (clip(c0, width), clip(c1, width)))
}

/// Spatial size after `layers` convolutions.
pub fn feature_size(layers: usize, mut height: usize, mut width: usize) -> (usize, usize) {
    for _ in 0..layers {
        height = conv_out_len(height);
        width = conv_out_len(width);
    }
    (height, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;
    use crate::scene::RasterConfig;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            d_k: 4,
            d_v: 4,
            conv_channels: vec![3, 5],
            raster: RasterConfig {
                width_px: 12,
                height_px: 10,
                ..RasterConfig::desk()
            },
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn zero_raster_with_zero_biases_gives_zero() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 1);
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &params, false);
        let img = RasterImage::zeros(&cfg.raster);
        let x = tape.constant(Tensor::new(&[1, 9, 10, 12], lift_raster(&img, &cfg).unwrap()).unwrap());
        let out = encode_context(&mut tape, &b, &cfg, x).unwrap();
        assert_eq!(tape.shape(out), &[1, 8]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_width_independent_of_channels() {
        for channels in [vec![2], vec![4, 4, 4]] {
            let cfg = ModelConfig {
                conv_channels: channels,
                ..small_cfg()
            };
            let params = init_params(&cfg, 1);
            let mut tape = Tape::new();
            let b = Bound::new(&mut tape, &params, false);
            let x = tape.constant(Tensor::ones(&[2, 9, 10, 12]));
            let out = encode_context(&mut tape, &b, &cfg, x).unwrap();
            assert_eq!(tape.shape(out), &[2, 8]);
        }
    }

    #[test]
    fn wrong_raster_shape_is_rejected() {
        let cfg = small_cfg();
        let img = RasterImage::zeros(&RasterConfig::desk());
        assert!(lift_raster(&img, &cfg).is_err());
        let params = init_params(&cfg, 1);
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &params, false);
        let x = tape.constant(Tensor::ones(&[1, 9, 8, 12]));
        assert!(encode_context(&mut tape, &b, &cfg, x).is_err());
    }

    /// A first-layer feature only sees the pixels inside its receptive field.
    #[test]
    fn features_ignore_pixels_outside_receptive_field() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (10, 12);
        let base = Tensor::uniform(&[1, 9, h, w], 0.0, 1.0, &mut rng);
        let ((r0, r1), (c0, c1)) = receptive_field(2, 0, 0, h, w);
        let mut changed = base.clone();
        for _ in 0..30 {
            let (r, c) = (rng.gen_range(0..h), rng.gen_range(0..w));
            if r > r1 || c > c1 || r < r0 || c < c0 {
                for ch in 0..9 {
                    changed.data_mut()[(ch * h + r) * w + c] += 1.0;
                }
            }
        }
        let feature = |input: Tensor| {
            let mut tape = Tape::new();
            let b = Bound::new(&mut tape, &params, false);
            let mut x = tape.constant(input);
            for i in 0..2 {
                let c = tape
                    .conv2d(
                        x,
                        b.get(&format!("ctx.conv{i}.w")).unwrap(),
                        b.get(&format!("ctx.conv{i}.b")).unwrap(),
                    )
                    .unwrap();
                x = tape.tanh(c);
            }
            let (fh, fw) = feature_size(2, h, w);
            let v = tape.value(x).clone();
            (0..5).map(|ch| v.data()[ch * fh * fw]).collect::<Vec<_>>()
        };
        assert_ne!(base, changed);
        assert_eq!(feature(base), feature(changed));
    }
}
