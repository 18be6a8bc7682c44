//! Encoder-decoder network, output heads and decoding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{
    combine_heads, project_keys_values, project_qkv, projected_attention, scaled_dot_product_attention, split_heads,
    AttentionParams, Mask,
};
use super::config::{AttentionKind, ModelConfig};
use super::context::{encode_context, lift_raster, INPUT_CHANNELS};
use super::input::ModelInput;
use super::params::{check_params, init_params, Bound, ParamMap};
use super::positional::{positional_encoding, PositionalEncoding};
use super::PredictionSet;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Scale applied to positions in meters before they enter the network.
pub const POS_SCALE: f64 = 0.1;
const LN_EPS: f64 = 1e-5;

/// Inputs for a batch of samples as dense tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    /// `[B, 9, H, W]` lifted rasters.
    pub context: Tensor,
    /// `[B, m, 4]`: scaled target and AV positions per history step.
    pub history: Tensor,
}

impl Batch {
    pub fn new(inputs: &[&ModelInput], cfg: &ModelConfig) -> Result<Batch> {
        if inputs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let m = cfg.history;
        let (h, w) = (cfg.raster.height_px, cfg.raster.width_px);
        let mut ctx = Vec::with_capacity(inputs.len() * INPUT_CHANNELS * h * w);
        let mut hist = Vec::with_capacity(inputs.len() * m * 4);
        for inp in inputs {
            if inp.target_history.len() != m || inp.av_history.len() != m {
                return Err(Error::invalid(format!(
                    "history has {} target and {} AV states, model expects {m}",
                    inp.target_history.len(),
                    inp.av_history.len()
                )));
            }
            ctx.extend(lift_raster(&inp.raster, cfg)?);
            for (t, a) in inp.target_history.iter().zip(&inp.av_history) {
                hist.extend([t[0], t[1], a[0], a[1]].map(|v| v * POS_SCALE));
            }
        }
        let b = inputs.len();
        Ok(Batch {
            size: b,
            context: Tensor::new(&[b, INPUT_CHANNELS, h, w], ctx)?,
            history: Tensor::new(&[b, m, 4], hist)?,
        })
    }
}

/// Forward-pass switches.
pub struct RunOptions<'a> {
    /// When false the context vector is all zeros and the encoder is skipped.
    pub use_context: bool,
    /// Dropout randomness; `None` disables dropout.
    pub dropout: Option<&'a mut ChaCha8Rng>,
}

impl RunOptions<'_> {
    pub fn eval(use_context: bool) -> RunOptions<'static> {
        RunOptions {
            use_context,
            dropout: None,
        }
    }
}

/// Differentiable outputs of a teacher-forced pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `[B, K, H, 2]` actor-frame positions.
    pub positions: Var,
    /// `[B, K]` credibility logits.
    pub logits: Var,
}

/// Per-layer cached keys and values of autoregressive decoding.
struct LayerCache {
    self_k: Option<Var>,
    self_v: Option<Var>,
    cross_k: Var,
    cross_v: Var,
}

#[derive(Clone, Debug)]
pub struct Catf {
    config: ModelConfig,
    params: ParamMap,
    pe: PositionalEncoding,
    /// `[H, H]` upper-triangular ones turning displacements into positions.
    cumsum: Tensor,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

impl Catf {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamMap) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        let pe = positional_encoding(config.history.max(config.horizon), config.d_model)?;
        let h = config.horizon;
        let cumsum = Tensor::from_fn(&[h, h], |i| if i / h <= i % h { 1.0 } else { 0.0 });
        Ok(Catf {
            config,
            params,
            pe,
            cumsum,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    /// Replace parameters in place; shapes must match the config.
    pub fn set_params(&mut self, params: ParamMap) -> Result<()> {
        check_params(&self.config, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound::new(tape, &self.params, trainable)
    }

    fn ensure_finite_params(&self) -> Result<()> {
        for (name, t) in &self.params {
            if let Some(index) = t.first_non_finite() {
                return Err(Error::invalid(format!(
                    "parameter {name} has a non-finite value at index {index}"
                )));
            }
        }
        Ok(())
    }

    fn attention_params(&self, p: &Bound, prefix: &str) -> Result<AttentionParams> {
        Ok(AttentionParams {
            wq: p.get(&format!("{prefix}.wq"))?,
            wk: p.get(&format!("{prefix}.wk"))?,
            wv: p.get(&format!("{prefix}.wv"))?,
            wo: p.get(&format!("{prefix}.wo"))?,
            heads: self.config.heads,
        })
    }

    /// Key/value projections for an attention block over the encoder memory.
    fn projections(&self, p: &Bound, prefix: &str) -> Result<Option<(Var, Var)>> {
        Ok(match self.config.attention() {
            AttentionKind::Full => None,
            AttentionKind::Linear => Some((p.get(&format!("{prefix}.f"))?, p.get(&format!("{prefix}.g"))?)),
            AttentionKind::LinearShared => {
                let g = p.get("proj.shared")?;
                Some((g, g))
            }
        })
    }

    fn dropout(&self, tape: &mut Tape, x: Var, opts: &mut RunOptions) -> Result<Var> {
        let rate = self.config.dropout;
        match opts.dropout.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask = Tensor::from_fn(tape.shape(x), |_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
                let m = tape.constant(mask);
                tape.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    fn add_norm(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        sub: Var,
        prefix: &str,
        opts: &mut RunOptions,
    ) -> Result<Var> {
        let sub = self.dropout(tape, sub, opts)?;
        let s = tape.add(x, sub)?;
        tape.layer_norm(
            s,
            p.get(&format!("{prefix}.gain"))?,
            p.get(&format!("{prefix}.bias"))?,
            LN_EPS,
        )
    }

    /// Position-wise feed-forward block with a sigmoid between the two layers.
    pub fn ffn(&self, tape: &mut Tape, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let h = linear(
            tape,
            x,
            p.get(&format!("{prefix}.w1"))?,
            p.get(&format!("{prefix}.b1"))?,
        )?;
        let h = tape.sigmoid(h);
        linear(
            tape,
            h,
            p.get(&format!("{prefix}.w2"))?,
            p.get(&format!("{prefix}.b2"))?,
        )
    }

    /// Context vector `[B, D]`, or zeros when context is disabled.
    pub fn context(&self, tape: &mut Tape, p: &Bound, batch: &Batch, use_context: bool) -> Result<Var> {
        if use_context {
            let x = tape.constant(batch.context.clone());
            encode_context(tape, p, &self.config, x)
        } else {
            Ok(tape.constant(Tensor::zeros(&[batch.size, self.config.d_model])))
        }
    }

    /// Encoder memory `[B, m + 1, D]`: a context token followed by the embedded history.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, batch: &Batch, opts: &mut RunOptions) -> Result<Var> {
        let (b, m, d) = (batch.size, self.config.history, self.config.d_model);
        let ctx = self.context(tape, p, batch, opts.use_context)?;
        let ctx_token = linear(tape, ctx, p.get("embed.ctx_token.w")?, p.get("embed.ctx_token.b")?)?;
        let ctx_token = tape.reshape(ctx_token, &[b, 1, d])?;

        // history token t: W [target_t | av_t] + W_c ctx + b + PE(t)
        let hist = tape.constant(batch.history.clone());
        let h = tape.matmul(hist, p.get("embed.hist.w")?)?;
        let c = tape.matmul(ctx, p.get("embed.hist.ctx")?)?;
        let c = tape.reshape(c, &[b, 1, d])?;
        let c = tape.concat(&vec![c; m], 1)?;
        let h = tape.add(h, c)?;
        let h = tape.add_broadcast(h, p.get("embed.hist.b")?)?;
        let pe = tape.constant(self.pe.rows(m)?);
        let h = tape.add_broadcast(h, pe)?;

        let mut x = tape.concat(&[ctx_token, h], 1)?;
        for l in 0..self.config.layers {
            let prefix = format!("enc.{l}.self");
            let ap = self.attention_params(p, &prefix)?;
            let (q, k, v) = project_qkv(tape, x, x, &ap)?;
            let heads = match self.projections(p, &prefix)? {
                None => scaled_dot_product_attention(tape, q, k, v, None)?,
                Some((f, g)) => {
                    let (kp, vp) = project_keys_values(tape, k, v, f, g)?;
                    projected_attention(tape, q, kp, vp)?
                }
            };
            let a = combine_heads(tape, heads, &ap)?;
            x = self.add_norm(tape, p, x, a, &format!("enc.{l}.ln1"), opts)?;
            let f = self.ffn(tape, p, x, &format!("enc.{l}.ffn"))?;
            x = self.add_norm(tape, p, x, f, &format!("enc.{l}.ln2"), opts)?;
        }
        Ok(x)
    }

    /// Per-layer cross-attention keys and values of the memory (projected if linear).
    fn cross_cache(&self, tape: &mut Tape, p: &Bound, memory: Var, l: usize) -> Result<(Var, Var)> {
        let prefix = format!("dec.{l}.cross");
        let ap = self.attention_params(p, &prefix)?;
        let k = tape.matmul(memory, ap.wk)?;
        let k = split_heads(tape, k, ap.heads)?;
        let v = tape.matmul(memory, ap.wv)?;
        let v = split_heads(tape, v, ap.heads)?;
        match self.projections(p, &prefix)? {
            None => Ok((k, v)),
            Some((f, g)) => project_keys_values(tape, k, v, f, g),
        }
    }

    fn cross_attend(&self, tape: &mut Tape, p: &Bound, y: Var, k: Var, v: Var, l: usize) -> Result<Var> {
        let ap = self.attention_params(p, &format!("dec.{l}.cross"))?;
        let q = tape.matmul(y, ap.wq)?;
        let q = split_heads(tape, q, ap.heads)?;
        let heads = match self.config.attention() {
            AttentionKind::Full => scaled_dot_product_attention(tape, q, k, v, None)?,
            _ => projected_attention(tape, q, k, v)?,
        };
        combine_heads(tape, heads, &ap)
    }

    /// Embed decoder inputs: `prev: [B, T, 2K]` positions in meters, starting at step `t0`.
    fn embed_decoder(&self, tape: &mut Tape, p: &Bound, prev: Var, t0: usize) -> Result<Var> {
        let x = tape.scale(prev, POS_SCALE);
        let y = linear(tape, x, p.get("embed.dec.w")?, p.get("embed.dec.b")?)?;
        let len = tape.shape(prev)[1];
        let pe = Tensor::new(
            &[len, self.config.d_model],
            self.pe.table.data()[t0 * self.config.d_model..(t0 + len) * self.config.d_model].to_vec(),
        )?;
        let pe = tape.constant(pe);
        tape.add_broadcast(y, pe)
    }

    /// Masked decoder over a full input sequence `prev: [B, H, 2K]` where row `t`
    /// holds the positions generated at step `t - 1` (the origin for `t = 0`).
    pub fn decode_teacher(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: Var,
        prev: &Tensor,
        opts: &mut RunOptions,
    ) -> Result<Var> {
        let h = self.config.horizon;
        let prev = tape.constant(prev.clone());
        let mut y = self.embed_decoder(tape, p, prev, 0)?;
        let mask = Mask::causal(h);
        for l in 0..self.config.layers {
            let ap = self.attention_params(p, &format!("dec.{l}.self"))?;
            let (q, k, v) = project_qkv(tape, y, y, &ap)?;
            let heads = scaled_dot_product_attention(tape, q, k, v, Some(&mask))?;
            let a = combine_heads(tape, heads, &ap)?;
            y = self.add_norm(tape, p, y, a, &format!("dec.{l}.ln1"), opts)?;
            let (ck, cv) = self.cross_cache(tape, p, memory, l)?;
            let c = self.cross_attend(tape, p, y, ck, cv, l)?;
            y = self.add_norm(tape, p, y, c, &format!("dec.{l}.ln2"), opts)?;
            let f = self.ffn(tape, p, y, &format!("dec.{l}.ffn"))?;
            y = self.add_norm(tape, p, y, f, &format!("dec.{l}.ln3"), opts)?;
        }
        Ok(y)
    }

    /// Per-step displacements `[B, T, 2K]` from decoder states `[B, T, D]`.
    fn displacement(&self, tape: &mut Tape, p: &Bound, dec: Var) -> Result<Var> {
        linear(tape, dec, p.get("head.traj.w")?, p.get("head.traj.b")?)
    }

    /// Trajectory and credibility heads over the full decoder output `[B, H, D]`.
    pub fn heads(&self, tape: &mut Tape, p: &Bound, dec: Var) -> Result<Outputs> {
        let (k, h) = (self.config.modes, self.config.horizon);
        let b = tape.shape(dec)[0];
        let disp = self.displacement(tape, p, dec)?;
        let disp = tape.permute(disp, &[0, 2, 1])?;
        let u = tape.constant(self.cumsum.clone());
        let pos = tape.matmul(disp, u)?;
        let pos = tape.reshape(pos, &[b, k, 2, h])?;
        let positions = tape.permute(pos, &[0, 1, 3, 2])?;
        let pooled = tape.mean_axis(dec, 1)?;
        let logits = linear(tape, pooled, p.get("head.cred.w")?, p.get("head.cred.b")?)?;
        Ok(Outputs { positions, logits })
    }

    /// Teacher-forced pass with a given decoder input sequence.
    pub fn forward_teacher(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        prev: &Tensor,
        opts: &mut RunOptions,
    ) -> Result<Outputs> {
        self.ensure_finite_params()?;
        let memory = self.encode(tape, p, batch, opts)?;
        let dec = self.decode_teacher(tape, p, memory, prev, opts)?;
        self.heads(tape, p, dec)
    }

    /// Training pass: decode autoregressively without gradients, then replay
    /// the generated (detached) prefix through the masked decoder on `tape`.
    pub fn forward_train(&self, tape: &mut Tape, p: &Bound, batch: &Batch, opts: &mut RunOptions) -> Result<Outputs> {
        let (positions, _) = self.generate_raw(batch, opts.use_context)?;
        let prev = self.shift_positions(&positions)?;
        self.forward_teacher(tape, p, batch, &prev, opts)
    }

    /// Decoder inputs `[B, H, 2K]` from positions `[B, K, H, 2]`: row `t` holds
    /// the positions at step `t - 1`, row 0 the origin.
    pub fn shift_positions(&self, positions: &Tensor) -> Result<Tensor> {
        let (k, h) = (self.config.modes, self.config.horizon);
        let s = positions.shape();
        if s.len() != 4 || s[1] != k || s[2] != h || s[3] != 2 {
            return Err(Error::shape("shift_positions", s, &[k, h, 2]));
        }
        let b = s[0];
        let src = positions.data();
        let mut out = vec![0.0; b * h * 2 * k];
        for bi in 0..b {
            for t in 1..h {
                for m in 0..k {
                    for c in 0..2 {
                        out[(bi * h + t) * 2 * k + m * 2 + c] = src[((bi * k + m) * h + t - 1) * 2 + c];
                    }
                }
            }
        }
        Tensor::new(&[b, h, 2 * k], out)
    }

    /// Autoregressive decoding with cached keys and values. Returns positions
    /// `[B, K, H, 2]` and credibility logits `[B, K]`.
    pub fn generate_raw(&self, batch: &Batch, use_context: bool) -> Result<(Tensor, Tensor)> {
        self.ensure_finite_params()?;
        let cfg = &self.config;
        let (b, k, h) = (batch.size, cfg.modes, cfg.horizon);
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let mut opts = RunOptions::eval(use_context);
        let memory = self.encode(&mut tape, &p, batch, &mut opts)?;
        let mut caches = (0..cfg.layers)
            .map(|l| {
                let (cross_k, cross_v) = self.cross_cache(&mut tape, &p, memory, l)?;
                Ok(LayerCache {
                    self_k: None,
                    self_v: None,
                    cross_k,
                    cross_v,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut prev = tape.constant(Tensor::zeros(&[b, 1, 2 * k]));
        let mut states = Vec::with_capacity(h);
        let mut steps = Vec::with_capacity(h);
        for t in 0..h {
            let mut y = self.embed_decoder(&mut tape, &p, prev, t)?;
            for (l, cache) in caches.iter_mut().enumerate() {
                let ap = self.attention_params(&p, &format!("dec.{l}.self"))?;
                let (q, kt, vt) = project_qkv(&mut tape, y, y, &ap)?;
                let keys = match cache.self_k {
                    Some(c) => tape.concat(&[c, kt], 2)?,
                    None => kt,
                };
                let values = match cache.self_v {
                    Some(c) => tape.concat(&[c, vt], 2)?,
                    None => vt,
                };
                cache.self_k = Some(keys);
                cache.self_v = Some(values);
                let heads = scaled_dot_product_attention(&mut tape, q, keys, values, None)?;
                let a = combine_heads(&mut tape, heads, &ap)?;
                y = self.add_norm(&mut tape, &p, y, a, &format!("dec.{l}.ln1"), &mut opts)?;
                let c = self.cross_attend(&mut tape, &p, y, cache.cross_k, cache.cross_v, l)?;
                y = self.add_norm(&mut tape, &p, y, c, &format!("dec.{l}.ln2"), &mut opts)?;
                let f = self.ffn(&mut tape, &p, y, &format!("dec.{l}.ffn"))?;
                y = self.add_norm(&mut tape, &p, y, f, &format!("dec.{l}.ln3"), &mut opts)?;
            }
            let disp = self.displacement(&mut tape, &p, y)?;
            prev = tape.add(prev, disp)?;
            states.push(y);
            steps.push(prev);
        }
        let dec = tape.concat(&states, 1)?;
        let pooled = tape.mean_axis(dec, 1)?;
        let logits = linear(&mut tape, pooled, p.get("head.cred.w")?, p.get("head.cred.b")?)?;

        // steps: H tensors [B, 1, 2K] -> [B, K, H, 2]
        let mut pos = vec![0.0; b * k * h * 2];
        for (t, &s) in steps.iter().enumerate() {
            let v = tape.value(s).data();
            for bi in 0..b {
                for m in 0..k {
                    for c in 0..2 {
                        pos[((bi * k + m) * h + t) * 2 + c] = v[bi * 2 * k + m * 2 + c];
                    }
                }
            }
        }
        Ok((Tensor::new(&[b, k, h, 2], pos)?, tape.value(logits).clone()))
    }

    /// Predictions in each sample's actor frame.
    pub fn predict(&self, inputs: &[&ModelInput], use_context: bool) -> Result<Vec<PredictionSet>> {
        let batch = Batch::new(inputs, &self.config)?;
        let (pos, logits) = self.generate_raw(&batch, use_context)?;
        PredictionSet::from_tensors(&pos, &logits)
    }
}
