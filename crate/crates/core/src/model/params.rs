use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AttentionKind, ModelConfig};
use super::context::INPUT_CHANNELS;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub type ParamMap = BTreeMap<String, Tensor>;

/// Names and shapes of every learned tensor, in a fixed order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let (h, dk, dv, n) = (cfg.heads, cfg.d_k, cfg.d_v, cfg.encoder_len());
    let k2 = 2 * cfg.modes;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| out.push((name, shape));

    let mut c_in = INPUT_CHANNELS;
    for (i, &c) in cfg.conv_channels.iter().enumerate() {
        add(format!("ctx.conv{i}.w"), vec![c, c_in, 3, 3]);
        add(format!("ctx.conv{i}.b"), vec![c]);
        c_in = c;
    }
    add("ctx.out.w".into(), vec![c_in, d]);
    add("ctx.out.b".into(), vec![d]);

    add("embed.ctx_token.w".into(), vec![d, d]);
    add("embed.ctx_token.b".into(), vec![d]);
    add("embed.hist.w".into(), vec![4, d]);
    add("embed.hist.ctx".into(), vec![d, d]);
    add("embed.hist.b".into(), vec![d]);
    add("embed.dec.w".into(), vec![k2, d]);
    add("embed.dec.b".into(), vec![d]);

    let attention = |add: &mut dyn FnMut(String, Vec<usize>), prefix: &str, projected: bool| {
        add(format!("{prefix}.wq"), vec![d, h * dk]);
        add(format!("{prefix}.wk"), vec![d, h * dk]);
        add(format!("{prefix}.wv"), vec![d, h * dv]);
        add(format!("{prefix}.wo"), vec![h * dv, d]);
        if projected && cfg.attention() == AttentionKind::Linear {
            add(format!("{prefix}.f"), vec![h, n, cfg.p]);
            add(format!("{prefix}.g"), vec![h, n, cfg.p]);
        }
    };
    let norm = |add: &mut dyn FnMut(String, Vec<usize>), prefix: String| {
        add(format!("{prefix}.gain"), vec![d]);
        add(format!("{prefix}.bias"), vec![d]);
    };
    let ffn = |add: &mut dyn FnMut(String, Vec<usize>), prefix: String| {
        add(format!("{prefix}.w1"), vec![d, cfg.d_ff]);
        add(format!("{prefix}.b1"), vec![cfg.d_ff]);
        add(format!("{prefix}.w2"), vec![cfg.d_ff, d]);
        add(format!("{prefix}.b2"), vec![d]);
    };
    for l in 0..cfg.layers {
        attention(&mut add, &format!("enc.{l}.self"), true);
        norm(&mut add, format!("enc.{l}.ln1"));
        ffn(&mut add, format!("enc.{l}.ffn"));
        norm(&mut add, format!("enc.{l}.ln2"));
    }
    for l in 0..cfg.layers {
        attention(&mut add, &format!("dec.{l}.self"), false);
        norm(&mut add, format!("dec.{l}.ln1"));
        attention(&mut add, &format!("dec.{l}.cross"), true);
        norm(&mut add, format!("dec.{l}.ln2"));
        ffn(&mut add, format!("dec.{l}.ffn"));
        norm(&mut add, format!("dec.{l}.ln3"));
    }
    if cfg.attention() == AttentionKind::LinearShared {
        add("proj.shared".into(), vec![n, cfg.p]);
    }
    add("head.traj.w".into(), vec![d, k2]);
    add("head.traj.b".into(), vec![k2]);
    add("head.cred.w".into(), vec![d, cfg.modes]);
    add("head.cred.b".into(), vec![cfg.modes]);
    out
}

/// Seeded initialization: scaled normal weights, zero biases, unit norm gains.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamMap::new();
    for (name, shape) in param_shapes(cfg) {
        let t = if name.ends_with(".gain") {
            Tensor::ones(&shape)
        } else if name.ends_with(".b")
            || name.ends_with(".b1")
            || name.ends_with(".b2")
            || name.ends_with(".bias")
            || name.starts_with("head.cred")
        {
            Tensor::zeros(&shape)
        } else if name.ends_with(".f") || name.ends_with(".g") || name == "proj.shared" {
            let n = shape[shape.len() - 2];
            Tensor::randn(&shape, 1.0 / (n as f64).sqrt(), &mut rng)
        } else {
            let fan_in: usize = if shape.len() == 4 { shape[1] * 9 } else { shape[0] };
            let gain = if name == "head.traj.w" { 0.1 } else { 1.0 };
            Tensor::randn(&shape, gain / (fan_in as f64).sqrt(), &mut rng)
        };
        params.insert(name, t);
    }
    params
}

/// Check that `params` holds exactly the tensors the config expects.
pub fn check_params(cfg: &ModelConfig, params: &ParamMap) -> Result<()> {
    let shapes = param_shapes(cfg);
    for (name, shape) in &shapes {
        match params.get(name) {
            None => return Err(Error::invalid(format!("missing parameter {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            Some(t) => {
                if let Some(i) = t.first_non_finite() {
                    return Err(Error::NonFinite {
                        op: "parameters",
                        index: i,
                    });
                }
            }
        }
    }
    if params.len() != shapes.len() {
        let extra: Vec<_> = params.keys().filter(|k| !shapes.iter().any(|(n, _)| n == *k)).collect();
        return Err(Error::invalid(format!("unexpected parameters {extra:?}")));
    }
    Ok(())
}

/// Parameters recorded on a tape, looked up by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &ParamMap, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// Bind names to variables that already live on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} is not bound")))
    }

    /// Gradient for every bound parameter; unreached ones are zero.
    pub fn gradients(&self, tape: &Tape, grads: &mut Gradients) -> ParamMap {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }
}
