//! Parameter initialisation and the building blocks shared by every network.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use super::{dropout_mask, Mode, Params, UNetConfig};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Parameters recorded on one tape, by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Records every parameter on `tape`; `trainable` decides whether gradients are tracked.
    pub fn new(params: &Params, tape: &mut Tape, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    /// Rebinds `name` to `var`, e.g. a probe recorded separately on the same tape.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = var;
                Ok(())
            }
            None => Err(Error::invalid(format!("no parameter named `{name}`"))),
        }
    }

    /// Pulls the gradient of every bound parameter out of `grads`.
    pub fn collect(&self, grads: &mut Gradients) -> Params {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Convolution weights with He-uniform init (bound `sqrt(6 / fan_in)`) for
/// layers followed by a ReLU, LeCun-uniform (`sqrt(3 / fan_in)`) otherwise.
/// Biases start at zero and are stored as `[1, F, 1, 1]`.
pub(crate) fn init_conv(
    params: &mut Params,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    relu: bool,
    rng: &mut dyn RngCore,
) {
    let fan_in = (in_ch * k * k) as f64;
    let bound = if relu {
        (6.0 / fan_in).sqrt()
    } else {
        (3.0 / fan_in).sqrt()
    };
    params.insert(
        format!("{name}.w"),
        uniform(&[out_ch, in_ch, k, k], bound, rng),
    );
    params.insert(format!("{name}.b"), Tensor::zeros(&[1, out_ch, 1, 1]));
}

/// Transposed-convolution weights `[in, out, k, k]`; with stride equal to `k`
/// every output pixel sees `in` taps, which sets the fan-in.
pub(crate) fn init_conv_t(
    params: &mut Params,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    rng: &mut dyn RngCore,
) {
    let bound = (3.0 / in_ch as f64).sqrt();
    params.insert(
        format!("{name}.w"),
        uniform(&[in_ch, out_ch, k, k], bound, rng),
    );
    params.insert(format!("{name}.b"), Tensor::zeros(&[1, out_ch, 1, 1]));
}

pub(crate) fn init_linear(
    params: &mut Params,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut dyn RngCore,
) {
    let bound = (3.0 / in_dim as f64).sqrt();
    params.insert(format!("{name}.w"), uniform(&[in_dim, out_dim], bound, rng));
    params.insert(format!("{name}.b"), Tensor::zeros(&[1, out_dim]));
}

fn uniform(shape: &[usize], bound: f64, rng: &mut dyn RngCore) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub(crate) fn conv(
    tape: &mut Tape,
    p: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.conv2d(x, w, stride, padding)?;
    tape.add(y, b)
}

pub(crate) fn conv_t(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.conv_transpose2d(x, w, stride, 0)?;
    tape.add(y, b)
}

pub(crate) fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub(crate) fn dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let mask = tape.constant(dropout_mask(&shape, rate, rng)?);
    tape.dropout_apply(x, mask)
}

/// Two 3×3 convolutions with ReLU, then dropout.
pub(crate) fn double_conv(
    tape: &mut Tape,
    p: &Bound,
    name: &str,
    x: Var,
    time: Option<Var>,
    rate: f64,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let h = conv(tape, p, &format!("{name}.conv1"), x, 1, 1)?;
    let mut h = tape.relu(h)?;
    if let Some(t) = time {
        h = tape.add(h, t)?;
    }
    let h = conv(tape, p, &format!("{name}.conv2"), h, 1, 1)?;
    let h = tape.relu(h)?;
    dropout(tape, h, rate, mode, rng)
}

/// Sinusoidal embedding of integer steps, `[N, dim]`.
pub fn time_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for j in 0..dim {
            let k = if j < half { j } else { j - half };
            let freq = (-(k as f64) * (10_000f64).ln() / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            data.push(if j < half { arg.sin() } else { arg.cos() });
        }
    }
    Tensor::from_parts(vec![steps.len(), dim], data)
}

/// Activations kept by the encoder: one skip per level plus the bottleneck.
pub struct Encoded {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

pub(crate) fn init_encoder(
    params: &mut Params,
    prefix: &str,
    cfg: &UNetConfig,
    rng: &mut dyn RngCore,
) {
    let mut in_ch = cfg.in_channels;
    for l in 0..cfg.depth {
        let c = cfg.channels(l);
        init_conv(
            params,
            &format!("{prefix}enc{l}.conv1"),
            c,
            in_ch,
            3,
            true,
            rng,
        );
        init_conv(params, &format!("{prefix}enc{l}.conv2"), c, c, 3, true, rng);
        init_conv(params, &format!("{prefix}enc{l}.down"), c, c, 2, false, rng);
        in_ch = c;
    }
    let c = cfg.channels(cfg.depth);
    init_conv(
        params,
        &format!("{prefix}mid.conv1"),
        c,
        in_ch,
        3,
        true,
        rng,
    );
    init_conv(params, &format!("{prefix}mid.conv2"), c, c, 3, true, rng);
    if cfg.time_conditioning {
        init_linear(params, &format!("{prefix}mid.time"), c, c, rng);
    }
}

pub(crate) fn init_decoder(
    params: &mut Params,
    prefix: &str,
    cfg: &UNetConfig,
    skips: bool,
    out_channels: usize,
    rng: &mut dyn RngCore,
) {
    for l in (0..cfg.depth).rev() {
        let c = cfg.channels(l);
        let cin = if skips { 2 * c } else { c };
        init_conv_t(
            params,
            &format!("{prefix}dec{l}.up"),
            cfg.channels(l + 1),
            c,
            2,
            rng,
        );
        init_conv(
            params,
            &format!("{prefix}dec{l}.conv1"),
            c,
            cin,
            3,
            true,
            rng,
        );
        init_conv(params, &format!("{prefix}dec{l}.conv2"), c, c, 3, true, rng);
    }
    init_conv(
        params,
        &format!("{prefix}head"),
        out_channels,
        cfg.channels(0),
        1,
        false,
        rng,
    );
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn encode(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    cfg: &UNetConfig,
    x: Var,
    steps: Option<&[usize]>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Encoded> {
    let shape = tape.value(x).shape().to_vec();
    cfg.check_input(&shape)?;
    let mut h = x;
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        h = double_conv(
            tape,
            p,
            &format!("{prefix}enc{l}"),
            h,
            None,
            cfg.dropout_rate,
            mode,
            rng,
        )?;
        skips.push(h);
        h = conv(tape, p, &format!("{prefix}enc{l}.down"), h, 2, 0)?;
    }
    let time = match (cfg.time_conditioning, steps) {
        (true, Some(steps)) => {
            if steps.len() != shape[0] {
                return Err(Error::shape(
                    "unet",
                    format!("{} steps for batch {}", steps.len(), shape[0]),
                ));
            }
            let c = cfg.channels(cfg.depth);
            let emb = tape.constant(time_embedding(steps, c));
            let proj = linear(tape, p, &format!("{prefix}mid.time"), emb)?;
            Some(tape.reshape(proj, &[shape[0], c, 1, 1])?)
        }
        (true, None) => {
            return Err(Error::invalid(
                "time-conditioned network needs diffusion steps",
            ))
        }
        (false, _) => None,
    };
    let bottleneck = double_conv(
        tape,
        p,
        &format!("{prefix}mid"),
        h,
        time,
        cfg.dropout_rate,
        mode,
        rng,
    )?;
    Ok(Encoded { skips, bottleneck })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn decode(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    cfg: &UNetConfig,
    enc: &Encoded,
    skips: bool,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let mut h = enc.bottleneck;
    for l in (0..cfg.depth).rev() {
        h = conv_t(tape, p, &format!("{prefix}dec{l}.up"), h, 2)?;
        if skips {
            h = tape.concat_channels(&[enc.skips[l], h])?;
        }
        h = double_conv(
            tape,
            p,
            &format!("{prefix}dec{l}"),
            h,
            None,
            cfg.dropout_rate,
            mode,
            rng,
        )?;
    }
    conv(tape, p, &format!("{prefix}head"), h, 1, 0)
}
