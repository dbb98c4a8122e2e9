//! UNet family with dropout, SGD/Adam and the epoch loop.
//!
//! # Architecture
//!
//! With `c_l = base_channels · 2^l` and `D = depth`:
//!
//! | block            | layers                                                           | parameters                         |
//! |------------------|------------------------------------------------------------------|------------------------------------|
//! | `enc{l}`, l < D  | conv3×3 (in→c_l)+ReLU, conv3×3 (c_l→c_l)+ReLU, dropout           | `9·in·c_l + c_l + 9·c_l² + c_l`    |
//! | `enc{l}.down`    | conv2×2 stride 2 (c_l→c_l)                                       | `4·c_l² + c_l`                     |
//! | `mid`            | conv3×3 (c_{D-1}→c_D)+ReLU, conv3×3 (c_D→c_D)+ReLU, dropout      | `9·c_{D-1}·c_D + c_D + 9·c_D² + c_D` |
//! | `mid.time`       | linear c_D→c_D on the sinusoidal step embedding (optional)       | `c_D² + c_D`                       |
//! | `dec{l}.up`      | transposed conv2×2 stride 2 (c_{l+1}→c_l)                         | `4·c_{l+1}·c_l + c_l`              |
//! | `dec{l}`         | concat skip, conv3×3 (2c_l→c_l)+ReLU, conv3×3 (c_l→c_l)+ReLU, dropout | `18·c_l² + c_l + 9·c_l² + c_l` |
//! | `head`           | conv1×1 (c_0→out), logits                                        | `c_0·out + out`                    |
//!
//! The time projection is added to the bottleneck after its first convolution.
//! Dropout is inverted (kept units are scaled by `1/(1-rate)`), so evaluation
//! mode is a plain pass-through.

mod checkpoint;
mod layers;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub(crate) use layers::{
    conv, decode, encode, init_conv, init_decoder, init_encoder, init_linear, linear,
};
pub use layers::{time_embedding, Bound, Encoded};
pub use optim::{sgd_step, train_epoch, EpochStats, Optimizer, OptimizerKind};

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named parameter buffers, iterated in name order.
pub type Params = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Fresh dropout masks are drawn from the supplied rng.
    Train,
    /// Dropout disabled.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout_rate: f64,
    pub time_conditioning: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            in_channels: 3,
            out_channels: 2,
            dropout_rate: 0.5,
            time_conditioning: false,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("UNet depth must be at least 1"));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("UNet channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(
                "unet",
                format!("expected [N,{},H,W], got {shape:?}", self.in_channels),
            ));
        }
        let m = 1usize << self.depth;
        if shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::shape(
                "unet",
                format!(
                    "spatial size {}x{} not divisible by {m}",
                    shape[2], shape[3]
                ),
            ));
        }
        Ok(())
    }
}

/// Entries are 0 with probability `rate`, otherwise `1/(1-rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if rate == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// A UNet with its parameters and the seed they were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: UNetConfig,
    pub params: Params,
    pub seed: u64,
}

impl Model {
    /// Deterministic initialisation for a fixed `(config, seed)`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        init_encoder(&mut params, "", &config, &mut rng);
        init_decoder(
            &mut params,
            "",
            &config,
            true,
            config.out_channels,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            seed,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound::new(&self.params, tape, trainable)
    }

    /// Records a forward pass on `tape`. `steps` is required when the model is time conditioned.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        steps: Option<&[usize]>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let enc = encode(tape, bound, "", &self.config, x, steps, mode, rng)?;
        decode(tape, bound, "", &self.config, &enc, true, mode, rng)
    }

    /// Gradient-free forward pass returning logits `[N, out, H, W]`.
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<Tensor> {
        self.forward_steps(x, None, mode, rng)
    }

    /// Eval-mode bottleneck activations `[N, c_D, H/2^D, W/2^D]`.
    pub fn encode_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let enc = encode(
            &mut tape,
            &bound,
            "",
            &self.config,
            xv,
            None,
            Mode::Eval,
            &mut no_rng,
        )?;
        Ok(tape.value(enc.bottleneck).clone())
    }

    pub fn forward_steps(
        &self,
        x: &Tensor,
        steps: Option<&[usize]>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward_on(&mut tape, &bound, xv, steps, mode, rng)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Heavy-ball momentum for SGD; ignored by Adam.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.001,
            batch_size: 4,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}
