//! Denoising diffusion: linear noise schedule, the ε-prediction objective,
//! ancestral sampling and mask-channel diffusion for segmentation.
//!
//! Pixel data is mapped to `[-1, 1]` before diffusion and back afterwards.
//! In segmentation mode the network sees `[image (3), noisy mask (1)]` and
//! predicts the noise of the mask channel only.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::masks_tensor;
use crate::error::{Error, Result};
use crate::metrics::{image_fid, Embedder, Fid, MetricsRecord, PixelCounts};
use crate::nn::{EpochStats, Mode, Model, Optimizer, TrainConfig, UNetConfig};
use crate::partition::ExperimentData;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// `beta[t-1]`, `alpha[t-1]` and `alpha_bar[t-1]` hold step `t` for `t = 1..=T`;
/// `ᾱ_0 = 1` by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("a noise schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    /// `ᾱ_t` for `t = 0..=T`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps => Ok(self.alpha_bar[t - 1]),
            t => Err(self.out_of_range(t)),
        }
    }

    fn out_of_range(&self, t: usize) -> Error {
        Error::invalid(format!("diffusion step {t} outside 1..={}", self.steps))
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps).contains(&t) {
            Ok(())
        } else {
            Err(self.out_of_range(t))
        }
    }

    /// `t, β_t, ᾱ_t, SNR(t)` for every step.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("t\tbeta\talpha_bar\tsnr\n");
        for t in 1..=self.steps {
            let ab = self.alpha_bar[t - 1];
            let _ = writeln!(
                out,
                "{t}\t{:e}\t{:e}\t{:e}",
                self.beta[t - 1],
                ab,
                ab / (1.0 - ab)
            );
        }
        out
    }
}

/// `ᾱ_t / (1 − ᾱ_t)`.
pub fn snr(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar[t - 1];
    Ok(ab / (1.0 - ab))
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`; `t = 0` returns `x0`.
pub fn forward_noise(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(
            "forward_noise",
            format!("{:?} vs {:?}", x0.shape(), eps.shape()),
        ));
    }
    let ab = schedule.alpha_bar_at(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Ok(Tensor::from_parts(x0.shape().to_vec(), data))
}

/// Per-element noising of a batch with one step per outer index.
fn noise_batch(
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let n = x0.shape()[0];
    if steps.len() != n || eps.shape() != x0.shape() {
        return Err(Error::shape(
            "noise_batch",
            "steps/noise do not match the batch",
        ));
    }
    let parts = (0..n)
        .map(|i| {
            forward_noise(
                &x0.slice_outer(i, 1)?,
                steps[i],
                &eps.slice_outer(i, 1)?,
                schedule,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_outer(&parts)
}

/// Anything that predicts the noise of `x_t` at the given steps, optionally
/// conditioned on images.
pub trait EpsPredictor {
    fn predict_eps(&self, xt: &Tensor, steps: &[usize], cond: Option<&Tensor>) -> Result<Tensor>;
}

/// The random part of one training step: a uniform step per element and
/// standard-normal noise shaped like the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample(shape: &[usize], schedule_steps: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if shape.is_empty() || shape[0] == 0 {
            return Err(Error::invalid("empty diffusion batch"));
        }
        let steps = (0..shape[0])
            .map(|_| rng.gen_range(1..=schedule_steps))
            .collect();
        Ok(Self {
            steps,
            eps: Tensor::randn(shape, rng),
        })
    }
}

/// `mean ‖ε − ε_θ(√ᾱ_t x0 + √(1−ᾱ_t) ε, t)‖²` per element, for any predictor.
pub fn diffusion_loss(
    predictor: &dyn EpsPredictor,
    x0: &Tensor,
    cond: Option<&Tensor>,
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let xt = noise_batch(x0, &draw.steps, &draw.eps, schedule)?;
    let pred = predictor.predict_eps(&xt, &draw.steps, cond)?;
    if pred.shape() != draw.eps.shape() {
        return Err(Error::shape(
            "diffusion_loss",
            format!("{:?} vs {:?}", pred.shape(), draw.eps.shape()),
        ));
    }
    let sq: f64 = pred
        .data()
        .iter()
        .zip(draw.eps.data())
        .map(|(p, e)| (p - e) * (p - e))
        .sum();
    Ok(sq / pred.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffusionMode {
    /// Unconditional image generation.
    Generative,
    /// The mask channel is diffused, conditioned on the image.
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpmConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub depth: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule: ScheduleKind::Linear,
            depth: 2,
            base_channels: 8,
            dropout_rate: 0.1,
        }
    }
}

impl DdpmConfig {
    /// Reduced chain length for desk-scale runs.
    pub fn desk_scale() -> Self {
        Self {
            steps: 200,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.schedule)
    }
}

/// Time-conditioned UNet ε_θ with its schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub eps_model: Model,
    pub schedule: NoiseSchedule,
    pub mode: DiffusionMode,
    pub trained: bool,
}

impl DiffusionModel {
    /// `channels` is the number of diffused image channels in generative
    /// mode; segmentation mode always diffuses one mask channel next to 3
    /// image channels.
    pub fn new(cfg: &DdpmConfig, mode: DiffusionMode, channels: usize, seed: u64) -> Result<Self> {
        let (inp, out) = match mode {
            DiffusionMode::Generative => (channels, channels),
            DiffusionMode::Segmentation => (4, 1),
        };
        let unet = UNetConfig {
            depth: cfg.depth,
            base_channels: cfg.base_channels,
            in_channels: inp,
            out_channels: out,
            dropout_rate: cfg.dropout_rate,
            time_conditioning: true,
        };
        Ok(Self {
            eps_model: Model::new(unet, seed)?,
            schedule: cfg.schedule()?,
            mode,
            trained: false,
        })
    }

    /// Diffused channel count.
    pub fn channels(&self) -> usize {
        self.eps_model.config.out_channels
    }

    fn network_input(&self, xt: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        match (self.mode, cond) {
            (DiffusionMode::Generative, None) => Ok(xt.clone()),
            (DiffusionMode::Segmentation, Some(c)) => {
                let mut tape = Tape::new();
                let a = tape.constant(c.clone());
                let b = tape.constant(xt.clone());
                let v = tape.concat_channels(&[a, b])?;
                Ok(tape.value(v).clone())
            }
            (DiffusionMode::Generative, Some(_)) => {
                Err(Error::invalid("generative model takes no conditioning"))
            }
            (DiffusionMode::Segmentation, None) => {
                Err(Error::invalid("segmentation model needs the image"))
            }
        }
    }

    /// One gradient step on the ε-prediction loss. Returns the batch loss.
    pub fn train_step(
        &mut self,
        x0: &Tensor,
        cond: Option<&Tensor>,
        opt: &mut Optimizer,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        let draw = NoiseDraw::sample(x0.shape(), self.schedule.steps, rng)?;
        let xt = noise_batch(x0, &draw.steps, &draw.eps, &self.schedule)?;
        let input = self.network_input(&xt, cond)?;
        let mut tape = Tape::new();
        let bound = self.eps_model.bind(&mut tape, true);
        let xv = tape.constant(input);
        let pred = self.eps_model.forward_on(
            &mut tape,
            &bound,
            xv,
            Some(&draw.steps),
            Mode::Train,
            rng,
        )?;
        let target = tape.constant(draw.eps);
        let loss = tape.mse(pred, target)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: "diffusion step".into(),
                value,
            });
        }
        let mut grads = tape.backward(loss)?;
        let grads = bound.collect(&mut grads);
        opt.step(&mut self.eps_model.params, &grads)?;
        Ok(value)
    }

    /// Epochs over `x0` (already in `[-1, 1]`), with `cond` aligned to it.
    pub fn fit(
        &mut self,
        x0: &Tensor,
        cond: Option<&Tensor>,
        train: &TrainConfig,
    ) -> Result<Vec<EpochStats>> {
        train.validate()?;
        let n = x0.shape()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let mut opt = Optimizer::from_config(train);
        let mut history = Vec::with_capacity(train.epochs);
        for _ in 0..train.epochs {
            let mut losses = Vec::new();
            for idx in crate::data::shuffled_batches(n, train.batch_size, &mut rng) {
                let xb = gather(x0, &idx)?;
                let cb = cond.map(|c| gather(c, &idx)).transpose()?;
                losses.push(self.train_step(&xb, cb.as_ref(), &mut opt, &mut rng)?);
            }
            history.push(EpochStats {
                mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                min_loss: losses.iter().copied().fold(f64::INFINITY, f64::min),
                max_loss: losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                batches: losses.len(),
            });
        }
        self.trained = true;
        Ok(history)
    }
}

impl EpsPredictor for DiffusionModel {
    fn predict_eps(&self, xt: &Tensor, steps: &[usize], cond: Option<&Tensor>) -> Result<Tensor> {
        let input = self.network_input(xt, cond)?;
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        self.eps_model
            .forward_steps(&input, Some(steps), Mode::Eval, &mut no_rng)
    }
}

fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let parts = idx
        .iter()
        .map(|&i| t.slice_outer(i, 1))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_outer(&parts)
}

/// `[0, 1] → [-1, 1]`.
pub fn to_signed(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// `[-1, 1] → [0, 1]`, clamped.
pub fn to_unit(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Reverse chain from `x_T ~ N(0, I)`:
/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε_θ(x_t, t)) / √α_t + √β_t·z`, `z = 0` at `t = 1`.
/// Each of the `shape[0]` chains draws its noise from its own stream seeded
/// from `rng`. Returns `x_0` in the signed data space (unclamped).
pub fn reverse_chain(
    predictor: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    cond: Option<&Tensor>,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    let n = shape[0];
    if n == 0 {
        return Err(Error::invalid("at least one sample is required"));
    }
    let inner = shape[1..].to_vec();
    let per: usize = inner.iter().product();
    let mut chains: Vec<ChaCha8Rng> = (0..n)
        .map(|_| ChaCha8Rng::seed_from_u64(rng.next_u64()))
        .collect();
    let mut x: Vec<f64> = Vec::with_capacity(n * per);
    for r in &mut chains {
        x.extend((0..per).map(|_| r.sample::<f64, _>(StandardNormal)));
    }
    for t in (1..=schedule.steps).rev() {
        let xt = Tensor::from_parts(shape.to_vec(), x);
        let eps = predictor.predict_eps(&xt, &vec![t; n], cond)?;
        if eps.shape() != shape {
            return Err(Error::shape(
                "reverse_chain",
                format!("{:?} vs {shape:?}", eps.shape()),
            ));
        }
        let (beta, alpha, ab) = (
            schedule.beta[t - 1],
            schedule.alpha[t - 1],
            schedule.alpha_bar[t - 1],
        );
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let sigma = beta.sqrt();
        x = xt.into_data();
        for (c, r) in chains.iter_mut().enumerate() {
            for k in c * per..(c + 1) * per {
                let mean = inv * (x[k] - coef * eps.data()[k]);
                x[k] = if t > 1 {
                    mean + sigma * r.sample::<f64, _>(StandardNormal)
                } else {
                    mean
                };
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("reverse chain at step {t}")));
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), x))
}

/// `n` images of `channels × size × size`, in `[0, 1]`.
pub fn sample(
    model: &DiffusionModel,
    n: usize,
    size: usize,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    if model.mode != DiffusionMode::Generative {
        return Err(Error::invalid(
            "sampling images needs a generative-mode model",
        ));
    }
    if !model.trained {
        return Err(Error::invalid("diffusion model has not been trained"));
    }
    sample_untrained(model, n, size, rng)
}

/// Like [`sample`] but without the trained check, for reference runs.
pub fn sample_untrained(
    model: &DiffusionModel,
    n: usize,
    size: usize,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    let shape = [n, model.channels(), size, size];
    Ok(to_unit(&reverse_chain(
        model,
        &model.schedule,
        &shape,
        None,
        rng,
    )?))
}

/// Masks (one `H·W` vector of 0/1 per image) from the reverse chain on the
/// mask channel, conditioned on `images` in `[0, 1]`. The final estimate is
/// thresholded at 0.5 in unit space.
pub fn ddpm_segment(
    model: &DiffusionModel,
    images: &Tensor,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<u8>>> {
    if model.mode != DiffusionMode::Segmentation {
        return Err(Error::invalid(
            "segmentation needs a segmentation-mode model",
        ));
    }
    segment_with(model, &model.schedule, images, rng)
}

/// Segmentation with any predictor; the image is passed in signed space.
pub fn segment_with(
    predictor: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    images: &Tensor,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<u8>>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(
            "ddpm_segment",
            format!("expected [N,3,H,W], got {s:?}"),
        ));
    }
    let cond = to_signed(images);
    let x0 = reverse_chain(
        predictor,
        schedule,
        &[s[0], 1, s[2], s[3]],
        Some(&cond),
        rng,
    )?;
    let hw = s[2] * s[3];
    Ok(x0
        .data()
        .chunks(hw)
        .map(|c| c.iter().map(|&v| u8::from((v + 1.0) / 2.0 > 0.5)).collect())
        .collect())
}

/// Writes `[N, C, H, W]` images in `[0, 1]` as a PNG grid with `cols` columns.
/// One-channel images are written as gray.
pub fn export_grid_png(images: &Tensor, cols: usize, path: &Path) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || !(s[1] == 1 || s[1] == 3) || s[0] == 0 {
        return Err(Error::shape(
            "export_grid_png",
            format!("expected [N,1|3,H,W], got {s:?}"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = cols.clamp(1, n);
    let rows = n.div_ceil(cols);
    let pad = 2;
    let (gw, gh) = (cols * (w + pad) + pad, rows * (h + pad) + pad);
    let mut img = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([255, 255, 255]));
    for i in 0..n {
        let (ox, oy) = (pad + (i % cols) * (w + pad), pad + (i / cols) * (h + pad));
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| {
                    let v = images.data()[((i * c + ch) * h + y) * w + x];
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                };
                let rgb = if c == 1 {
                    [px(0); 3]
                } else {
                    [px(0), px(1), px(2)]
                };
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(rgb));
            }
        }
    }
    img.save(path)?;
    Ok(())
}

pub const DDPM_NAME: &str = "DDPM";

/// Both diffusion models of one experiment.
pub struct DdpmRun {
    pub generator: DiffusionModel,
    pub segmenter: DiffusionModel,
    /// Generator samples the FID was computed on, in `[0, 1]`.
    pub samples: Tensor,
    pub record: MetricsRecord,
}

/// The generative model learns the unlabelled target adaptation images and
/// its samples are compared with the held-out target images by FID. The
/// segmentation model diffuses source masks conditioned on source images and
/// segments the held-out target images.
pub fn train_ddpm_on(
    data: &ExperimentData,
    cfg: &DdpmConfig,
    train: &TrainConfig,
    model_seed: u64,
) -> Result<DdpmRun> {
    let mut generator = DiffusionModel::new(cfg, DiffusionMode::Generative, 3, model_seed)?;
    let target = data.target_adapt.all_images()?;
    generator.fit(&to_signed(&target), None, train)?;

    let sources = data.pooled_sources()?;
    let patches = sources.labelled_patches()?;
    let masks = to_signed(&masks_tensor(&patches)?);
    let images = to_signed(&sources.all_images()?);
    let mut segmenter =
        DiffusionModel::new(cfg, DiffusionMode::Segmentation, 3, model_seed ^ 0x5E6)?;
    segmenter.fit(&masks, Some(&images), train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xD1FF);
    let eval = data.target_eval.labelled_patches()?;
    let real = data.target_eval.all_images()?;
    let size = real.shape()[2];
    let generated = sample(&generator, eval.len(), size, &mut rng)?;
    let fid = image_fid(&real, &generated, Embedder::RawDownsample)?;
    let mut counts = PixelCounts::default();
    for (chunk, start) in eval.chunks(8).zip((0..).step_by(8)) {
        let x = real.slice_outer(start, chunk.len())?;
        for (pred, p) in ddpm_segment(&segmenter, &x, &mut rng)?.iter().zip(chunk) {
            counts.add(&PixelCounts::from_masks(pred, &p.mask)?);
        }
    }
    Ok(DdpmRun {
        generator,
        segmenter,
        samples: generated,
        record: MetricsRecord::new(DDPM_NAME, Fid::Value(fid), &counts),
    })
}

/// Two-mode toy distribution of 1-channel `size × size` images in `[0, 1]`:
/// half bright on the left, half bright on the top, with a little noise.
pub fn toy_two_mode(n: usize, size: usize, rng: &mut dyn RngCore) -> Tensor {
    let mut data = Vec::with_capacity(n * size * size);
    for i in 0..n {
        let vertical = i % 2 == 0;
        for y in 0..size {
            for x in 0..size {
                let bright = if vertical { x < size / 2 } else { y < size / 2 };
                let base = if bright { 0.8 } else { 0.2 };
                let jitter: f64 = rng.sample(StandardNormal);
                data.push((base + 0.05 * jitter).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_parts(vec![n, 1, size, size], data)
}
