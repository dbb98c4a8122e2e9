//! Multi-source domain-adversarial segmentation.
//!
//! One UNet encoder is shared by three kinds of heads:
//!
//! - the segmentation decoder (`dec*`, `head`), with skip connections;
//! - one discriminator per source (`disc{i}.*`) on the bottleneck: gradient
//!   reversal, sigmoid, conv3×3 + ReLU, global average pool, two-layer
//!   perceptron to source/target logits. The sigmoid bounds what the encoder
//!   can do to the domain loss; without it the reversed gradient inflates the
//!   bottleneck and the loss diverges;
//! - a reconstruction decoder (`recon.*`) without skips and with a sigmoid output,
//!   trained on target images with a small pixel loss. Its output is the
//!   "generated" image set used for FID.
//!
//! Per source `i` the step combines `task_i + domain_i` by max (hard) or by
//! `(1/γ)·ln Σ exp(γ·(task_i + domain_i))` (soft), then adds the weighted
//! reconstruction loss. The reversal strength ramps linearly from 0 to
//! `grl_lambda` over the warm-up fraction of all steps.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::evaluate_segmenter;
use crate::cohort::Cohort;
use crate::data::{centre, shuffled_batches, DomainSet};
use crate::error::{Error, Result};
use crate::metrics::{image_fid, Embedder, Fid, MetricsRecord};
use crate::nn::{
    conv, decode, encode, init_conv, init_decoder, init_encoder, init_linear, linear, Bound,
    Encoded, Mode, Model, Optimizer, Params, TrainConfig, UNetConfig,
};
use crate::partition::{DomainPartition, ExperimentConfig, ExperimentData};
use crate::tensor::{Tape, Tensor, Var};

pub const MDAN_NAME: &str = "MDAN";
const RECON: &str = "recon.";
const DISC_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Hard,
    #[default]
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdanConfig {
    pub unet: UNetConfig,
    pub grl_lambda: f64,
    /// Fraction of all steps over which the reversal strength ramps up.
    pub warmup_fraction: f64,
    pub aggregation: Aggregation,
    pub gamma: f64,
    pub recon_weight: f64,
    pub mc_samples: usize,
}

impl Default for MdanConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            grl_lambda: 1.0,
            warmup_fraction: 0.1,
            aggregation: Aggregation::Soft,
            gamma: 10.0,
            recon_weight: 0.1,
            mc_samples: 16,
        }
    }
}

impl MdanConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if !(self.grl_lambda >= 0.0) {
            return Err(Error::invalid("grl_lambda must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup_fraction must lie in [0, 1]"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("gamma must be positive"));
        }
        if !(self.recon_weight >= 0.0) {
            return Err(Error::invalid("recon_weight must be non-negative"));
        }
        if self.mc_samples == 0 {
            return Err(Error::invalid(
                "at least one Monte-Carlo sample is required",
            ));
        }
        Ok(())
    }
}

/// Shared encoder with task, discriminator and reconstruction heads in one
/// parameter map.
#[derive(Clone, Debug, PartialEq)]
pub struct MdanModel {
    pub config: MdanConfig,
    pub params: Params,
    pub sources: usize,
    pub seed: u64,
    pub trained: bool,
}

fn is_task_param(name: &str) -> bool {
    !name.starts_with("disc") && !name.starts_with(RECON)
}

impl MdanModel {
    pub fn new(config: MdanConfig, sources: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if sources == 0 {
            return Err(Error::invalid("at least one source domain is required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = &config.unet;
        let mut params = Params::new();
        init_encoder(&mut params, "", u, &mut rng);
        init_decoder(&mut params, "", u, true, u.out_channels, &mut rng);
        let c = u.channels(u.depth);
        for i in 0..sources {
            init_conv(
                &mut params,
                &format!("disc{i}.conv"),
                c,
                c,
                3,
                true,
                &mut rng,
            );
            init_linear(
                &mut params,
                &format!("disc{i}.hidden"),
                c,
                DISC_HIDDEN,
                &mut rng,
            );
            init_linear(
                &mut params,
                &format!("disc{i}.out"),
                DISC_HIDDEN,
                2,
                &mut rng,
            );
        }
        init_decoder(&mut params, RECON, u, false, 3, &mut rng);
        Ok(Self {
            config,
            params,
            sources,
            seed,
            trained: false,
        })
    }

    /// The encoder and segmentation decoder as a plain UNet.
    pub fn task_model(&self) -> Model {
        Model {
            config: self.config.unet.clone(),
            params: self
                .params
                .iter()
                .filter(|(k, _)| is_task_param(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            seed: self.seed,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Identity forward, `−λ·g` backward.
pub fn grl(tape: &mut Tape, features: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "gradient reversal lambda {lambda} < 0"
        )));
    }
    tape.grad_reverse(features, lambda)
}

/// Aggregates per-source `task_i + domain_i`: max (hard) or log-sum-exp at
/// temperature `gamma` (soft).
pub fn mdan_objective(task: &[f64], domain: &[f64], mode: Aggregation, gamma: f64) -> Result<f64> {
    check_terms(task.len(), domain.len(), mode, gamma)?;
    let combined: Vec<f64> = task.iter().zip(domain).map(|(t, d)| t + d).collect();
    let max = combined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(match mode {
        Aggregation::Hard => max,
        Aggregation::Soft => {
            max + combined
                .iter()
                .map(|c| (gamma * (c - max)).exp())
                .sum::<f64>()
                .ln()
                / gamma
        }
    })
}

fn check_terms(task: usize, domain: usize, mode: Aggregation, gamma: f64) -> Result<()> {
    if task == 0 || task != domain {
        return Err(Error::invalid(format!(
            "{task} task terms vs {domain} domain terms"
        )));
    }
    if mode == Aggregation::Soft && !(gamma > 0.0) {
        return Err(Error::invalid("soft aggregation needs gamma > 0"));
    }
    Ok(())
}

/// Tape version of [`mdan_objective`] over scalar vars.
fn objective_on(tape: &mut Tape, combined: &[Var], mode: Aggregation, gamma: f64) -> Result<Var> {
    check_terms(combined.len(), combined.len(), mode, gamma)?;
    let values: Vec<f64> = combined
        .iter()
        .map(|&v| tape.value(v).item())
        .collect::<Result<_>>()?;
    let (arg, max) =
        values
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            );
    match mode {
        Aggregation::Hard => Ok(combined[arg]),
        Aggregation::Soft => {
            // ln Σ exp(γ(c_i − m)) / γ + m, with the shift m held constant.
            let shift = tape.constant(Tensor::scalar(-max));
            let mut sum: Option<Var> = None;
            for &c in combined {
                let d = tape.add(c, shift)?;
                let e = tape.scale(d, gamma)?;
                let e = tape.exp(e)?;
                sum = Some(match sum {
                    None => e,
                    Some(s) => tape.add(s, e)?,
                });
            }
            let l = tape.log(sum.expect("non-empty"))?;
            let l = tape.scale(l, 1.0 / gamma)?;
            let m = tape.constant(Tensor::scalar(max));
            tape.add(l, m)
        }
    }
}

/// Labelled batches from every source plus an unlabelled target batch.
/// Images are network inputs (centred); `target_raw` is the target batch in
/// `[0, 1]` for the reconstruction loss.
pub struct MdanBatch {
    pub sources: Vec<(Tensor, Tensor)>,
    pub target: Tensor,
    pub target_raw: Tensor,
}

fn discriminate(tape: &mut Tape, p: &Bound, i: usize, enc: &Encoded, lambda: f64) -> Result<Var> {
    let h = grl(tape, enc.bottleneck, lambda)?;
    let h = tape.sigmoid(h)?;
    let h = conv(tape, p, &format!("disc{i}.conv"), h, 1, 1)?;
    let h = tape.relu(h)?;
    let h = tape.mean_axes(h, &[2, 3])?;
    let h = linear(tape, p, &format!("disc{i}.hidden"), h)?;
    let h = tape.relu(h)?;
    linear(tape, p, &format!("disc{i}.out"), h)
}

fn domain_labels(n: usize, target: bool) -> Tensor {
    let row = if target { [0.0, 1.0] } else { [1.0, 0.0] };
    Tensor::from_parts(
        vec![n, 2],
        row.iter().copied().cycle().take(2 * n).collect(),
    )
}

/// Per-step loss terms, for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTerms {
    pub task: Vec<f64>,
    pub domain: Vec<f64>,
    pub recon: f64,
    pub objective: f64,
}

/// Records one step's loss on `tape`. Without discriminators the domain
/// terms are zero and no discriminator is evaluated.
fn record_step(
    model: &MdanModel,
    tape: &mut Tape,
    p: &Bound,
    batch: &MdanBatch,
    lambda: f64,
    with_discriminators: bool,
    rng: &mut dyn RngCore,
) -> Result<(Var, StepTerms)> {
    if batch.sources.len() != model.sources {
        return Err(Error::invalid(format!(
            "{} source batches for a model with {} discriminators",
            batch.sources.len(),
            model.sources
        )));
    }
    let cfg = &model.config;
    let u = &cfg.unet;
    let xt = tape.constant(batch.target.clone());
    let enc_t = encode(tape, p, "", u, xt, None, Mode::Train, rng)?;
    let mut combined = Vec::with_capacity(model.sources);
    let mut terms = StepTerms {
        task: Vec::new(),
        domain: Vec::new(),
        recon: 0.0,
        objective: 0.0,
    };
    for (i, (x, y)) in batch.sources.iter().enumerate() {
        let xv = tape.constant(x.clone());
        let enc = encode(tape, p, "", u, xv, None, Mode::Train, rng)?;
        let logits = decode(tape, p, "", u, &enc, true, Mode::Train, rng)?;
        let yv = tape.constant(y.clone());
        let task = tape.cross_entropy(logits, yv)?;
        terms.task.push(tape.value(task).item()?);
        if with_discriminators {
            let ds = discriminate(tape, p, i, &enc, lambda)?;
            let dt = discriminate(tape, p, i, &enc_t, lambda)?;
            let ls = tape.constant(domain_labels(x.shape()[0], false));
            let lt = tape.constant(domain_labels(batch.target.shape()[0], true));
            let a = tape.cross_entropy(ds, ls)?;
            let b = tape.cross_entropy(dt, lt)?;
            let dom = tape.add(a, b)?;
            let dom = tape.scale(dom, 0.5)?;
            terms.domain.push(tape.value(dom).item()?);
            combined.push(tape.add(task, dom)?);
        } else {
            terms.domain.push(0.0);
            combined.push(task);
        }
    }
    let mut loss = objective_on(tape, &combined, cfg.aggregation, cfg.gamma)?;
    terms.objective = tape.value(loss).item()?;
    if cfg.recon_weight > 0.0 {
        let r = decode(tape, p, RECON, u, &enc_t, false, Mode::Train, rng)?;
        let r = tape.sigmoid(r)?;
        let target = tape.constant(batch.target_raw.clone());
        let mse = tape.mse(r, target)?;
        terms.recon = tape.value(mse).item()?;
        let w = tape.scale(mse, cfg.recon_weight)?;
        loss = tape.add(loss, w)?;
    }
    Ok((loss, terms))
}

/// Loss value and gradients of one step, without updating the model.
pub fn step_gradients(
    model: &MdanModel,
    batch: &MdanBatch,
    lambda: f64,
    with_discriminators: bool,
    rng: &mut dyn RngCore,
) -> Result<(f64, Params)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&model.params, &mut tape, true);
    let (loss, _) = record_step(
        model,
        &mut tape,
        &bound,
        batch,
        lambda,
        with_discriminators,
        rng,
    )?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.collect(&mut grads)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdanEpoch {
    pub objective: f64,
    pub task: f64,
    pub domain: f64,
    pub recon: f64,
}

/// `ceil(pooled source patches / batch_size)` steps per epoch, each drawing
/// `ceil(batch_size / k)` patches from every source and from the target.
pub fn fit_mdan(
    model: &mut MdanModel,
    sources: &[DomainSet],
    target: &DomainSet,
    train: &TrainConfig,
) -> Result<Vec<MdanEpoch>> {
    train.validate()?;
    if sources.len() != model.sources {
        return Err(Error::invalid(
            "source count does not match the discriminators",
        ));
    }
    if target.is_empty() {
        return Err(Error::invalid("empty target domain"));
    }
    if sources.iter().any(DomainSet::is_empty) {
        return Err(Error::invalid("a source domain has no patches"));
    }
    let k = sources.len();
    let pooled: usize = sources.iter().map(DomainSet::len).sum();
    let per = train.batch_size.div_ceil(k);
    let steps = pooled.div_ceil(train.batch_size);
    let total = steps * train.epochs;
    let warm = (model.config.warmup_fraction * total as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut opt = Optimizer::from_config(train);
    let mut cursors: Vec<Cursor> = sources.iter().map(|s| Cursor::new(s.len())).collect();
    let mut tcur = Cursor::new(target.len());
    let mut history = Vec::with_capacity(train.epochs);
    let mut step = 0usize;
    for _ in 0..train.epochs {
        let mut acc = MdanEpoch {
            objective: 0.0,
            task: 0.0,
            domain: 0.0,
            recon: 0.0,
        };
        for _ in 0..steps {
            let lambda = if warm == 0 {
                model.config.grl_lambda
            } else {
                model.config.grl_lambda * (step as f64 / warm as f64).min(1.0)
            };
            let mut src = Vec::with_capacity(k);
            for (s, c) in sources.iter().zip(&mut cursors) {
                let idx = c.take(per, &mut rng);
                src.push((s.inputs(&idx)?, s.onehot(&idx)?));
            }
            let tidx = tcur.take(per, &mut rng);
            let raw = target.images(&tidx)?;
            let batch = MdanBatch {
                sources: src,
                target: centre(&raw),
                target_raw: raw,
            };
            let mut tape = Tape::new();
            let bound = Bound::new(&model.params, &mut tape, true);
            let (loss, terms) =
                record_step(model, &mut tape, &bound, &batch, lambda, true, &mut rng)?;
            if !terms.objective.is_finite() || !tape.value(loss).item()?.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("MDAN step {step}"),
                    value: terms.objective,
                });
            }
            let mut grads = tape.backward(loss)?;
            let grads = bound.collect(&mut grads);
            opt.step(&mut model.params, &grads)?;
            acc.objective += terms.objective;
            acc.task += terms.task.iter().sum::<f64>() / k as f64;
            acc.domain += terms.domain.iter().sum::<f64>() / k as f64;
            acc.recon += terms.recon;
            step += 1;
        }
        let n = steps as f64;
        acc.objective /= n;
        acc.task /= n;
        acc.domain /= n;
        acc.recon /= n;
        history.push(acc);
    }
    model.trained = true;
    Ok(history)
}

/// Walks a reshuffled permutation, refilling it when exhausted.
struct Cursor {
    n: usize,
    order: Vec<usize>,
}

impl Cursor {
    fn new(n: usize) -> Self {
        Self {
            n,
            order: Vec::new(),
        }
    }

    fn take(&mut self, k: usize, rng: &mut dyn RngCore) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.order.is_empty() {
                self.order = shuffled_batches(self.n, self.n, rng).concat();
                self.order.reverse();
            }
            out.push(self.order.pop().expect("refilled"));
        }
        out
    }
}

/// Eval-mode reconstructions in `[0, 1]` of images given in `[0, 1]`.
pub fn reconstruct_target(model: &MdanModel, images: &Tensor) -> Result<Tensor> {
    if !model.trained {
        return Err(Error::invalid("MDAN model has not been trained"));
    }
    if !model.params.contains_key(&format!("{RECON}head.w")) {
        return Err(Error::invalid("model has no reconstruction head"));
    }
    let u = &model.config.unet;
    let mut tape = Tape::new();
    let p = Bound::new(&model.params, &mut tape, false);
    let x = tape.constant(centre(images));
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    let enc = encode(&mut tape, &p, "", u, x, None, Mode::Eval, &mut no_rng)?;
    let r = decode(
        &mut tape,
        &p,
        RECON,
        u,
        &enc,
        false,
        Mode::Eval,
        &mut no_rng,
    )?;
    let r = tape.sigmoid(r)?;
    Ok(tape.value(r).clone())
}

/// Fraction of patches that discriminator `i` assigns to the right domain.
pub fn domain_accuracy(
    model: &MdanModel,
    i: usize,
    source: &Tensor,
    target: &Tensor,
) -> Result<f64> {
    if i >= model.sources {
        return Err(Error::invalid(format!("no discriminator {i}")));
    }
    let u = &model.config.unet;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (images, is_target) in [(source, false), (target, true)] {
        let mut tape = Tape::new();
        let p = Bound::new(&model.params, &mut tape, false);
        let x = tape.constant(images.clone());
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let enc = encode(&mut tape, &p, "", u, x, None, Mode::Eval, &mut no_rng)?;
        let logits = discriminate(&mut tape, &p, i, &enc, 0.0)?;
        for row in tape.value(logits).data().chunks(2) {
            correct += usize::from((row[1] > row[0]) == is_target);
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Everything one combination produces.
pub struct MdanRun {
    pub model: MdanModel,
    pub record: MetricsRecord,
    pub history: Vec<MdanEpoch>,
    /// Reconstructions of the target adaptation images, in `[0, 1]`.
    pub reconstructions: Tensor,
}

/// Trains on the experiment's sources with the target adaptation half as
/// unlabelled data; scores the held-out half.
pub fn train_mdan(
    cohort: &Cohort,
    partition: &DomainPartition,
    exp: &ExperimentConfig,
    cfg: &MdanConfig,
    model_seed: u64,
) -> Result<MdanRun> {
    let data = ExperimentData::build(cohort, partition, exp)?;
    train_mdan_on(&data, exp, cfg, model_seed)
}

pub fn train_mdan_on(
    data: &ExperimentData,
    exp: &ExperimentConfig,
    cfg: &MdanConfig,
    model_seed: u64,
) -> Result<MdanRun> {
    let mut model = MdanModel::new(cfg.clone(), data.sources.len(), model_seed)?;
    let history = fit_mdan(&mut model, &data.sources, &data.target_adapt, &exp.train)?;
    let counts = evaluate_segmenter(
        &model.task_model(),
        &data.target_eval,
        cfg.mc_samples,
        exp.train.seed ^ 0xE7A1,
    )?;
    let reconstructions = reconstruct_target(&model, &data.target_adapt.all_images()?)?;
    let fid = image_fid(
        &data.target_eval.all_images()?,
        &reconstructions,
        Embedder::RawDownsample,
    )?;
    Ok(MdanRun {
        model,
        record: MetricsRecord::new(MDAN_NAME, Fid::Value(fid), &counts),
        history,
        reconstructions,
    })
}
