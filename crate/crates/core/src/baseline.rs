//! Source-only Monte-Carlo-dropout UNet.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::data::{model_input, shuffled_batches, DomainSet};
use crate::error::{Error, Result};
use crate::metrics::{Fid, MetricsRecord, PixelCounts};
use crate::nn::{train_epoch, EpochStats, Mode, Model, Optimizer, TrainConfig, UNetConfig};
use crate::partition::{DomainPartition, ExperimentConfig, ExperimentData};
use crate::tensor::Tensor;
use crate::uncertainty::mc_forward;

pub const BASELINE_NAME: &str = "MCD UNet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub unet: UNetConfig,
    /// Dropout passes averaged at prediction time.
    pub mc_samples: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            mc_samples: 16,
        }
    }
}

/// Cross-entropy training on every patch of `set` for `cfg.epochs` epochs.
pub fn train_segmenter(
    model: &mut Model,
    set: &DomainSet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("no training patches"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::from_config(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batches = shuffled_batches(set.len(), cfg.batch_size, &mut rng)
            .into_iter()
            .map(|idx| Ok((set.inputs(&idx)?, set.onehot(&idx)?)))
            .collect::<Result<Vec<(Tensor, Tensor)>>>()?;
        let net = model.clone();
        let stats = train_epoch(
            &mut model.params,
            &batches,
            &mut opt,
            &mut rng,
            |tape, p, (x, y), r| {
                let xv = tape.constant(x.clone());
                let logits = net.forward_on(tape, p, xv, None, Mode::Train, r)?;
                let yv = tape.constant(y.clone());
                tape.cross_entropy(logits, yv)
            },
        )?;
        history.push(stats);
    }
    Ok(history)
}

/// Class-1 decision from two-channel probabilities: foreground where its
/// probability is strictly above 0.5 (ties fall to background).
pub fn threshold_probs(probs: &Tensor) -> Result<Vec<Vec<u8>>> {
    let s = probs.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::shape(
            "threshold",
            format!("expected [N,2,H,W], got {s:?}"),
        ));
    }
    let hw = s[2] * s[3];
    Ok((0..s[0])
        .map(|i| {
            let base = i * 2 * hw;
            let (bg, fg) = (
                &probs.data()[base..base + hw],
                &probs.data()[base + hw..base + 2 * hw],
            );
            bg.iter().zip(fg).map(|(b, f)| u8::from(f > b)).collect()
        })
        .collect())
}

/// Mean of `m` dropout-sampled probability maps, thresholded. One mask per
/// image; `inputs` are network inputs as built by [`model_input`].
pub fn predict_mask(
    model: &Model,
    inputs: &Tensor,
    m: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<u8>>> {
    let samples = mc_forward(model, inputs, m, rng)?;
    threshold_probs(&samples.mean())
}

/// Pixel counts of MC-averaged predictions against the set's masks.
pub fn evaluate_segmenter(
    model: &Model,
    set: &DomainSet,
    m: usize,
    seed: u64,
) -> Result<PixelCounts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = set.labelled_patches()?;
    let mut counts = PixelCounts::default();
    for chunk in patches.chunks(8) {
        let x = model_input(chunk)?;
        let preds = predict_mask(model, &x, m, &mut rng)?;
        for (pred, p) in preds.iter().zip(chunk) {
            counts.add(&PixelCounts::from_masks(pred, &p.mask)?);
        }
    }
    Ok(counts)
}

/// Trains on the pooled source domains and scores the target's held-out half.
/// The target adaptation half is never touched.
pub fn train_baseline(
    cohort: &Cohort,
    partition: &DomainPartition,
    exp: &ExperimentConfig,
    cfg: &BaselineConfig,
    model_seed: u64,
) -> Result<(Model, MetricsRecord)> {
    let data = ExperimentData::build(cohort, partition, exp)?;
    train_baseline_on(&data, exp, cfg, model_seed)
}

pub fn train_baseline_on(
    data: &ExperimentData,
    exp: &ExperimentConfig,
    cfg: &BaselineConfig,
    model_seed: u64,
) -> Result<(Model, MetricsRecord)> {
    let sources = data.pooled_sources()?;
    let mut model = Model::new(cfg.unet.clone(), model_seed)?;
    train_segmenter(&mut model, &sources, &exp.train)?;
    let counts = evaluate_segmenter(
        &model,
        &data.target_eval,
        cfg.mc_samples,
        exp.train.seed ^ 0xE7A1,
    )?;
    Ok((
        model,
        MetricsRecord::new(BASELINE_NAME, Fid::NotApplicable, &counts),
    ))
}
