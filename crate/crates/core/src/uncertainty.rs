//! Monte-Carlo dropout and the expected predictive entropy
//! `(1/M) Σ_m [−Σ_y p(y|z_m,x) ln p(y|z_m,x)]`, in nats.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::train_segmenter;
use crate::cohort::{Cohort, PatientRecord};
use crate::data::{model_input, DomainSet};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model, OptimizerKind, TrainConfig, UNetConfig};
use crate::tensor::{Tape, Tensor};

/// Patches pushed through the network at once when scoring a patient.
const SCORE_CHUNK: usize = 8;

/// Class probabilities of `M` dropout passes, shape `M × N × C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct McSampleSet {
    pub shape: [usize; 5],
    pub probs: Vec<f64>,
}

impl McSampleSet {
    pub fn new(shape: [usize; 5], probs: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != probs.len() {
            return Err(Error::shape(
                "mc_samples",
                format!("{shape:?} vs {} values", probs.len()),
            ));
        }
        Ok(Self { shape, probs })
    }

    pub fn samples(&self) -> usize {
        self.shape[0]
    }

    /// One pass as `[N, C, H, W]`.
    pub fn sample(&self, m: usize) -> Tensor {
        let per = self.probs.len() / self.shape[0];
        Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.probs[m * per..(m + 1) * per].to_vec(),
        )
    }

    /// Mean over passes, `[N, C, H, W]`.
    pub fn mean(&self) -> Tensor {
        let m = self.shape[0];
        let per = self.probs.len() / m;
        let mut out = vec![0.0; per];
        for k in 0..m {
            for (o, p) in out.iter_mut().zip(&self.probs[k * per..(k + 1) * per]) {
                *o += p;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Tensor::from_parts(self.shape[1..].to_vec(), out)
    }
}

fn softmax_channels(logits: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(logits);
    let s = tape.softmax(v)?;
    Ok(tape.value(s).clone())
}

/// `M` train-mode forward passes with softmax over classes. Each pass draws
/// its dropout masks from its own stream seeded from `rng`, so the result does
/// not depend on the order the passes run in.
pub fn mc_forward(
    model: &Model,
    x: &Tensor,
    m: usize,
    rng: &mut dyn RngCore,
) -> Result<McSampleSet> {
    if m == 0 {
        return Err(Error::invalid(
            "at least one Monte-Carlo sample is required",
        ));
    }
    let seeds: Vec<u64> = (0..m).map(|_| rng.next_u64()).collect();
    let passes = seeds
        .par_iter()
        .map(|&s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            softmax_channels(model.forward(x, Mode::Train, &mut r)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let inner = passes[0].shape();
    if inner.len() != 4 {
        return Err(Error::shape(
            "mc_forward",
            format!("expected NCHW logits, got {inner:?}"),
        ));
    }
    let shape = [m, inner[0], inner[1], inner[2], inner[3]];
    let probs = passes.into_iter().flat_map(Tensor::into_data).collect();
    McSampleSet::new(shape, probs)
}

/// Per-pixel expected entropy (`N × H × W`) and its mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
    pub mean: f64,
}

impl EntropyMap {
    /// Mean entropy of each of the `N` images.
    pub fn per_image(&self) -> Vec<f64> {
        let hw = self.shape[1] * self.shape[2];
        self.values
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect()
    }
}

pub fn expected_entropy(samples: &McSampleSet) -> EntropyMap {
    let [m, n, c, h, w] = samples.shape;
    let hw = h * w;
    let mut values = vec![0.0; n * hw];
    for k in 0..m {
        for i in 0..n {
            let base = (k * n + i) * c * hw;
            for px in 0..hw {
                let mut e = 0.0;
                for ch in 0..c {
                    let p = samples.probs[base + ch * hw + px];
                    if p > 0.0 {
                        e -= p * p.ln();
                    }
                }
                values[i * hw + px] += e;
            }
        }
    }
    for v in &mut values {
        *v /= m as f64;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    EntropyMap {
        shape: [n, h, w],
        values,
        mean,
    }
}

/// Mean over the patient's patches of the per-patch expected entropy.
pub fn patient_uncertainty(
    model: &Model,
    patient: &PatientRecord,
    m: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if patient.patches.is_empty() {
        return Err(Error::invalid(format!(
            "patient {} has no patches",
            patient.patient_id
        )));
    }
    let mut total = 0.0;
    for chunk in patient.patches.chunks(SCORE_CHUNK) {
        let refs: Vec<_> = chunk.iter().collect();
        let x = model_input(&refs)?;
        let samples = mc_forward(model, &x, m, rng)?;
        total += expected_entropy(&samples).per_image().iter().sum::<f64>();
    }
    Ok(total / patient.patches.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientEntropy {
    pub patient_id: String,
    pub entropy: f64,
    pub patches: usize,
}

/// Patients sorted by descending entropy, ties broken by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub entries: Vec<PatientEntropy>,
}

const REPORT_HEADER: &str = "patient_id\tentropy_nats\tpatches";

impl UncertaintyReport {
    pub fn from_entries(mut entries: Vec<PatientEntropy>) -> Self {
        entries.sort_by(|a, b| {
            b.entropy
                .total_cmp(&a.entropy)
                .then_with(|| a.patient_id.cmp(&b.patient_id))
        });
        Self { entries }
    }

    /// `max / min` entropy; `None` when the minimum is not positive.
    pub fn ratio(&self) -> Option<f64> {
        let max = self.entries.first()?.entropy;
        let min = self.entries.last()?.entropy;
        (min > 0.0).then(|| max / min)
    }

    pub fn entropy_of(&self, id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.patient_id == id)
            .map(|e| e.entropy)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.patient_id, e.entropy, e.patches));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::Corrupt("uncertainty report header missing".into()));
        }
        let entries = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let cols: Vec<&str> = line.split('\t').collect();
                let bad = || Error::Corrupt(format!("uncertainty row `{line}`"));
                let [id, e, n] = cols[..] else {
                    return Err(bad());
                };
                Ok(PatientEntropy {
                    patient_id: id.to_string(),
                    entropy: e.parse().map_err(|_| bad())?,
                    patches: n.parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_entries(entries))
    }
}

/// Scores every patient. Each patient's passes use a stream seeded from `rng`
/// in cohort order.
pub fn rank_patients(
    cohort: &Cohort,
    model: &Model,
    m: usize,
    rng: &mut dyn RngCore,
) -> Result<UncertaintyReport> {
    if cohort.patients.is_empty() {
        return Err(Error::invalid("cohort has no patients"));
    }
    let seeds: Vec<u64> = cohort.patients.iter().map(|_| rng.next_u64()).collect();
    let entries = cohort
        .patients
        .iter()
        .zip(seeds)
        .map(|(p, s)| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            Ok(PatientEntropy {
                patient_id: p.patient_id.clone(),
                entropy: patient_uncertainty(model, p, m, &mut r)?,
                patches: p.patches.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UncertaintyReport::from_entries(entries))
}

/// How the model that scores patients is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub unet: UNetConfig,
    pub train: TrainConfig,
    /// Training uses at most this many patches per patient; 0 means all.
    pub patches_per_patient: usize,
    pub mc_samples: usize,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig {
                base_channels: 4,
                dropout_rate: 0.05,
                ..UNetConfig::default()
            },
            train: TrainConfig {
                epochs: 50,
                learning_rate: 0.03,
                batch_size: 4,
                seed: 11,
                optimizer: OptimizerKind::Sgd,
                momentum: 0.9,
            },
            patches_per_patient: 4,
            mc_samples: 16,
        }
    }
}

/// Trains the scoring network on the first patches of every patient.
pub fn fit_uncertainty_model(
    cohort: &Cohort,
    cfg: &UncertaintyConfig,
    model_seed: u64,
) -> Result<Model> {
    let mut patches = Vec::new();
    let mut owners = Vec::new();
    for p in &cohort.patients {
        let take = match cfg.patches_per_patient {
            0 => p.patches.len(),
            n => n.min(p.patches.len()),
        };
        for patch in &p.patches[..take] {
            patches.push(patch.clone());
            owners.push(p.patient_id.clone());
        }
    }
    let set = DomainSet::new("cohort", patches, owners)?;
    let mut model = Model::new(cfg.unet.clone(), model_seed)?;
    train_segmenter(&mut model, &set, &cfg.train)?;
    Ok(model)
}
