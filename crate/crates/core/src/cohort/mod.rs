//! Synthetic histology-like patient cohorts.
//!
//! Each patient gets a latent `u ∈ [0, 1]` (a jittered stratified draw, so
//! latents spread evenly over the cohort). Through the heterogeneity knob the
//! latent raises the patient's noise level, fades eosinophils towards the
//! stroma colour and partly sets the eosinophil density; through the domain-shift knob it shifts the stain
//! (hue, saturation, brightness). Noisy
//! patients are the ones a segmentation model is unsure about, so sorting by
//! uncertainty recovers the latent and tertiles become stain-shifted domains.

mod color;
mod container;
mod render;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use color::{circular_mean_hue, hsv_to_rgb, hue_distance, rgb_to_hsv};
pub use container::{load_cohort, save_cohort, COHORT_VERSION};
pub use render::{render_patch, PatientParams, RenderedPatch, Tissue};

use crate::error::{Error, Result};

/// The patient that carries the large patch count under the default profile.
pub const LARGE_PATIENT_INDEX: usize = 16;
pub const LARGE_PATIENT_PATCHES: usize = 71;
pub const TYPICAL_PATIENT_PATCHES: usize = 10;
/// Contrast lost by the most uncertain patient at full heterogeneity.
const FADE: f64 = 0.9;
/// Share of the density draw taken from the latent at full heterogeneity.
const DENSITY_COUPLING: f64 = 0.6;
/// Eosinophils per patch at or above which a patient meets the diagnostic rule.
pub const DIAGNOSTIC_THRESHOLD: u32 = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub total_patches: usize,
    pub patch_size: usize,
    /// Explicit per-patient counts; `None` selects the default profile.
    pub patch_count_profile: Option<Vec<usize>>,
    /// Band the per-patient stroma hue is drawn from.
    pub stain_hue: [f64; 2],
    /// Range of expected eosinophils per patch.
    pub cell_density: [f64; 2],
    pub noise_level: [f64; 2],
    /// 0 gives every patient the mid-range noise, 1 spreads noise over the full range.
    pub uncertainty_heterogeneity: f64,
    /// Strength of the latent-coupled stain shift.
    pub domain_shift: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_patients: 30,
            total_patches: 514,
            patch_size: 64,
            patch_count_profile: None,
            stain_hue: [0.88, 0.96],
            cell_density: [1.0, 22.0],
            noise_level: [0.01, 0.50],
            uncertainty_heterogeneity: 1.0,
            domain_shift: 0.5,
            seed: 2024,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] >= lo && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::invalid(format!(
            "{name} range {r:?} must be ordered within [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 3 {
            return Err(Error::invalid("a cohort needs at least 3 patients"));
        }
        if self.patch_size < 16 {
            return Err(Error::invalid("patch size must be at least 16"));
        }
        check_range("stain_hue", self.stain_hue, 0.0, 1.0)?;
        check_range("cell_density", self.cell_density, 0.0, 200.0)?;
        check_range("noise_level", self.noise_level, 0.0, 1.0)?;
        if !(0.0..=1.0).contains(&self.uncertainty_heterogeneity) {
            return Err(Error::invalid(
                "uncertainty_heterogeneity must lie in [0, 1]",
            ));
        }
        if !(0.0..=4.0).contains(&self.domain_shift) {
            return Err(Error::invalid("domain_shift must lie in [0, 4]"));
        }
        self.patch_counts().map(|_| ())
    }

    /// Per-patient patch counts. The default profile gives patient
    /// [`LARGE_PATIENT_INDEX`] 71 patches and everyone else 10, spreading any
    /// surplus over every third remaining patient. When that does not fit,
    /// counts are split as evenly as possible.
    pub fn patch_counts(&self) -> Result<Vec<usize>> {
        let n = self.n_patients;
        let total = self.total_patches;
        if let Some(p) = &self.patch_count_profile {
            if p.len() != n {
                return Err(Error::invalid(format!(
                    "profile lists {} patients, spec has {n}",
                    p.len()
                )));
            }
            if p.iter().any(|&c| c == 0) {
                return Err(Error::invalid("every patient needs at least one patch"));
            }
            let sum: usize = p.iter().sum();
            if sum != total {
                return Err(Error::invalid(format!(
                    "profile sums to {sum}, expected {total}"
                )));
            }
            return Ok(p.clone());
        }
        if total < n {
            return Err(Error::invalid(format!(
                "{total} patches cannot cover {n} patients"
            )));
        }
        let large = LARGE_PATIENT_INDEX.min(n - 1);
        let base = LARGE_PATIENT_PATCHES + TYPICAL_PATIENT_PATCHES * (n - 1);
        if total >= base {
            let mut counts = vec![TYPICAL_PATIENT_PATCHES; n];
            counts[large] = LARGE_PATIENT_PATCHES;
            let receivers: Vec<usize> = (0..n).filter(|&i| i != large).step_by(3).collect();
            let surplus = total - base;
            let (each, rem) = (surplus / receivers.len(), surplus % receivers.len());
            for (k, &i) in receivers.iter().enumerate() {
                counts[i] += each + usize::from(k < rem);
            }
            return Ok(counts);
        }
        let (each, rem) = (total / n, total % n);
        Ok((0..n).map(|i| each + usize::from(i < rem)).collect())
    }
}

/// One rendered patch. `image` is row-major `H×W×3` in `[0, 1]`; `mask` is
/// `H×W` with values 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
    pub eos_count: u32,
}

impl Patch {
    /// Image in channel-major `3×H×W` order.
    pub fn image_chw(&self) -> Vec<f64> {
        let n = self.size * self.size;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.image.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub params: PatientParams,
    pub patches: Vec<Patch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    pub fn total_patches(&self) -> usize {
        self.patients.iter().map(|p| p.patches.len()).sum()
    }
}

pub fn patient_id(index: usize) -> String {
    format!("E-{:03}", index + 1)
}

fn patient_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn lerp(r: [f64; 2], t: f64) -> f64 {
    r[0] + (r[1] - r[0]) * t
}

/// Derives every patient's appearance parameters. Latents come from the
/// seed's master stream; everything else from the patient's own stream.
pub fn patient_params(spec: &CohortSpec) -> Vec<PatientParams> {
    let n = spec.n_patients;
    let mut master = patient_rng(spec.seed, 0);
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(&mut master);
    let latents: Vec<f64> = strata
        .iter()
        .map(|&k| (k as f64 + master.gen_range(0.0..1.0)) / n as f64)
        .collect();
    let centre = 0.5 * (spec.noise_level[0] + spec.noise_level[1]);
    latents
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let mut rng = patient_rng(spec.seed, i as u64 + 1);
            let h = spec.uncertainty_heterogeneity;
            let noise = centre + h * (lerp(spec.noise_level, u * u) - centre);
            let shift = spec.domain_shift * (u - 0.5);
            let hue = rng.gen_range(spec.stain_hue[0]..=spec.stain_hue[1]);
            PatientParams {
                stroma_hue: (hue + 0.03 * shift).rem_euclid(1.0),
                saturation_gain: (1.0 + 0.5 * shift + rng.gen_range(-0.05..0.05)).max(0.1),
                brightness: (1.0 - 0.2 * shift + rng.gen_range(-0.03..0.03)).clamp(0.3, 1.15),
                eos_density: lerp(
                    spec.cell_density,
                    h * DENSITY_COUPLING * u
                        + (1.0 - h * DENSITY_COUPLING) * rng.gen_range(0.0..=1.0),
                ),
                nuclei_density: rng.gen_range(8.0..16.0),
                noise_level: noise,
                eos_contrast: 1.0 - FADE * h * u.powf(1.5),
                latent: u,
                patch_size: spec.patch_size,
            }
        })
        .collect()
}

/// Renders a full cohort. Output depends only on the `CohortSpec`, not on how the
/// per-patient work is scheduled.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let counts = spec.patch_counts()?;
    let params = patient_params(spec);
    let patients = params
        .into_par_iter()
        .zip(counts.into_par_iter())
        .enumerate()
        .map(|(i, (params, count))| {
            // the parameter draws used stream i+1; patch rendering continues on a
            // separate stream block so the two never overlap
            let mut rng = patient_rng(spec.seed, (1 << 32) + i as u64);
            let patches = (0..count)
                .map(|_| render_patch(&params, &mut rng).map(|r| r.patch))
                .collect::<Result<Vec<_>>>()?;
            Ok(PatientRecord {
                patient_id: patient_id(i),
                params,
                patches,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        spec: spec.clone(),
        patients,
    })
}

/// Whether any patch holds at least [`DIAGNOSTIC_THRESHOLD`] eosinophils.
pub fn diagnostic_flag(patient: &PatientRecord) -> Result<bool> {
    eos_flag(patient.patches.iter().map(|p| p.eos_count))
}

/// The diagnostic rule on raw per-patch counts.
pub fn eos_flag(counts: impl IntoIterator<Item = u32>) -> Result<bool> {
    counts
        .into_iter()
        .max()
        .map(|m| m >= DIAGNOSTIC_THRESHOLD)
        .ok_or_else(|| Error::invalid("patient has no patches"))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the patch as a PNG with the image on the left and its mask on the right.
pub fn export_patch_png(patch: &Patch, path: &Path) -> Result<()> {
    let s = patch.size as u32;
    let mut img = image::RgbImage::new(2 * s, s);
    for y in 0..s {
        for x in 0..s {
            let i = (y * s + x) as usize;
            let px = &patch.image[3 * i..3 * i + 3];
            img.put_pixel(x, y, image::Rgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]));
            let m = if patch.mask[i] != 0 { 255 } else { 0 };
            img.put_pixel(s + x, y, image::Rgb([m, m, m]));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
