use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::color::hsv_to_rgb;
use super::Patch;
use crate::error::{Error, Result};

/// Appearance parameters of one patient, drawn once at generation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    /// Stroma hue after the patient's stain shift, in `[0, 1)`.
    pub stroma_hue: f64,
    pub saturation_gain: f64,
    pub brightness: f64,
    /// Expected eosinophils per patch (Poisson mean).
    pub eos_density: f64,
    /// Expected nuclei per 64×64 area.
    pub nuclei_density: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise_level: f64,
    /// 1 paints eosinophils in full colour, 0 paints them as the stroma beneath.
    pub eos_contrast: f64,
    /// Latent in `[0, 1]` that drives noise and stain shift together.
    pub latent: f64,
    pub patch_size: usize,
}

/// What each pixel was painted as, before noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tissue {
    Stroma,
    Nucleus,
    Eosinophil,
}

#[derive(Clone, Debug)]
pub struct RenderedPatch {
    pub patch: Patch,
    pub tissue: Vec<Tissue>,
}

const NUCLEUS_HUE: f64 = 0.74;
const EOSINOPHIL_HUE: f64 = 0.99;
/// Minimum pixel gap between eosinophil discs so blobs never touch.
const BLOB_GAP: f64 = 2.0;
const PLACEMENT_ATTEMPTS: usize = 200;

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    r: f64,
}

impl Blob {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Paints one H&E-like patch: a textured pink stroma field, purple nuclei
/// ellipses and non-touching red granular eosinophil blobs, then additive
/// Gaussian noise. Pixel values are clipped and quantized to 8 bits.
pub fn render_patch(params: &PatientParams, rng: &mut impl Rng) -> Result<RenderedPatch> {
    let s = params.patch_size;
    if s < 16 {
        return Err(Error::invalid(format!("patch size {s} is below 16")));
    }
    let scale = s as f64 / 64.0;
    let sat = params.saturation_gain;
    let val = params.brightness;

    let mut rgb = vec![[0.0f64; 3]; s * s];
    let mut tissue = vec![Tissue::Stroma; s * s];

    // stroma: two oriented waves give a fibrous texture
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.15..0.45) / scale;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (angle, freq, phase)
        })
        .collect();
    for y in 0..s {
        for x in 0..s {
            let mut t = 0.0;
            for &(a, f, p) in &waves {
                t += ((x as f64 * a.cos() + y as f64 * a.sin()) * f + p).sin();
            }
            let v = (0.86 + 0.03 * t) * val;
            let sv = (0.32 + 0.04 * t) * sat;
            rgb[y * s + x] = hsv_to_rgb(params.stroma_hue, sv, v);
        }
    }

    let nuclei_mean = params.nuclei_density * scale * scale;
    let n_nuclei = poisson(nuclei_mean, rng);
    for _ in 0..n_nuclei {
        let cy = rng.gen_range(0.0..s as f64);
        let cx = rng.gen_range(0.0..s as f64);
        let ry = rng.gen_range(1.5..3.2) * scale.max(0.5);
        let rx = rng.gen_range(1.5..3.2) * scale.max(0.5);
        let v = rng.gen_range(0.38..0.52) * val;
        let colour = hsv_to_rgb(NUCLEUS_HUE + rng.gen_range(-0.02..0.02), 0.55 * sat, v);
        let blob = Blob {
            cy,
            cx,
            ry,
            rx,
            r: ry.max(rx),
        };
        paint(&blob, s, |i| {
            rgb[i] = colour;
            tissue[i] = Tissue::Nucleus;
        });
    }

    let wanted = poisson(params.eos_density, rng);
    let mut blobs: Vec<Blob> = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = (rng.gen_range(2.5..3.6) * scale).max(1.5);
            let ry = r * rng.gen_range(0.8..1.0);
            let rx = r * rng.gen_range(0.8..1.0);
            let cy = rng.gen_range(r..s as f64 - r);
            let cx = rng.gen_range(r..s as f64 - r);
            let clear = blobs.iter().all(|b| {
                let d = ((b.cy - cy).powi(2) + (b.cx - cx).powi(2)).sqrt();
                d > b.r + r + BLOB_GAP
            });
            if clear {
                blobs.push(Blob { cy, cx, ry, rx, r });
                break;
            }
        }
    }
    let mut mask = vec![0u8; s * s];
    for b in &blobs {
        let base_v = rng.gen_range(0.80..0.92) * val;
        let hue = EOSINOPHIL_HUE + rng.gen_range(-0.015..0.015);
        let mut granules = Vec::new();
        paint(b, s, |i| granules.push(i));
        for i in granules {
            let v = base_v + rng.gen_range(-0.10..0.06);
            let full = hsv_to_rgb(hue, 0.78 * sat, v);
            let under = rgb[i];
            for c in 0..3 {
                rgb[i][c] = under[c] + params.eos_contrast * (full[c] - under[c]);
            }
            tissue[i] = Tissue::Eosinophil;
            mask[i] = 1;
        }
    }

    let noise = Normal::new(0.0, params.noise_level.max(0.0))
        .map_err(|e| Error::invalid(format!("noise level: {e}")))?;
    let mut image = Vec::with_capacity(s * s * 3);
    for px in &rgb {
        for &c in px {
            image.push(quantize(c + noise.sample(rng)));
        }
    }
    Ok(RenderedPatch {
        patch: Patch {
            size: s,
            image,
            mask,
            eos_count: blobs.len() as u32,
        },
        tissue,
    })
}

fn paint(blob: &Blob, s: usize, mut f: impl FnMut(usize)) {
    let y0 = (blob.cy - blob.r).floor().max(0.0) as usize;
    let y1 = ((blob.cy + blob.r).ceil() as usize).min(s);
    let x0 = (blob.cx - blob.r).floor().max(0.0) as usize;
    let x1 = ((blob.cx + blob.r).ceil() as usize).min(s);
    for y in y0..y1 {
        for x in x0..x1 {
            if blob.covers(y, x) {
                f(y * s + x);
            }
        }
    }
}

fn poisson(mean: f64, rng: &mut impl Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean)
        .map(|p| p.sample(rng) as usize)
        .unwrap_or(0)
}
