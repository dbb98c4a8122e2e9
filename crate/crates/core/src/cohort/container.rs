//! Versioned cohort container.
//!
//! ```text
//! magic    "EOSLABCO"
//! version  u32 = 1
//! settings u32 length + CohortSpec JSON
//! patients u32
//! per patient:
//!   id str16, params 8 × f64 + patch_size u32, patches u32
//!   per patch: eos_count u32, image H·W·3 × u8, mask H·W × u8 (0 or 255)
//! ```
//!
//! Pixel values are 8-bit at render time, so storing `round(255·v)` is lossless.
//! Masks are grayscale on disk and binarized at half intensity when loaded.

use std::io::{Read, Write};
use std::path::Path;

use super::{Cohort, CohortSpec, Patch, PatientParams, PatientRecord};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

const MAGIC: &[u8; 8] = b"EOSLABCO";
pub const COHORT_VERSION: u32 = 1;

fn write_cohort(cohort: &Cohort, out: &mut impl Write) -> Result<()> {
    let mut w = ByteWriter::new(out);
    w.bytes(MAGIC)?;
    w.u32(COHORT_VERSION)?;
    let spec = serde_json::to_string(&cohort.spec)
        .map_err(|e| Error::invalid(format!("spec encoding: {e}")))?;
    w.str32(&spec)?;
    w.u32(cohort.patients.len() as u32)?;
    for p in &cohort.patients {
        w.str16(&p.patient_id)?;
        let q = &p.params;
        for v in [
            q.stroma_hue,
            q.saturation_gain,
            q.brightness,
            q.eos_density,
            q.nuclei_density,
            q.noise_level,
            q.eos_contrast,
            q.latent,
        ] {
            w.f64(v)?;
        }
        w.u32(q.patch_size as u32)?;
        w.u32(p.patches.len() as u32)?;
        for patch in &p.patches {
            w.u32(patch.eos_count)?;
            let pixels: Vec<u8> = patch
                .image
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            w.bytes(&pixels)?;
            let mask: Vec<u8> = patch
                .mask
                .iter()
                .map(|&m| if m != 0 { 255 } else { 0 })
                .collect();
            w.bytes(&mask)?;
        }
    }
    Ok(())
}

fn read_cohort(input: &mut impl Read) -> Result<Cohort> {
    let mut r = ByteReader::new(input);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != COHORT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: COHORT_VERSION,
        });
    }
    let spec: CohortSpec = serde_json::from_str(&r.str32()?)
        .map_err(|e| Error::Corrupt(format!("cohort spec: {e}")))?;
    let s = spec.patch_size;
    let n = r.u32()? as usize;
    if n != spec.n_patients {
        return Err(Error::Corrupt(format!(
            "{n} patients stored, spec says {}",
            spec.n_patients
        )));
    }
    let mut patients = Vec::with_capacity(n);
    for _ in 0..n {
        let patient_id = r.str16()?;
        let mut v = [0.0; 8];
        for x in &mut v {
            *x = r.f64()?;
        }
        let patch_size = r.u32()? as usize;
        if patch_size != s {
            return Err(Error::Corrupt(format!("patch size {patch_size} != {s}")));
        }
        let params = PatientParams {
            stroma_hue: v[0],
            saturation_gain: v[1],
            brightness: v[2],
            eos_density: v[3],
            nuclei_density: v[4],
            noise_level: v[5],
            eos_contrast: v[6],
            latent: v[7],
            patch_size,
        };
        let count = r.u32()? as usize;
        let mut patches = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let eos_count = r.u32()?;
            let image = r
                .vec(s * s * 3)?
                .into_iter()
                .map(|b| b as f64 / 255.0)
                .collect();
            let mask = r
                .vec(s * s)?
                .into_iter()
                .map(|b| u8::from(b >= 128))
                .collect();
            patches.push(Patch {
                size: s,
                image,
                mask,
                eos_count,
            });
        }
        patients.push(PatientRecord {
            patient_id,
            params,
            patches,
        });
    }
    r.expect_end()?;
    Ok(Cohort { spec, patients })
}

pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_cohort(cohort, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_cohort(path: &Path) -> Result<Cohort> {
    let bytes = std::fs::read(path)?;
    read_cohort(&mut bytes.as_slice())
}
