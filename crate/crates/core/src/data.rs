//! Patch sets as tensors, with label access that can be locked.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::cohort::{Cohort, Patch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[N, 3, S, S]` images.
pub fn images_tensor(patches: &[&Patch]) -> Result<Tensor> {
    let s = common_size(patches)?;
    let mut data = Vec::with_capacity(patches.len() * 3 * s * s);
    for p in patches {
        data.extend(p.image_chw());
    }
    Ok(Tensor::from_parts(vec![patches.len(), 3, s, s], data))
}

/// Offset subtracted from pixel values before they enter a network, so
/// inputs are centred on zero.
pub const INPUT_CENTRE: f64 = 0.5;

/// `[N, 3, S, S]` network input: images shifted by [`INPUT_CENTRE`].
pub fn model_input(patches: &[&Patch]) -> Result<Tensor> {
    Ok(centre(&images_tensor(patches)?))
}

pub fn centre(images: &Tensor) -> Tensor {
    images.map(|v| v - INPUT_CENTRE)
}

/// `[N, 2, S, S]` one-hot targets: channel 0 background, channel 1 eosinophil.
pub fn masks_onehot(patches: &[&Patch]) -> Result<Tensor> {
    let s = common_size(patches)?;
    let n = s * s;
    let mut data = Vec::with_capacity(patches.len() * 2 * n);
    for p in patches {
        data.extend(p.mask.iter().map(|&m| f64::from(1 - m)));
        data.extend(p.mask.iter().map(|&m| f64::from(m)));
    }
    Ok(Tensor::from_parts(vec![patches.len(), 2, s, s], data))
}

/// `[N, 1, S, S]` masks as 0.0 / 1.0.
pub fn masks_tensor(patches: &[&Patch]) -> Result<Tensor> {
    let s = common_size(patches)?;
    let data = patches
        .iter()
        .flat_map(|p| p.mask.iter().map(|&m| f64::from(m)))
        .collect();
    Ok(Tensor::from_parts(vec![patches.len(), 1, s, s], data))
}

fn common_size(patches: &[&Patch]) -> Result<usize> {
    let s = patches
        .first()
        .ok_or_else(|| Error::invalid("empty patch list"))?
        .size;
    if patches.iter().any(|p| p.size != s) {
        return Err(Error::shape("batch", "patches differ in size"));
    }
    Ok(s)
}

/// Patches pooled from a group of patients. Mask reads are counted, and a
/// locked set refuses them, so code that must never see target labels can
/// be handed a locked set and checked afterwards.
#[derive(Debug)]
pub struct DomainSet {
    pub name: String,
    patches: Vec<Patch>,
    owners: Vec<String>,
    locked: bool,
    mask_reads: AtomicUsize,
}

impl Clone for DomainSet {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            patches: self.patches.clone(),
            owners: self.owners.clone(),
            locked: self.locked,
            mask_reads: AtomicUsize::new(self.mask_reads()),
        }
    }
}

impl DomainSet {
    pub fn new(name: impl Into<String>, patches: Vec<Patch>, owners: Vec<String>) -> Result<Self> {
        if patches.len() != owners.len() {
            return Err(Error::invalid("one owner per patch is required"));
        }
        Ok(Self {
            name: name.into(),
            patches,
            owners,
            locked: false,
            mask_reads: AtomicUsize::new(0),
        })
    }

    /// All patches of the listed patients, in list order.
    pub fn from_patients(name: impl Into<String>, cohort: &Cohort, ids: &[String]) -> Result<Self> {
        let mut patches = Vec::new();
        let mut owners = Vec::new();
        for id in ids {
            let p = cohort
                .patient(id)
                .ok_or_else(|| Error::invalid(format!("unknown patient `{id}`")))?;
            for patch in &p.patches {
                patches.push(patch.clone());
                owners.push(id.clone());
            }
        }
        Self::new(name, patches, owners)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn owners(&self) -> &[String] {
        &self.owners
    }

    pub fn locked(mut self) -> Self {
        self.locked = true;
        self
    }

    pub fn is_locked(&self) -> bool {
        self.locked
    }

    pub fn mask_reads(&self) -> usize {
        self.mask_reads.load(Ordering::Relaxed)
    }

    pub fn images(&self, idx: &[usize]) -> Result<Tensor> {
        images_tensor(&self.select(idx)?)
    }

    pub fn inputs(&self, idx: &[usize]) -> Result<Tensor> {
        model_input(&self.select(idx)?)
    }

    pub fn all_images(&self) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.images(&idx)
    }

    fn guard(&self) -> Result<()> {
        if self.locked {
            return Err(Error::LabelsLocked(self.name.clone()));
        }
        self.mask_reads.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn onehot(&self, idx: &[usize]) -> Result<Tensor> {
        self.guard()?;
        masks_onehot(&self.select(idx)?)
    }

    pub fn masks(&self, idx: &[usize]) -> Result<Tensor> {
        self.guard()?;
        masks_tensor(&self.select(idx)?)
    }

    /// Patch references including masks, for evaluation.
    pub fn labelled_patches(&self) -> Result<Vec<&Patch>> {
        self.guard()?;
        Ok(self.patches.iter().collect())
    }

    fn select(&self, idx: &[usize]) -> Result<Vec<&Patch>> {
        idx.iter()
            .map(|&i| {
                self.patches
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("patch index {i} out of range")))
            })
            .collect()
    }

    /// Splits alternately into two halves (even positions first). Both halves
    /// keep the lock state.
    pub fn split_alternate(&self) -> Result<(DomainSet, DomainSet)> {
        let mut a = (Vec::new(), Vec::new());
        let mut b = (Vec::new(), Vec::new());
        for (i, (p, o)) in self.patches.iter().zip(&self.owners).enumerate() {
            let side = if i % 2 == 0 { &mut a } else { &mut b };
            side.0.push(p.clone());
            side.1.push(o.clone());
        }
        let mut first = DomainSet::new(format!("{}/a", self.name), a.0, a.1)?;
        let mut second = DomainSet::new(format!("{}/b", self.name), b.0, b.1)?;
        first.locked = self.locked;
        second.locked = self.locked;
        Ok((first, second))
    }
}

/// Shuffled index batches covering `0..n` once.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut dyn RngCore) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(mask: Vec<u8>) -> Patch {
        Patch {
            size: 16,
            image: vec![0.5; 16 * 16 * 3],
            mask,
            eos_count: 0,
        }
    }

    #[test]
    fn locked_sets_refuse_masks() {
        let set = DomainSet::new("t", vec![patch(vec![0; 256])], vec!["E-001".into()])
            .unwrap()
            .locked();
        assert!(set.images(&[0]).is_ok());
        assert!(matches!(set.masks(&[0]), Err(Error::LabelsLocked(_))));
        assert_eq!(set.mask_reads(), 0);
    }

    #[test]
    fn onehot_channels_partition_pixels() {
        let mut m = vec![0u8; 256];
        m[3] = 1;
        let set = DomainSet::new("s", vec![patch(m)], vec!["E-001".into()]).unwrap();
        let t = set.onehot(&[0]).unwrap();
        assert_eq!(t.shape(), &[1, 2, 16, 16]);
        assert_eq!(t.data()[3], 0.0);
        assert_eq!(t.data()[256 + 3], 1.0);
        assert_eq!(set.mask_reads(), 1);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = rand::rngs::mock::StepRng::new(7, 13);
        let b = shuffled_batches(10, 4, &mut rng);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
