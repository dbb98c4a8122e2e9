use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eoslab::cohort::{
    circular_mean_hue, generate_cohort, hue_distance, patient_params, render_patch, rgb_to_hsv,
    save_cohort, CohortSpec, PatientParams, Tissue, LARGE_PATIENT_PATCHES,
};

/// Number of 8-connected foreground components.
fn components(mask: &[u8], size: usize) -> u32 {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / size) as isize, (i % size) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= size as isize || nx >= size as isize {
                        continue;
                    }
                    let j = ny as usize * size + nx as usize;
                    if mask[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

fn quiet_params(size: usize) -> PatientParams {
    let spec = CohortSpec {
        n_patients: 3,
        total_patches: 3,
        patch_size: size,
        ..CohortSpec::default()
    };
    patient_params(&spec).remove(1)
}

#[test]
fn default_cohort_shape() {
    let cohort = generate_cohort(&CohortSpec::default()).unwrap();
    assert_eq!(cohort.patients.len(), 30);
    assert_eq!(cohort.total_patches(), 514);
    let large = cohort
        .patients
        .iter()
        .filter(|p| p.patches.len() == LARGE_PATIENT_PATCHES)
        .count();
    assert_eq!(large, 1);
    for p in &cohort.patients {
        for patch in &p.patches {
            assert_eq!(components(&patch.mask, patch.size), patch.eos_count);
        }
    }
}

#[test]
fn cohort_files_are_byte_identical_for_one_seed() {
    let spec = CohortSpec {
        n_patients: 4,
        total_patches: 8,
        patch_size: 16,
        ..CohortSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.eosc"), dir.path().join("b.eosc"));
    save_cohort(&generate_cohort(&spec).unwrap(), &a).unwrap();
    save_cohort(&generate_cohort(&spec).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn mean_stroma_hue_stays_in_the_patient_band() {
    let mut params = quiet_params(32);
    params.noise_level = 0.02;
    let rng = &mut ChaCha8Rng::seed_from_u64(10);
    let mut hues = Vec::new();
    for _ in 0..100 {
        let r = render_patch(&params, rng).unwrap();
        for (px, t) in r.patch.image.chunks_exact(3).zip(&r.tissue) {
            if *t == Tissue::Stroma {
                hues.push(rgb_to_hsv([px[0], px[1], px[2]])[0]);
            }
        }
    }
    let mean = circular_mean_hue(hues).unwrap();
    assert!(
        hue_distance(mean, params.stroma_hue) <= 0.05,
        "{mean} vs {}",
        params.stroma_hue
    );
}

#[test]
fn more_noise_means_more_pixel_variance() {
    let base = quiet_params(32);
    let mean_variance = |noise: f64| {
        let params = PatientParams {
            noise_level: noise,
            ..base.clone()
        };
        let rng = &mut ChaCha8Rng::seed_from_u64(11);
        let mut total = 0.0;
        for _ in 0..100 {
            let img = render_patch(&params, rng).unwrap().patch.image;
            let m = img.iter().sum::<f64>() / img.len() as f64;
            total += img.iter().map(|v| (v - m).powi(2)).sum::<f64>() / img.len() as f64;
        }
        total / 100.0
    };
    let levels = [0.01, 0.1, 0.25, 0.5];
    let vars: Vec<f64> = levels.iter().map(|&n| mean_variance(n)).collect();
    for w in vars.windows(2) {
        assert!(w[1] > w[0], "{vars:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_cohorts_honour_their_spec(
        n in 3usize..9,
        extra in 0usize..12,
        seed in any::<u64>(),
        shift in 0.0f64..2.0,
    ) {
        let spec = CohortSpec {
            n_patients: n,
            total_patches: n + extra,
            patch_size: 16,
            domain_shift: shift,
            seed,
            ..CohortSpec::default()
        };
        let cohort = generate_cohort(&spec).unwrap();
        prop_assert_eq!(cohort.patients.len(), n);
        prop_assert_eq!(cohort.total_patches(), n + extra);
        prop_assert_eq!(spec.patch_counts().unwrap().iter().sum::<usize>(), n + extra);
        let ids: HashSet<&str> = cohort.patients.iter().map(|p| p.patient_id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
        for p in &cohort.patients {
            prop_assert!(!p.patches.is_empty());
            for patch in &p.patches {
                prop_assert!(patch.image.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert_eq!(components(&patch.mask, patch.size), patch.eos_count);
            }
        }
    }

    #[test]
    fn mask_is_exactly_the_eosinophil_pixels(seed in any::<u64>(), density in 0.0f64..25.0) {
        let params = PatientParams { eos_density: density, ..quiet_params(32) };
        let r = render_patch(&params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (m, t) in r.patch.mask.iter().zip(&r.tissue) {
            prop_assert_eq!(*m == 1, *t == Tissue::Eosinophil);
        }
    }
}
