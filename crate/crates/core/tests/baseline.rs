use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eoslab::baseline::{
    predict_mask, threshold_probs, train_baseline_on, BaselineConfig, BASELINE_NAME,
};
use eoslab::cohort::{generate_cohort, CohortSpec};
use eoslab::metrics::Fid;
use eoslab::nn::{Mode, Model, TrainConfig, UNetConfig};
use eoslab::partition::{enumerate_combinations, partition_tertiles, ExperimentData};
use eoslab::tensor::Tensor;
use eoslab::uncertainty::{PatientEntropy, UncertaintyReport};

fn unet(dropout_rate: f64) -> UNetConfig {
    UNetConfig {
        depth: 1,
        base_channels: 4,
        dropout_rate,
        ..UNetConfig::default()
    }
}

fn input() -> Tensor {
    Tensor::randn(&[2, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(1)).map(|v| 0.3 * v)
}

fn argmax_masks(logits: &Tensor) -> Vec<Vec<u8>> {
    let s = logits.shape();
    let hw = s[2] * s[3];
    (0..s[0])
        .map(|i| {
            let d = &logits.data()[i * 2 * hw..(i + 1) * 2 * hw];
            (0..hw).map(|p| u8::from(d[hw + p] > d[p])).collect()
        })
        .collect()
}

#[test]
fn single_pass_without_dropout_is_the_argmax() {
    let model = Model::new(unet(0.0), 2).unwrap();
    let x = input();
    let logits = model
        .forward(&x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let masks = predict_mask(&model, &x, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(masks, argmax_masks(&logits));
}

#[test]
fn swapping_class_channels_flips_the_mask() {
    let rng = &mut ChaCha8Rng::seed_from_u64(3);
    let fg: Vec<f64> = (0..32)
        .map(|_| rand::Rng::gen_range(rng, 0.01..0.99))
        .collect();
    let probs = |fg: &[f64]| {
        let mut d: Vec<f64> = fg.iter().map(|f| 1.0 - f).collect();
        d.extend_from_slice(fg);
        Tensor::new(vec![1, 2, 4, 8], d).unwrap()
    };
    let swapped: Vec<f64> = fg.iter().map(|f| 1.0 - f).collect();
    let a = threshold_probs(&probs(&fg)).unwrap();
    let b = threshold_probs(&probs(&swapped)).unwrap();
    for (x, y) in a[0].iter().zip(&b[0]) {
        assert_eq!(*x, 1 - *y);
    }
    let tie = threshold_probs(&Tensor::new(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap()).unwrap();
    assert_eq!(tie, vec![vec![0]]);
    assert!(threshold_probs(&Tensor::zeros(&[1, 3, 2, 2])).is_err());
}

#[test]
fn more_dropout_passes_stabilise_predictions() {
    let model = Model::new(unet(0.5), 4).unwrap();
    let x = input();
    let disagreement = |m: usize| {
        let runs: Vec<Vec<u8>> = (0..10)
            .map(|r| {
                predict_mask(&model, &x, m, &mut ChaCha8Rng::seed_from_u64(50 + r))
                    .unwrap()
                    .concat()
            })
            .collect();
        let mut differ = 0usize;
        for i in 0..runs.len() {
            for j in i + 1..runs.len() {
                differ += runs[i].iter().zip(&runs[j]).filter(|(a, b)| a != b).count();
            }
        }
        differ
    };
    let (one, many) = (disagreement(1), disagreement(16));
    assert!(many < one, "M=1 {one} vs M=16 {many}");
}

#[test]
fn trains_on_sources_only_and_reports_no_fid() {
    let spec = CohortSpec {
        n_patients: 6,
        total_patches: 18,
        patch_size: 16,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec).unwrap();
    let entries = cohort
        .patients
        .iter()
        .enumerate()
        .map(|(i, p)| PatientEntropy {
            patient_id: p.patient_id.clone(),
            entropy: i as f64,
            patches: p.patches.len(),
        })
        .collect();
    let part = partition_tertiles(&UncertaintyReport::from_entries(entries)).unwrap();
    let train = TrainConfig {
        epochs: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    let exp = enumerate_combinations(&train).remove(1);
    let data = ExperimentData::build(&cohort, &part, &exp).unwrap();
    let cfg = BaselineConfig {
        unet: unet(0.5),
        mc_samples: 2,
    };
    let (model, record) = train_baseline_on(&data, &exp, &cfg, 5).unwrap();
    assert_eq!(data.target_adapt.mask_reads(), 0);
    assert!(data.target_eval.mask_reads() > 0);
    assert_eq!(record.model, BASELINE_NAME);
    assert_eq!(record.fid, Fid::NotApplicable);
    assert!((0.0..=1.0).contains(&record.precision) && (0.0..=1.0).contains(&record.recall));
    assert_ne!(model, Model::new(unet(0.5), 5).unwrap());
}
