use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eoslab::cohort::{generate_cohort, CohortSpec};
use eoslab::data::centre;
use eoslab::mdan::{
    domain_accuracy, fit_mdan, grl, mdan_objective, reconstruct_target, step_gradients,
    train_mdan_on, Aggregation, MdanBatch, MdanConfig, MdanModel,
};
use eoslab::metrics::Fid;
use eoslab::nn::{TrainConfig, UNetConfig};
use eoslab::partition::{enumerate_combinations, partition_tertiles, ExperimentData};
use eoslab::tensor::{Tape, Tensor};
use eoslab::uncertainty::{PatientEntropy, UncertaintyReport};

fn tiny_config() -> MdanConfig {
    MdanConfig {
        unet: UNetConfig {
            depth: 1,
            base_channels: 2,
            dropout_rate: 0.0,
            ..UNetConfig::default()
        },
        mc_samples: 2,
        ..MdanConfig::default()
    }
}

fn train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn experiment_data() -> (ExperimentData, eoslab::partition::ExperimentConfig) {
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
    let exp = enumerate_combinations(&train(2)).remove(0);
    (ExperimentData::build(&cohort, &part, &exp).unwrap(), exp)
}

fn random_batch(sources: usize, seed: u64) -> MdanBatch {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let onehot = |rng: &mut ChaCha8Rng| {
        let fg = Tensor::randn(&[2, 1, 8, 8], rng).map(|v| f64::from(u8::from(v > 0.5)));
        let bg = fg.map(|v| 1.0 - v);
        let mut t = Tape::new();
        let (a, b) = (t.constant(bg), t.constant(fg));
        let c = t.concat_channels(&[a, b]).unwrap();
        t.value(c).clone()
    };
    let raw = Tensor::randn(&[2, 3, 8, 8], rng).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
    MdanBatch {
        sources: (0..sources)
            .map(|_| {
                (
                    Tensor::randn(&[2, 3, 8, 8], rng).map(|v| 0.2 * v),
                    onehot(rng),
                )
            })
            .collect(),
        target: centre(&raw),
        target_raw: raw,
    }
}

#[test]
fn gradient_reversal_is_identity_forward_and_negated_backward() {
    let rng = &mut ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[3, 4], rng);
    let c = Tensor::randn(&[3, 4], rng);
    let lambda = 0.7;
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = grl(&mut tape, xv, lambda).unwrap();
    assert_eq!(tape.value(y), &x);
    let cv = tape.constant(c.clone());
    let prod = tape.mul(y, cv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let g = tape.backward(loss).unwrap().get(xv).unwrap().clone();
    for (gi, ci) in g.data().iter().zip(c.data()) {
        assert!((gi + lambda * ci).abs() < 1e-15);
    }
    assert!(grl(&mut tape, xv, -1.0).is_err());
}

#[test]
fn zero_reversal_leaves_the_extractor_untouched_by_discriminators() {
    let model = MdanModel::new(tiny_config(), 1, 3).unwrap();
    let batch = random_batch(1, 4);
    let (_, with) =
        step_gradients(&model, &batch, 0.0, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (_, without) = step_gradients(
        &model,
        &batch,
        0.0,
        false,
        &mut ChaCha8Rng::seed_from_u64(5),
    )
    .unwrap();
    let mut compared = 0;
    for (name, g) in &without {
        if name.starts_with("disc") {
            continue;
        }
        let h = &with[name];
        for (a, b) in g.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-12, "{name}");
        }
        compared += 1;
    }
    assert!(compared > 0);
    assert!(with.keys().any(|k| k.starts_with("disc0")));
    let (_, reversed) =
        step_gradients(&model, &batch, 1.0, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_ne!(reversed["enc0.conv1.w"], with["enc0.conv1.w"]);
}

#[test]
fn one_discriminator_per_source() {
    for k in 1..4 {
        let m = MdanModel::new(tiny_config(), k, 0).unwrap();
        let heads = m
            .params
            .keys()
            .filter(|n| n.starts_with("disc") && n.ends_with(".out.w"))
            .count();
        assert_eq!(heads, k);
        assert!(!m
            .task_model()
            .params
            .keys()
            .any(|n| n.starts_with("disc") || n.starts_with("recon.")));
    }
    assert!(MdanModel::new(tiny_config(), 0, 0).is_err());
    let batch = random_batch(2, 0);
    let m = MdanModel::new(tiny_config(), 3, 0).unwrap();
    assert!(step_gradients(&m, &batch, 1.0, true, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn identical_domains_leave_the_discriminator_at_chance() {
    let (data, _) = experiment_data();
    let mut model = MdanModel::new(tiny_config(), 1, 6).unwrap();
    let source = data.sources[0].clone();
    fit_mdan(
        &mut model,
        std::slice::from_ref(&source),
        &source,
        &train(2),
    )
    .unwrap();
    let x = source
        .inputs(&(0..source.len()).collect::<Vec<_>>())
        .unwrap();
    let acc = domain_accuracy(&model, 0, &x, &x).unwrap();
    assert!((0.4..=0.6).contains(&acc), "{acc}");
}

#[test]
fn training_never_reads_target_masks_and_reconstructs() {
    let (data, exp) = experiment_data();
    let run = train_mdan_on(&data, &exp, &tiny_config(), 7).unwrap();
    assert_eq!(data.target_adapt.mask_reads(), 0);
    assert!(data.target_adapt.is_locked());
    assert!(matches!(run.record.fid, Fid::Value(v) if v >= 0.0));
    assert_eq!(
        run.reconstructions.shape(),
        &[data.target_adapt.len(), 3, 16, 16]
    );
    assert!(run
        .reconstructions
        .data()
        .iter()
        .all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(run.history.len(), 2);
}

#[test]
fn reconstruction_loss_decreases() {
    let (data, _) = experiment_data();
    let cfg = MdanConfig {
        recon_weight: 1.0,
        ..tiny_config()
    };
    let mut model = MdanModel::new(cfg, 2, 8).unwrap();
    assert!(reconstruct_target(&model, &data.target_adapt.all_images().unwrap()).is_err());
    let cfg = TrainConfig {
        learning_rate: 0.01,
        ..train(8)
    };
    let history = fit_mdan(&mut model, &data.sources, &data.target_adapt, &cfg).unwrap();
    let (first, last) = (history[0].recon, history.last().unwrap().recon);
    assert!(last < first, "{first} -> {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn soft_aggregation_is_sandwiched_by_hard(
        terms in prop::collection::vec((0.0f64..3.0, 0.0f64..3.0), 1..6),
        gamma in 0.1f64..50.0,
    ) {
        let (task, domain): (Vec<f64>, Vec<f64>) = terms.into_iter().unzip();
        let hard = mdan_objective(&task, &domain, Aggregation::Hard, gamma).unwrap();
        let soft = mdan_objective(&task, &domain, Aggregation::Soft, gamma).unwrap();
        let k = task.len() as f64;
        prop_assert!(hard <= soft + 1e-12);
        prop_assert!(soft <= hard + k.ln() / gamma + 1e-12);
    }

    #[test]
    fn sharp_soft_aggregation_approaches_the_max(
        terms in prop::collection::vec((0.3f64..0.7, 0.0f64..0.0001), 1..3),
    ) {
        let (task, domain): (Vec<f64>, Vec<f64>) = terms.into_iter().unzip();
        let hard = mdan_objective(&task, &domain, Aggregation::Hard, 100.0).unwrap();
        let soft = mdan_objective(&task, &domain, Aggregation::Soft, 100.0).unwrap();
        prop_assert!((soft - hard).abs() < 1e-2);
    }
}
