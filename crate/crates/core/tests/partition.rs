use std::collections::HashSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eoslab::cohort::{generate_cohort, CohortSpec};
use eoslab::metrics::{Fid, MetricsRecord};
use eoslab::nn::TrainConfig;
use eoslab::partition::{
    average_results, enumerate_combinations, partition_tertiles, Domain, DomainPartition,
    ExperimentConfig, ExperimentData,
};
use eoslab::uncertainty::{PatientEntropy, UncertaintyReport};

fn report(values: &[f64]) -> UncertaintyReport {
    UncertaintyReport::from_entries(
        values
            .iter()
            .enumerate()
            .map(|(i, &e)| PatientEntropy {
                patient_id: format!("P{i:03}"),
                entropy: e,
                patches: 1,
            })
            .collect(),
    )
}

fn record(model: &str, fid: Fid, p: f64, r: f64) -> MetricsRecord {
    MetricsRecord {
        model: model.into(),
        fid,
        precision: p,
        recall: r,
    }
}

#[test]
fn thirty_patients_split_ten_ten_ten() {
    let values: Vec<f64> = (0..30).map(|i| f64::from(i) * 0.1).collect();
    let p = partition_tertiles(&report(&values)).unwrap();
    assert_eq!((p.low.len(), p.medium.len(), p.high.len()), (10, 10, 10));
    assert_eq!(p.low[0], "P000");
    assert_eq!(p.high[9], "P029");
    assert_eq!(DomainPartition::from_tsv(&p.to_tsv()).unwrap(), p);
}

#[test]
fn remainders_go_to_low_then_medium() {
    let p = partition_tertiles(&report(&[0.1, 0.2, 0.3, 0.4, 0.5])).unwrap();
    assert_eq!((p.low.len(), p.medium.len(), p.high.len()), (2, 2, 1));
    assert!(partition_tertiles(&report(&[0.1, 0.2])).is_err());
}

#[test]
fn three_combinations_each_target_once() {
    let combos = enumerate_combinations(&TrainConfig::default());
    let labels: Vec<String> = combos.iter().map(ExperimentConfig::label).collect();
    assert_eq!(
        labels,
        ["medium+high->low", "low+high->medium", "low+medium->high"]
    );
    for c in &combos {
        c.validate().unwrap();
        assert!(!c.sources.contains(&c.target));
    }
    let bad = ExperimentConfig {
        sources: vec![Domain::Low],
        target: Domain::Low,
        train: TrainConfig::default(),
    };
    assert!(bad.validate().is_err());
}

#[test]
fn averaging_flags_partial_fid() {
    let full = average_results(&[
        record("m", Fid::Value(2.0), 0.5, 0.2),
        record("m", Fid::Value(4.0), 1.0, 0.4),
    ])
    .unwrap();
    assert_eq!(
        full,
        record("m", Fid::Value(3.0), 0.75, 0.30000000000000004)
    );
    let partial = average_results(&[
        record("m", Fid::Value(2.0), 0.0, 0.0),
        record("m", Fid::NotApplicable, 0.0, 0.0),
    ]);
    assert_eq!(partial.unwrap().fid, Fid::Partial(2.0));
    let none = average_results(&[record("m", Fid::NotApplicable, 0.0, 0.0)]).unwrap();
    assert_eq!(none.fid, Fid::NotApplicable);
    assert!(average_results(&[
        record("a", Fid::NotApplicable, 0.0, 0.0),
        record("b", Fid::NotApplicable, 0.0, 0.0)
    ])
    .is_err());
    assert!(average_results(&[]).is_err());
}

#[test]
fn experiment_data_locks_target_masks() {
    let spec = CohortSpec {
        n_patients: 6,
        total_patches: 18,
        patch_size: 16,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec).unwrap();
    let values: Vec<f64> = (0..6).map(f64::from).collect();
    let entries = cohort
        .patients
        .iter()
        .zip(&values)
        .map(|(p, &e)| PatientEntropy {
            patient_id: p.patient_id.clone(),
            entropy: e,
            patches: p.patches.len(),
        })
        .collect();
    let part = partition_tertiles(&UncertaintyReport::from_entries(entries)).unwrap();
    for exp in enumerate_combinations(&TrainConfig::default()) {
        let data = ExperimentData::build(&cohort, &part, &exp).unwrap();
        assert_eq!(data.sources.len(), 2);
        assert!(data.target_adapt.is_locked());
        assert!(data.target_adapt.labelled_patches().is_err());
        let target_patches: usize = part
            .get(exp.target)
            .iter()
            .map(|id| {
                cohort
                    .patients
                    .iter()
                    .find(|p| &p.patient_id == id)
                    .unwrap()
                    .patches
                    .len()
            })
            .sum();
        assert_eq!(
            data.target_adapt.len() + data.target_eval.len(),
            target_patches
        );
        assert_eq!(
            data.pooled_sources().unwrap().len(),
            data.sources.iter().map(|s| s.len()).sum::<usize>()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tertiles_are_disjoint_ordered_and_permutation_invariant(
        values in prop::collection::vec(0.0f64..3.0, 3..40),
        seed in any::<u64>(),
    ) {
        let p = partition_tertiles(&report(&values)).unwrap();
        let all: Vec<&String> = p.low.iter().chain(&p.medium).chain(&p.high).collect();
        let unique: HashSet<&String> = all.iter().copied().collect();
        prop_assert_eq!(all.len(), values.len());
        prop_assert_eq!(unique.len(), values.len());
        let sizes = [p.low.len(), p.medium.len(), p.high.len()];
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

        let entropy = |id: &String| values[id[1..].parse::<usize>().unwrap()];
        let max_low = p.low.iter().map(entropy).fold(f64::MIN, f64::max);
        let min_mid = p.medium.iter().map(entropy).fold(f64::MAX, f64::min);
        let max_mid = p.medium.iter().map(entropy).fold(f64::MIN, f64::max);
        let min_high = p.high.iter().map(entropy).fold(f64::MAX, f64::min);
        prop_assert!(max_low <= min_mid && max_mid <= min_high);

        let mut entries = report(&values).entries;
        entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(partition_tertiles(&UncertaintyReport::from_entries(entries)).unwrap(), p);
    }
}
