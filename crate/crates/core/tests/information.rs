//! Probe information estimates on benchmark data.

use insure_core::config::RunConfig;
use insure_core::eval::{estimate_label_information, train_with};
use insure_core::losses::ObjectiveTerms;
use insure_core::model::{features, MaskMode};
use insure_core::synth::generate;

#[test]
fn shuffled_labels_carry_no_information() {
    let rc = RunConfig::default();
    let data = generate(&rc.region, 2, 4, 500, 8).unwrap();
    assert_eq!(data.len(), 1000);
    let x = data.all_features();
    let real = estimate_label_information(&x, &data.labels(), 4, 0).unwrap();
    for seed in 0..3 {
        let shuffled = data.with_shuffled_labels(seed);
        let est = estimate_label_information(&x, &shuffled.labels(), 4, 0).unwrap();
        assert!(est.nats < 0.05, "seed {seed}: {est:?}");
    }
    assert!(real.nats > 1.2, "{real:?}");
}

#[test]
fn relevant_part_never_beats_full_latent_beyond_slack() {
    let rc = RunConfig::default();
    let data = generate(&rc.region, 3, 4, 200, 1).unwrap();
    let mut suite = rc.suite(1);
    suite.train.steps = 1500;
    suite.train.weights.gamma = 0.05;
    let x = data.all_features();
    let y = data.labels();
    for seed in 0..3 {
        let run = train_with(&suite, ObjectiveTerms::full(), seed, &data).unwrap();
        for mode in [MaskMode::Hard, MaskMode::Soft] {
            let (z, relevant, _) = features(run.inference_params(), &x, mode).unwrap();
            let iz = estimate_label_information(&z, &y, 4, seed).unwrap();
            let ir = estimate_label_information(&relevant, &y, 4, seed).unwrap();
            assert!(ir.nats <= iz.nats + 0.05, "seed {seed}: {ir:?} vs {iz:?}");
            for e in [iz, ir] {
                assert!(e.nats >= 0.0 && e.nats <= e.label_entropy + 1e-12);
            }
        }
    }
}
