//! End-to-end training behaviour and the paired purification term against
//! direct enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use insure_core::config::RunConfig;
use insure_core::grad::{Tape, Tensor};
use insure_core::losses::{paired_purification, LossWeights, ObjectiveTerms};
use insure_core::model::{init_model, ModelConfig};
use insure_core::synth::generate;
use insure_core::trainer::{self, TrainConfig, TrainError};

fn small_data(n_domains: usize) -> insure_core::synth::SynthDataset {
    generate(&RunConfig::default().region, n_domains, 4, 200, 3).unwrap()
}

#[test]
fn heavy_sparsity_turns_the_mask_off() {
    let data = small_data(3);
    let cfg = TrainConfig {
        steps: 1000,
        lr_mask: 1e-2,
        lr_rest: 1e-3,
        weights: LossWeights {
            gamma: 50.0,
            ..LossWeights::multi_dg()
        },
        ..TrainConfig::default()
    };
    let mc = trainer::model_config_for(&data, true, &[], cfg.mode);
    let run = trainer::train(&cfg, &mc, &data).unwrap();
    assert_eq!(run.raw.mask_on_count(), 0);
}

#[test]
fn plain_joint_training_lowers_cross_entropy() {
    let data = small_data(3);
    let cfg = TrainConfig {
        steps: 200,
        lr_rest: 1e-3,
        weights: LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            eps_ib: 0.0,
        },
        terms: ObjectiveTerms::baseline(),
        ..TrainConfig::default()
    };
    let mc = trainer::model_config_for(&data, false, &[16], cfg.mode);
    let run = trainer::train(&cfg, &mc, &data).unwrap();
    let ce: Vec<f64> = run.metrics.steps.iter().map(|s| s.loss.ce_label).collect();
    let head: f64 = ce[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = ce[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.8 * head, "first 20 steps {head:.4}, last 20 steps {tail:.4}");
}

#[test]
fn single_source_training_leaves_domain_classifier_untouched() {
    let data = small_data(1);
    let cfg = TrainConfig {
        steps: 150,
        sma_start: 10,
        ..TrainConfig::single_dg()
    };
    let mc = trainer::model_config_for(&data, false, &[8], cfg.mode);
    let run = trainer::train(&cfg, &mc, &data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = init_model(&mc, rng.random()).unwrap();
    assert_eq!(run.raw.g, init.g);
    assert_ne!(run.raw.f, init.f);
}

#[test]
fn divergence_aborts_with_step_and_last_good_parameters() {
    let data = small_data(2);
    let cfg = TrainConfig {
        steps: 50,
        sma_start: 10,
        lr_rest: 1e305,
        ..TrainConfig::default()
    };
    let mc = trainer::model_config_for(&data, false, &[8], cfg.mode);
    match trainer::train(&cfg, &mc, &data) {
        Err(TrainError::NonFinite { step, last_good, .. }) => {
            assert!((2..=50).contains(&step), "step {step}");
            assert!(last_good.tensors().iter().all(|t| t.is_finite()));
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|r| r.metrics.steps.len())),
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn purification_equals_enumerated_cyclic_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (b, k, c) = (4, 5, 3);
    let params = init_model(&ModelConfig::probe(k, c, 2), 9).unwrap();
    let keep: Vec<Vec<f64>> = (0..b).map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let add: Vec<Vec<f64>> = (0..b).map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let order = [2usize, 0, 3, 1];

    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let kv = tape.constant(Tensor::from_rows(&keep));
    let av = tape.constant(Tensor::from_rows(&add));
    let term = paired_purification(&mut tape, vars.f, kv, av, &order).unwrap();
    let got = tape.value(term.value).item();

    let f = |x: &[f64]| -> Vec<f64> {
        let w = params.f.weight.data();
        let logits: Vec<f64> = (0..c)
            .map(|j| params.f.bias.data()[j] + (0..k).map(|i| x[i] * w[i * c + j]).sum::<f64>())
            .collect();
        softmax(&logits)
    };
    let mse = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / c as f64;
    let mixed = |i: usize, j: usize| -> Vec<f64> { keep[i].iter().zip(&add[j]).map(|(a, b)| a + b).collect() };
    let mut total = 0.0;
    for t in 0..b {
        let (i, j) = (order[t], order[(t + 1) % b]);
        total += mse(&f(&keep[i]), &f(&mixed(i, j))) + mse(&f(&keep[j]), &f(&mixed(j, i)));
    }
    let expected = total / b as f64;
    assert!(!term.degenerate);
    assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
}
