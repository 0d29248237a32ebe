//! Dataset, checkpoint and config files survive a write and read back.

use std::collections::BTreeMap;

use insure_core::config::RunConfig;
use insure_core::eval::accuracy;
use insure_core::model::{load_checkpoint, save_checkpoint, Checkpoint, MaskMode};
use insure_core::synth::{generate, load_dataset, save_dataset, Mixing, RegionSpec};
use insure_core::trainer;

#[test]
fn dataset_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for mixing in [Mixing::Identity, Mixing::RandomOrthogonal] {
        let spec = RegionSpec { mixing, ..RegionSpec::default() };
        let ds = generate(&spec, 3, 4, 40, 11).unwrap();
        let path = dir.path().join("d.txt");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
    }
}

#[test]
fn checkpoint_file_round_trips_and_scores_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut rc = RunConfig::default();
    rc.train.steps = 120;
    rc.train.sma_start = 20;
    let data = generate(&rc.region, 3, 4, 80, 2).unwrap();
    for probe in [true, false] {
        let mc = trainer::model_config_for(&data, probe, &[6], rc.train.mode);
        let run = trainer::train(&rc.train, &mc, &data).unwrap();
        let ckpt = Checkpoint {
            config_hash: rc.hash(),
            raw: run.raw.clone(),
            sma: run.sma.clone(),
            meta: BTreeMap::from([("holdout_domain".to_string(), "1".to_string())]),
        };
        let path = dir.path().join("c.txt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(
            accuracy(back.inference_params(), &data, MaskMode::Hard).unwrap(),
            accuracy(run.inference_params(), &data, MaskMode::Hard).unwrap()
        );
    }
}

#[test]
fn config_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rc = RunConfig::default();
    rc.use_single_dg();
    rc.n_domains = 1;
    rc.seeds = vec![3, 9];
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, rc.to_text()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), rc);
}
