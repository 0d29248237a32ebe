//! Held-out accuracy, mask recovery, probe-based information estimates and
//! the experiment suites built on them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{GradError, Tape, Tensor};
use crate::losses::{DgMode, ObjectiveTerms, Purification};
use crate::model::{self, MaskMode, ModelError, ModelParams};
use crate::synth::{Region, SynthDataset, SynthError};
use crate::trainer::{self, TrainConfig, TrainError, TrainedModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("mask recovery needs the identity encoder (probe mode) so mask dims line up with raw dims")]
    NotProbe,
    #[error("dataset carries no region map (non-identity mixing or loaded without one)")]
    NoGroundTruth,
    #[error("information estimate needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("dataset has no region III dims; the experiment would be vacuous")]
    NoRegionIII,
    #[error("{0}")]
    Config(String),
}

/// Fraction of samples whose `argmax f(z*)` equals the label.
pub fn accuracy(params: &ModelParams, data: &SynthDataset, mode: MaskMode) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = model::predict(params, &data.all_features(), mode)?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| **p == *y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Fraction of samples on which two prediction vectors agree.
pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecovery {
    /// `None` when the mask is all-off.
    pub precision: Option<f64>,
    /// `None` when the target set is empty.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub on: usize,
    pub target: usize,
}

/// Scores of `mask_on` against the dims whose region satisfies `target`.
pub fn score_mask(mask_on: &[bool], regions: &[Region], target: impl Fn(Region) -> bool) -> MaskRecovery {
    let on = mask_on.iter().filter(|&&m| m).count();
    let tgt = regions.iter().filter(|&&r| target(r)).count();
    let hit = mask_on.iter().zip(regions).filter(|(&m, &r)| m && target(r)).count();
    let precision = (on > 0).then(|| hit as f64 / on as f64);
    let recall = (tgt > 0).then(|| hit as f64 / tgt as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    MaskRecovery {
        precision,
        recall,
        f1,
        on,
        target: tgt,
    }
}

fn mask_on(params: &ModelParams) -> Vec<bool> {
    params.hard_mask().iter().map(|&m| m == 1.0).collect()
}

fn checked_regions<'a>(params: &ModelParams, regions: Option<&'a [Region]>) -> Result<&'a [Region], EvalError> {
    if !params.config.probe {
        return Err(EvalError::NotProbe);
    }
    let regions = regions.ok_or(EvalError::NoGroundTruth)?;
    if regions.len() != params.mask_logits.len() {
        return Err(EvalError::Config(format!(
            "region map has {} dims, mask has {}",
            regions.len(),
            params.mask_logits.len()
        )));
    }
    Ok(regions)
}

/// Hard mask against region III ∪ IV.
pub fn mask_recovery(params: &ModelParams, regions: Option<&[Region]>) -> Result<MaskRecovery, EvalError> {
    let regions = checked_regions(params, regions)?;
    Ok(score_mask(&mask_on(params), regions, Region::is_class_relevant))
}

/// Share of one region's dims the hard mask keeps.
pub fn region_recall(params: &ModelParams, regions: Option<&[Region]>, region: Region) -> Result<Option<f64>, EvalError> {
    let regions = checked_regions(params, regions)?;
    Ok(score_mask(&mask_on(params), regions, |r| r == region).recall)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoEstimate {
    /// `max(0, H(y) − CE_holdout)` in nats.
    pub nats: f64,
    pub label_entropy: f64,
    pub holdout_ce: f64,
    /// Set when the labels contain a single class.
    pub degenerate: bool,
}

pub const MIN_INFO_SAMPLES: usize = 200;
const PROBE_ITERS: usize = 300;
const PROBE_LR: f64 = 0.05;

fn entropy(labels: &[usize], n_classes: usize) -> f64 {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Fits an affine softmax probe on 80% of the rows (standardized with the
/// training-split statistics) and scores cross-entropy on the other 20%.
pub fn estimate_label_information(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    split_seed: u64,
) -> Result<InfoEstimate, EvalError> {
    let (n, k) = features.dims2();
    if n < MIN_INFO_SAMPLES {
        return Err(EvalError::TooFewSamples {
            min: MIN_INFO_SAMPLES,
            got: n,
        });
    }
    if labels.len() != n {
        return Err(EvalError::Config(format!("{n} feature rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(EvalError::Config(format!("label {bad} outside {n_classes} classes")));
    }
    let h = entropy(labels, n_classes);
    if labels.iter().all(|&y| y == labels[0]) {
        return Ok(InfoEstimate {
            nats: 0.0,
            label_entropy: 0.0,
            holdout_ce: 0.0,
            degenerate: true,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_train = n * 4 / 5;
    let (train_idx, test_idx) = order.split_at(n_train);

    let mut mean = vec![0.0; k];
    let mut std = vec![0.0; k];
    for &i in train_idx {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += features.row(i)[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    for &i in train_idx {
        for (j, s) in std.iter_mut().enumerate() {
            *s += (features.row(i)[j] - mean[j]).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n_train as f64).sqrt());
    let (mean, std) = (&mean, &std);
    let standardized = |idx: &[usize]| -> Tensor {
        let data = idx
            .iter()
            .flat_map(|&i| {
                let row = features.row(i);
                (0..k).map(move |j| if std[j] > 1e-12 { (row[j] - mean[j]) / std[j] } else { 0.0 })
            })
            .collect::<Vec<_>>();
        Tensor::new(vec![idx.len(), k], data).expect("shape matches data")
    };
    let x_train = standardized(train_idx);
    let x_test = standardized(test_idx);
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();

    let mut w = Tensor::zeros(&[k, n_classes]);
    let mut b = Tensor::zeros(&[n_classes]);
    let adam = trainer::AdamConfig::default();
    let mut state = trainer::AdamState::new(&[&w, &b]);
    for _ in 0..PROBE_ITERS {
        let mut tape = Tape::new();
        let wv = tape.param(w.clone());
        let bv = tape.param(b.clone());
        let xv = tape.constant(x_train.clone());
        let lin = tape.matmul(xv, wv)?;
        let logits = tape.add_bias(lin, bv)?;
        let loss = crate::losses::cross_entropy(&mut tape, logits, &y_train, "probe")
            .map_err(|e| EvalError::Config(e.to_string()))?;
        let grads = tape.backward(loss)?;
        let g = [grads.wrt(wv), grads.wrt(bv)];
        let mut p = [w, b];
        trainer::adam_step(&mut p, &g, &[PROBE_LR, PROBE_LR], &mut state, &adam)?;
        [w, b] = p;
    }

    let c = n_classes;
    let lin = crate::grad::tensor::matmul(x_test.data(), w.data(), test_idx.len(), k, c);
    let logits: Vec<f64> = lin.iter().enumerate().map(|(i, v)| v + b.data()[i % c]).collect();
    let logp = crate::grad::tensor::log_softmax_rows(&logits, test_idx.len(), c);
    let ce = -y_test.iter().enumerate().map(|(r, &y)| logp[r * c + y]).sum::<f64>() / y_test.len() as f64;
    Ok(InfoEstimate {
        nats: (h - ce).max(0.0),
        label_entropy: h,
        holdout_ce: ce,
        degenerate: false,
    })
}

/// Batch-mean `KL[f(z) ‖ f(z*)]` under deterministic encoding.
pub fn it_label_value(params: &ModelParams, x: &Tensor, mode: MaskMode) -> Result<f64, EvalError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let enc = model::encode(&mut tape, params, &vars, xv, None)?;
    let (relevant, _) = model::disentangle(&mut tape, enc.z, vars.mask_logits, mode, None)?;
    let loss = crate::losses::it_label_loss(&mut tape, &vars, enc.z, relevant)?;
    Ok(tape.value(loss).item())
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            out[t] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` for fewer than two points or a
/// constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Everything an experiment suite needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub train: TrainConfig,
    pub probe: bool,
    pub hidden: Vec<usize>,
    pub infer_mask: MaskMode,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            probe: true,
            hidden: vec![64, 64],
            infer_mask: MaskMode::Hard,
            seeds: (0..5).collect(),
            jobs: 1,
        }
    }
}

/// Trains on `train_set` with `seed` and the suite's layout.
pub fn train_with(cfg: &SuiteConfig, terms: ObjectiveTerms, seed: u64, train_set: &SynthDataset) -> Result<TrainedModel, EvalError> {
    let tc = TrainConfig {
        terms,
        seed,
        ..cfg.train.clone()
    };
    let mc = trainer::model_config_for(train_set, cfg.probe, &cfg.hidden, tc.mode);
    Ok(trainer::train(&tc, &mc, train_set)?)
}

fn run_parallel<T: Send, R: Send>(jobs: usize, tasks: Vec<T>, f: impl Fn(T) -> Result<R, EvalError> + Send + Sync) -> Result<Vec<R>, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| EvalError::Config(e.to_string()))?;
    pool.install(|| tasks.into_par_iter().map(f).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: &'static str,
    pub terms: ObjectiveTerms,
}

/// Baseline, single additions, pairs, Full.
pub fn ablation_variants() -> Vec<Variant> {
    let t = |msr, it, puri: bool| ObjectiveTerms {
        msr,
        it,
        purification: puri.then_some(Purification::Label),
    };
    vec![
        Variant { name: "Baseline", terms: t(false, false, false) },
        Variant { name: "+msr", terms: t(true, false, false) },
        Variant { name: "+IT", terms: t(false, true, false) },
        Variant { name: "+Puri", terms: t(false, false, true) },
        Variant { name: "+msr+IT", terms: t(true, true, false) },
        Variant { name: "+msr+Puri", terms: t(true, false, true) },
        Variant { name: "+IT+Puri", terms: t(false, true, true) },
        Variant { name: "Full", terms: t(true, true, true) },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub holdout: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub mask_on: usize,
    pub recovery: Option<MaskRecovery>,
    pub recall_iii: Option<f64>,
    pub recall_iv: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Accuracy per held-out domain, averaged over seeds.
    pub per_domain: Vec<f64>,
    /// Accuracy per seed, averaged over held-out domains.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub domains: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunResult>,
}

impl SuiteReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn summarize(variants: &[Variant], domains: &[usize], seeds: &[u64], runs: &[RunResult]) -> Vec<AblationRow> {
    variants
        .iter()
        .map(|v| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v.name).collect();
            let per_domain = domains
                .iter()
                .map(|&d| mean(&mine.iter().filter(|r| r.holdout == d).map(|r| r.accuracy).collect::<Vec<_>>()))
                .collect();
            let per_seed: Vec<f64> = seeds
                .iter()
                .map(|&s| mean(&mine.iter().filter(|r| r.seed == s).map(|r| r.accuracy).collect::<Vec<_>>()))
                .collect();
            AblationRow {
                variant: v.name.to_string(),
                per_domain,
                mean: mean(&per_seed),
                std: std_dev(&per_seed),
                per_seed,
            }
        })
        .collect()
}

/// Leave-one-domain-out over every domain, every variant and every seed.
pub fn run_variants(data: &SynthDataset, cfg: &SuiteConfig, variants: &[Variant]) -> Result<SuiteReport, EvalError> {
    if data.n_domains < 2 {
        return Err(EvalError::Config("leave-one-domain-out needs at least 2 domains".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(EvalError::Config("no seeds given".into()));
    }
    let domains: Vec<usize> = (0..data.n_domains).collect();
    let splits: Vec<(SynthDataset, SynthDataset)> = domains
        .iter()
        .map(|&d| data.split_leave_one_out(d))
        .collect::<Result<_, _>>()?;
    let mut tasks = Vec::new();
    for v in variants {
        for &d in &domains {
            for &s in &cfg.seeds {
                tasks.push((*v, d, s));
            }
        }
    }
    let regions = data.region_of_dim.as_deref();
    let runs = run_parallel(cfg.jobs, tasks, |(v, d, seed)| {
        let (train_set, test_set) = &splits[d];
        let run = train_with(cfg, v.terms, seed, train_set)?;
        let params = run.inference_params();
        let probe_ok = params.config.probe && regions.is_some();
        Ok(RunResult {
            variant: v.name.to_string(),
            holdout: d,
            seed,
            accuracy: accuracy(params, test_set, cfg.infer_mask)?,
            mask_on: params.mask_on_count(),
            recovery: probe_ok.then(|| mask_recovery(params, regions)).transpose()?,
            recall_iii: if probe_ok { region_recall(params, regions, Region::III)? } else { None },
            recall_iv: if probe_ok { region_recall(params, regions, Region::IV)? } else { None },
        })
    })?;
    Ok(SuiteReport {
        rows: summarize(variants, &domains, &cfg.seeds, &runs),
        domains,
        seeds: cfg.seeds.clone(),
        runs,
    })
}

pub fn run_ablation(data: &SynthDataset, cfg: &SuiteConfig) -> Result<SuiteReport, EvalError> {
    run_variants(data, cfg, &ablation_variants())
}

pub const REGION3_KEEP: &str = "label purification (keeps III)";
pub const REGION3_DISCARD: &str = "domain purification (discards III)";

pub fn region3_variants() -> Vec<Variant> {
    let base = ObjectiveTerms::full();
    vec![
        Variant {
            name: REGION3_KEEP,
            terms: ObjectiveTerms {
                purification: Some(Purification::Label),
                ..base
            },
        },
        Variant {
            name: REGION3_DISCARD,
            terms: ObjectiveTerms {
                purification: Some(Purification::Domain),
                ..base
            },
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region3Row {
    pub variant: String,
    pub accuracy: f64,
    pub std: f64,
    pub recall_iii: Option<f64>,
    pub recall_iv: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region3Report {
    pub rows: Vec<Region3Row>,
    pub suite: SuiteReport,
}

pub fn region3_experiment(data: &SynthDataset, cfg: &SuiteConfig) -> Result<Region3Report, EvalError> {
    match &data.region_of_dim {
        None => return Err(EvalError::NoGroundTruth),
        Some(map) if !map.contains(&Region::III) => return Err(EvalError::NoRegionIII),
        Some(_) => {}
    }
    if cfg.train.mode != DgMode::Multi {
        return Err(EvalError::Config("the region III experiment needs multi-source training".into()));
    }
    let suite = run_variants(data, cfg, &region3_variants())?;
    let avg = |xs: Vec<Option<f64>>| -> Option<f64> {
        let v: Vec<f64> = xs.into_iter().collect::<Option<_>>()?;
        Some(mean(&v))
    };
    let rows = suite
        .rows
        .iter()
        .map(|row| {
            let mine: Vec<&RunResult> = suite.runs.iter().filter(|r| r.variant == row.variant).collect();
            Region3Row {
                variant: row.variant.clone(),
                accuracy: row.mean,
                std: row.std,
                recall_iii: avg(mine.iter().map(|r| r.recall_iii).collect()),
                recall_iv: avg(mine.iter().map(|r| r.recall_iv).collect()),
            }
        })
        .collect();
    Ok(Region3Report { rows, suite })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyPoint {
    pub step: usize,
    pub it_label: f64,
    pub info_z: f64,
    pub info_relevant: f64,
    /// `Î(z; y) − Î(z*; y)`.
    pub gap: f64,
}

/// Information quantities of each snapshot, measured on `eval_set`.
pub fn sufficiency_trace(
    snapshots: &[(usize, ModelParams)],
    eval_set: &SynthDataset,
    mode: MaskMode,
    split_seed: u64,
) -> Result<Vec<SufficiencyPoint>, EvalError> {
    let x = eval_set.all_features();
    let y = eval_set.labels();
    snapshots
        .par_iter()
        .map(|(step, params)| {
            let (z, relevant, _) = model::features(params, &x, mode)?;
            let info_z = estimate_label_information(&z, &y, eval_set.n_classes, split_seed)?.nats;
            let info_relevant = estimate_label_information(&relevant, &y, eval_set.n_classes, split_seed)?.nats;
            Ok(SufficiencyPoint {
                step: *step,
                it_label: it_label_value(params, &x, mode)?,
                info_z,
                info_relevant,
                gap: info_z - info_relevant,
            })
        })
        .collect()
}
