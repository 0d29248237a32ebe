//! Joint optimization of encoder, mask and classifiers.
//!
//! Per step: draw a batch uniformly from the pooled training set, encode,
//! split with the mask, evaluate the objective with warm-up weights
//! `α(t)`, `β(t)` and fixed `γ`, back-propagate (straight-through for the
//! mask), take an Adam step and fold the new parameters into the running
//! average once `sma_start` is reached.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{GradError, Tape, Tensor};
use crate::losses::{self, Anchors, Batch, DgMode, LossBreakdown, LossError, LossWeights, ObjectiveTerms, StepWeights};
use crate::model::{self, init_model, MaskMode, ModelConfig, ModelError, ModelParams, ParamGroup};
use crate::synth::SynthDataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("non-finite {term} at step {step}; keeping the parameters from step {}", step - 1)]
    NonFinite {
        step: usize,
        term: String,
        last_good: Box<ModelParams>,
    },
    #[error("non-finite gradient in parameter tensor {tensor}")]
    NonFiniteGradient { tensor: usize },
    #[error("moving average has no contributions yet")]
    SmaNotStarted,
    #[error(transparent)]
    Loss(LossError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_mask: f64,
    pub lr_rest: f64,
    pub weights: LossWeights,
    /// First step (1-based) included in the moving average.
    pub sma_start: usize,
    pub mode: DgMode,
    pub seed: u64,
    pub terms: ObjectiveTerms,
    pub train_mask: MaskMode,
    /// Reparameterized sampling of `z` during training (ignored by the
    /// identity encoder).
    pub stochastic: bool,
    pub adam: AdamConfig,
    /// Keep a copy of the raw parameters every this many steps.
    pub snapshot_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            lr_mask: 3.5e-4,
            lr_rest: 5e-5,
            weights: LossWeights::multi_dg(),
            sma_start: 100,
            mode: DgMode::Multi,
            seed: 0,
            terms: ObjectiveTerms::full(),
            train_mask: MaskMode::Hard,
            stochastic: true,
            adam: AdamConfig::default(),
            snapshot_every: None,
        }
    }
}

impl TrainConfig {
    pub fn single_dg() -> Self {
        Self {
            lr_mask: 5e-3,
            weights: LossWeights::single_dg(),
            mode: DgMode::Single,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.sma_start >= self.steps {
            return Err(TrainError::Config(format!(
                "sma_start ({}) must be below steps ({})",
                self.sma_start, self.steps
            )));
        }
        if !(self.lr_mask > 0.0) || !(self.lr_rest > 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        let w = self.weights;
        for (name, v) in [("alpha", w.alpha), ("beta", w.beta), ("gamma", w.gamma), ("eps_ib", w.eps_ib)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TrainError::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.snapshot_every == Some(0) {
            return Err(TrainError::Config("snapshot_every must be positive".into()));
        }
        Ok(())
    }
}

/// Warm-up `final·(2/(1 + e^{−10·step/T}) − 1)`; `T = 0` returns `final`.
pub fn schedule_weight(step: usize, horizon: usize, final_value: f64) -> f64 {
    if horizon == 0 {
        return final_value;
    }
    let p = step.min(horizon) as f64 / horizon as f64;
    final_value * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

/// Bias-corrected first and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One Adam update with a learning rate per tensor. Leaves everything
/// untouched when any gradient is non-finite.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    lrs: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if let Some(tensor) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { tensor });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = lrs[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gv;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Running arithmetic mean of parameter states.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SmaState {
    sum: Option<Vec<Tensor>>,
    count: usize,
}

impl SmaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds `params` when `step >= start` (steps are 1-based).
    pub fn update(&mut self, params: &[Tensor], step: usize, start: usize) {
        if step < start {
            return;
        }
        match &mut self.sum {
            None => self.sum = Some(params.to_vec()),
            Some(sum) => {
                for (acc, p) in sum.iter_mut().zip(params) {
                    for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
                        *a += v;
                    }
                }
            }
        }
        self.count += 1;
    }

    pub fn snapshot(&self) -> Result<Vec<Tensor>, TrainError> {
        let sum = self.sum.as_ref().ok_or(TrainError::SmaNotStarted)?;
        let n = self.count as f64;
        Ok(sum.iter().map(|t| t.map(|v| v / n)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub mask_on: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    /// Steps whose purification batch was too small to pair.
    pub degenerate_pairing_steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub raw: ModelParams,
    pub sma: Option<ModelParams>,
    pub metrics: RunMetrics,
    /// `(step, raw parameters)` every `snapshot_every` steps.
    pub snapshots: Vec<(usize, ModelParams)>,
}

impl TrainedModel {
    /// Averaged parameters when available, otherwise the raw ones.
    pub fn inference_params(&self) -> &ModelParams {
        self.sma.as_ref().unwrap_or(&self.raw)
    }
}

/// Learning rate for every flattened parameter tensor.
pub fn learning_rates(params: &ModelParams, cfg: &TrainConfig) -> Vec<f64> {
    params
        .groups()
        .into_iter()
        .map(|g| if g == ParamGroup::Mask { cfg.lr_mask } else { cfg.lr_rest })
        .collect()
}

/// Model layout for `data` in probe or encoder mode.
pub fn model_config_for(data: &SynthDataset, probe: bool, hidden: &[usize], mode: DgMode) -> ModelConfig {
    let n_domains = match mode {
        DgMode::Multi => data.n_domains,
        DgMode::Single => data.n_domains.max(1),
    };
    let mut cfg = if probe {
        ModelConfig::probe(data.dims, data.n_classes, n_domains)
    } else {
        ModelConfig::encoder(data.dims, data.n_classes, n_domains)
    };
    if !probe {
        cfg.hidden = hidden.to_vec();
    }
    cfg
}

pub fn train(config: &TrainConfig, model_config: &ModelConfig, data: &SynthDataset) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    if config.mode == DgMode::Multi && data.n_domains < 2 {
        return Err(TrainError::Config(format!(
            "multi-source training needs at least 2 domains, dataset has {}",
            data.n_domains
        )));
    }
    if data.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if model_config.input_dim != data.dims || model_config.n_classes != data.n_classes {
        return Err(TrainError::Config("model layout does not match dataset".into()));
    }
    if config.mode == DgMode::Multi && model_config.n_domains != data.n_domains {
        return Err(TrainError::Config("domain classifier width does not match dataset".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init_model(model_config, rng.random())?;
    let lrs = learning_rates(&params, config);
    let mut flat: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let mut adam = AdamState::new(&params.tensors());
    let mut sma = SmaState::new();
    let mut metrics = RunMetrics::default();
    let mut snapshots = Vec::new();

    let n = data.len();
    let labels = data.labels();
    let domains = data.domains();
    let use_noise = config.stochastic && !model_config.probe;
    let w = config.weights;

    for step in 1..=config.steps {
        let idx: Vec<usize> = if config.batch_size <= n {
            index::sample(&mut rng, n, config.batch_size).into_vec()
        } else {
            (0..config.batch_size).map(|_| rng.random_range(0..n)).collect()
        };
        let x = data.features(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let d: Vec<usize> = match config.mode {
            DgMode::Multi => idx.iter().map(|&i| domains[i]).collect(),
            DgMode::Single => vec![0; idx.len()],
        };
        let noise = use_noise.then(|| model::sample_noise(&mut rng, idx.len(), model_config.feature_dim));
        let mut pairing: Vec<usize> = (0..idx.len()).collect();
        pairing.shuffle(&mut rng);

        let weights = StepWeights {
            alpha: schedule_weight(step, config.steps, w.alpha),
            beta: schedule_weight(step, config.steps, w.beta),
            gamma: w.gamma,
            eps_ib: w.eps_ib,
        };
        let batch = Batch {
            x: &x,
            y: &y,
            d: &d,
            noise: noise.as_ref(),
            pairing: &pairing,
        };
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let graph = match losses::build_objective(
            &mut tape,
            &params,
            &vars,
            &batch,
            weights,
            config.terms,
            config.mode,
            config.train_mask,
            &Anchors::default(),
        ) {
            Ok(g) => g,
            Err(LossError::NonFinite { term }) => {
                return Err(TrainError::NonFinite {
                    step,
                    term: term.to_string(),
                    last_good: Box::new(params),
                })
            }
            Err(LossError::Model(ModelError::NonFinite { layer })) => {
                return Err(TrainError::NonFinite {
                    step,
                    term: format!("encoder layer {layer}"),
                    last_good: Box::new(params),
                })
            }
            Err(e) => return Err(TrainError::Loss(e)),
        };
        if graph.puri_degenerate {
            metrics.degenerate_pairing_steps += 1;
        }
        let grads = tape.backward(graph.total)?;
        let grads: Vec<Tensor> = vars.all.iter().map(|&v| grads.wrt(v)).collect();
        if let Err(TrainError::NonFiniteGradient { tensor }) = adam_step(&mut flat, &grads, &lrs, &mut adam, &config.adam) {
            return Err(TrainError::NonFinite {
                step,
                term: format!("gradient of {}", params.names()[tensor]),
                last_good: Box::new(params),
            });
        }
        params.assign(flat.clone())?;
        sma.update(&flat, step, config.sma_start);

        metrics.steps.push(StepRecord {
            step,
            loss: graph.breakdown,
            mask_on: params.mask_on_count(),
        });
        if let Some(every) = config.snapshot_every {
            if step % every == 0 {
                snapshots.push((step, params.clone()));
            }
        }
    }

    let sma = match sma.snapshot() {
        Ok(avg) => Some(params.with_tensors(avg)?),
        Err(_) => None,
    };
    Ok(TrainedModel {
        raw: params,
        sma,
        metrics,
        snapshots,
    })
}
