//! Finite-difference check of the complete training objective.
//!
//! Builds a micro-batch problem with the encoder (so the bottleneck term is
//! live), a mixed mask and fixed noise and pairing, then compares the tape
//! gradient of every parameter coordinate with central differences. The
//! mask uses the anchored straight-through forward so the perturbed loss is
//! smooth in the logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grad::{check_gradient, GradCheckReport, GradError, Tape, Tensor, Var};
use crate::losses::{self, Anchors, Batch, DgMode, LossError, LossWeights, ObjectiveTerms, StepWeights};
use crate::model::{self, init_model, MaskMode, ModelConfig, ModelError, ModelVars};

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveCheck {
    pub n_domains: usize,
    pub n_classes: usize,
    pub batch: usize,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub weights: LossWeights,
    pub terms: ObjectiveTerms,
    pub mode: DgMode,
    pub seed: u64,
    pub tol: f64,
    pub step: f64,
}

impl Default for ObjectiveCheck {
    fn default() -> Self {
        Self {
            n_domains: 2,
            n_classes: 3,
            batch: 8,
            input_dim: 12,
            feature_dim: 16,
            hidden: vec![10],
            weights: LossWeights {
                eps_ib: 0.1,
                ..LossWeights::multi_dg()
            },
            terms: ObjectiveTerms::full(),
            mode: DgMode::Multi,
            seed: 0,
            tol: 1e-4,
            step: 1e-5,
        }
    }
}

pub fn check_objective(cfg: &ObjectiveCheck) -> Result<GradCheckReport, GradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mc = ModelConfig {
        input_dim: cfg.input_dim,
        feature_dim: cfg.feature_dim,
        hidden: cfg.hidden.clone(),
        n_classes: cfg.n_classes,
        n_domains: cfg.n_domains,
        probe: false,
    };
    let mut params = init_model(&mc, rng.random()).map_err(to_grad)?;
    // Half on, half off, away from the threshold.
    for (i, m) in params.mask_logits.data_mut().iter_mut().enumerate() {
        let mag = rng.random_range(0.5..2.0);
        *m = if i % 2 == 0 { -mag } else { mag };
    }

    let x = Tensor::new(
        vec![cfg.batch, cfg.input_dim],
        (0..cfg.batch * cfg.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )?;
    let y: Vec<usize> = (0..cfg.batch).map(|i| i % cfg.n_classes).collect();
    let d: Vec<usize> = (0..cfg.batch).map(|i| (i / cfg.n_classes) % cfg.n_domains).collect();
    let noise = model::sample_noise(&mut rng, cfg.batch, cfg.feature_dim);
    let mut pairing: Vec<usize> = (0..cfg.batch).collect();
    rand::seq::SliceRandom::shuffle(pairing.as_mut_slice(), &mut rng);
    let weights = StepWeights::from(cfg.weights);

    let leaves: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let batch = Batch {
        x: &x,
        y: &y,
        d: &d,
        noise: Some(&noise),
        pairing: &pairing,
    };
    let objective = |tape: &mut Tape, vars: &[Var], anchors: &Anchors| {
        let mv = ModelVars::from_flat(&params, vars.to_vec());
        losses::build_objective(tape, &params, &mv, &batch, weights, cfg.terms, cfg.mode, MaskMode::Hard, anchors)
            .map_err(loss_to_grad)
    };

    // Pin the threshold and the detached teachers at the unperturbed point.
    let mut anchors = Anchors {
        mask: Some(params.mask_logits.data().to_vec()),
        ..Anchors::default()
    };
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
        let graph = objective(&mut tape, &vars, &anchors)?;
        anchors.label_teacher = graph.label_teacher.map(|v| tape.value(v).clone());
        anchors.domain_teacher = graph.domain_teacher.map(|v| tape.value(v).clone());
    }
    let build = |tape: &mut Tape, vars: &[Var]| Ok(objective(tape, vars, &anchors)?.total);
    check_gradient(build, &leaves, cfg.tol, cfg.step)
}

fn to_grad(e: ModelError) -> GradError {
    match e {
        ModelError::Grad(g) => g,
        other => GradError::Build(other.to_string()),
    }
}

fn loss_to_grad(e: LossError) -> GradError {
    match e {
        LossError::Grad(g) => g,
        LossError::Model(m) => to_grad(m),
        other => GradError::Build(other.to_string()),
    }
}
