//! Stochastic encoder, binary-mask disentangler and the two one-layer
//! classifiers (`f` over labels, `g` over domains).

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_HEADER};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{hard_mask, soft_mask, GradError, Tape, Tensor, Var};

/// Mask logit at initialization; `σ(−1) < 0.5`, so every unit starts on.
pub const INITIAL_MASK_LOGIT: f64 = -1.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("non-finite activation after encoder layer {layer}")]
    NonFinite { layer: usize },
    #[error("input width {got} does not match model input width {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter list does not match model layout: {0}")]
    Layout(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MaskMode {
    #[default]
    Hard,
    Soft,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Hard => "hard",
            MaskMode::Soft => "soft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hard" => Some(MaskMode::Hard),
            "soft" => Some(MaskMode::Soft),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Width `k` of `z`, the mask and the classifier inputs.
    pub feature_dim: usize,
    /// Encoder trunk widths (tanh layers).
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub n_domains: usize,
    /// Identity encoder without sampling; mask dims align with raw dims.
    pub probe: bool,
}

impl ModelConfig {
    pub fn probe(input_dim: usize, n_classes: usize, n_domains: usize) -> Self {
        Self {
            input_dim,
            feature_dim: input_dim,
            hidden: Vec::new(),
            n_classes,
            n_domains,
            probe: true,
        }
    }

    pub fn encoder(input_dim: usize, n_classes: usize, n_domains: usize) -> Self {
        Self {
            input_dim,
            feature_dim: input_dim,
            hidden: vec![64, 64],
            n_classes,
            n_domains,
            probe: false,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.n_classes == 0 || self.n_domains == 0 {
            return Err(ModelError::Config("widths and class/domain counts must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(ModelError::Config("hidden widths must be positive".into()));
        }
        if self.probe && self.feature_dim != self.input_dim {
            return Err(ModelError::Config("probe mode requires feature_dim == input_dim".into()));
        }
        Ok(())
    }
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("positive dims"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub trunk: Vec<Dense>,
    /// `μ_θ(x)` head.
    pub mean: Dense,
    /// `log σ²_θ(x)` head.
    pub log_var: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `None` in probe mode.
    pub encoder: Option<Encoder>,
    /// `m̃`, length `k`.
    pub mask_logits: Tensor,
    pub f: Dense,
    pub g: Dense,
}

/// Role of a flattened parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Mask,
    LabelClassifier,
    DomainClassifier,
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.feature_dim;
    let encoder = if config.probe {
        None
    } else {
        let mut trunk = Vec::with_capacity(config.hidden.len());
        let mut width = config.input_dim;
        for &h in &config.hidden {
            trunk.push(Dense::init(&mut rng, width, h));
            width = h;
        }
        Some(Encoder {
            trunk,
            mean: Dense::init(&mut rng, width, k),
            log_var: Dense::init(&mut rng, width, k),
        })
    };
    Ok(ModelParams {
        config: config.clone(),
        encoder,
        mask_logits: Tensor::filled(&[k], INITIAL_MASK_LOGIT),
        f: Dense::init(&mut rng, k, config.n_classes),
        g: Dense::init(&mut rng, k, config.n_domains),
    })
}

impl ModelParams {
    /// Flattened parameters: encoder layers, mask, `f`, `g`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(enc) = &self.encoder {
            for layer in enc.trunk.iter().chain([&enc.mean, &enc.log_var]) {
                out.push(&layer.weight);
                out.push(&layer.bias);
            }
        }
        out.push(&self.mask_logits);
        out.extend([&self.f.weight, &self.f.bias, &self.g.weight, &self.g.bias]);
        out
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let enc = self.encoder.as_ref().map_or(0, |e| 2 * (e.trunk.len() + 2));
        let mut out = vec![ParamGroup::Encoder; enc];
        out.push(ParamGroup::Mask);
        out.extend([ParamGroup::LabelClassifier; 2]);
        out.extend([ParamGroup::DomainClassifier; 2]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(enc) = &self.encoder {
            for i in 0..enc.trunk.len() {
                out.push(format!("encoder.{i}.weight"));
                out.push(format!("encoder.{i}.bias"));
            }
            out.extend(["encoder.mean.weight", "encoder.mean.bias", "encoder.log_var.weight", "encoder.log_var.bias"].map(String::from));
        }
        out.extend(["mask_logits", "f.weight", "f.bias", "g.weight", "g.bias"].map(String::from));
        out
    }

    /// Replaces parameters from a flattened list in [`ModelParams::tensors`] order.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<(), ModelError> {
        let current = self.tensors();
        if values.len() != current.len() {
            return Err(ModelError::Layout(format!("expected {} tensors, got {}", current.len(), values.len())));
        }
        for (i, (new, old)) in values.iter().zip(&current).enumerate() {
            if new.shape() != old.shape() {
                return Err(ModelError::Layout(format!(
                    "tensor {i}: shape {:?} != {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        let mut it = values.into_iter();
        if let Some(enc) = &mut self.encoder {
            for layer in enc.trunk.iter_mut().chain([&mut enc.mean, &mut enc.log_var]) {
                layer.weight = it.next().expect("checked length");
                layer.bias = it.next().expect("checked length");
            }
        }
        self.mask_logits = it.next().expect("checked length");
        self.f.weight = it.next().expect("checked length");
        self.f.bias = it.next().expect("checked length");
        self.g.weight = it.next().expect("checked length");
        self.g.bias = it.next().expect("checked length");
        Ok(())
    }

    pub fn with_tensors(&self, values: Vec<Tensor>) -> Result<ModelParams, ModelError> {
        let mut out = self.clone();
        out.assign(values)?;
        Ok(out)
    }

    pub fn hard_mask(&self) -> Vec<f64> {
        self.mask_logits.data().iter().map(|&m| hard_mask(m)).collect()
    }

    pub fn mask_on_count(&self) -> usize {
        self.hard_mask().iter().filter(|&&m| m == 1.0).count()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter tensor on `tape`, trainable or frozen.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let all: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        ModelVars::from_flat(self, all)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub trunk: Vec<DenseVars>,
    pub mean: Option<DenseVars>,
    pub log_var: Option<DenseVars>,
    pub mask_logits: Var,
    pub f: DenseVars,
    pub g: DenseVars,
    /// Same order as [`ModelParams::tensors`].
    pub all: Vec<Var>,
}

impl ModelVars {
    pub fn from_flat(params: &ModelParams, all: Vec<Var>) -> Self {
        let pair = |i: usize| DenseVars {
            weight: all[i],
            bias: all[i + 1],
        };
        let mut idx = 0;
        let (trunk, mean, log_var) = match &params.encoder {
            Some(enc) => {
                let trunk = (0..enc.trunk.len()).map(|i| pair(2 * i)).collect();
                idx = 2 * enc.trunk.len();
                let mean = pair(idx);
                let log_var = pair(idx + 2);
                idx += 4;
                (trunk, Some(mean), Some(log_var))
            }
            None => (Vec::new(), None, None),
        };
        Self {
            trunk,
            mean,
            log_var,
            mask_logits: all[idx],
            f: pair(idx + 1),
            g: pair(idx + 3),
            all,
        }
    }
}

/// Output of [`encode`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub z: Var,
    pub mean: Var,
    /// `log σ²`; `None` for the identity encoder.
    pub log_var: Option<Var>,
    /// `σ = exp(½ log σ²)`.
    pub std: Option<Var>,
}

fn check_finite(tape: &Tape, v: Var, layer: usize) -> Result<(), ModelError> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer })
    }
}

pub fn dense(tape: &mut Tape, layer: DenseVars, x: Var) -> Result<Var, GradError> {
    let xw = tape.matmul(x, layer.weight)?;
    tape.add_bias(xw, layer.bias)
}

/// Encodes a `[B, input_dim]` batch.
///
/// With `noise = Some(ε)` the latent is the reparameterized sample
/// `z = μ + σ⊙ε`; otherwise `z = μ`.
pub fn encode(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ModelVars,
    x: Var,
    noise: Option<&Tensor>,
) -> Result<Encoded, ModelError> {
    let width = tape.value(x).dims2().1;
    if width != params.config.input_dim {
        return Err(ModelError::InputWidth {
            expected: params.config.input_dim,
            got: width,
        });
    }
    let (Some(mean_head), Some(var_head)) = (vars.mean, vars.log_var) else {
        return Ok(Encoded {
            z: x,
            mean: x,
            log_var: None,
            std: None,
        });
    };
    let mut h = x;
    for (i, &layer) in vars.trunk.iter().enumerate() {
        let pre = dense(tape, layer, h)?;
        h = tape.tanh(pre)?;
        check_finite(tape, h, i)?;
    }
    let head_layer = vars.trunk.len();
    let mean = dense(tape, mean_head, h)?;
    check_finite(tape, mean, head_layer)?;
    let log_var = dense(tape, var_head, h)?;
    let half = tape.scale(log_var, 0.5)?;
    let std = tape.exp(half)?;
    check_finite(tape, std, head_layer)?;
    let z = match noise {
        Some(eps) => {
            let e = tape.constant(eps.clone());
            let spread = tape.mul(std, e)?;
            tape.add(mean, spread)?
        }
        None => mean,
    };
    Ok(Encoded {
        z,
        mean,
        log_var: Some(log_var),
        std: Some(std),
    })
}

/// Draws `ε ~ N(0, I)` of shape `[rows, k]`.
pub fn sample_noise(rng: &mut impl Rng, rows: usize, k: usize) -> Tensor {
    let data = (0..rows * k)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            e
        })
        .collect();
    Tensor::new(vec![rows, k], data).expect("positive dims")
}

/// The mask applied to `z`: `m` (hard, straight-through) or `1 − σ(m̃)` (soft).
///
/// `anchor` pins the hard threshold for gradient checking, see
/// [`crate::grad::OpKind::SteMask`].
pub fn mask_vector(
    tape: &mut Tape,
    logits: Var,
    mode: MaskMode,
    anchor: Option<Vec<f64>>,
) -> Result<(Var, Var), GradError> {
    match mode {
        MaskMode::Hard => {
            let m = match anchor {
                Some(a) => tape.ste_mask_anchored(logits, a)?,
                None => tape.ste_mask(logits)?,
            };
            let neg = tape.scale(m, -1.0)?;
            let complement = tape.add_scalar(neg, 1.0)?;
            Ok((m, complement))
        }
        MaskMode::Soft => {
            let off = tape.sigmoid(logits)?;
            let neg = tape.scale(off, -1.0)?;
            let on = tape.add_scalar(neg, 1.0)?;
            Ok((on, off))
        }
    }
}

/// Splits `z` into `(z*, z′)` with the mask; hard mode gives `z* + z′ = z`
/// exactly and disjoint supports.
pub fn disentangle(
    tape: &mut Tape,
    z: Var,
    logits: Var,
    mode: MaskMode,
    anchor: Option<Vec<f64>>,
) -> Result<(Var, Var), GradError> {
    let k = tape.value(z).dims2().1;
    if tape.value(logits).len() != k {
        return Err(GradError::Conformance {
            op: "disentangle",
            shapes: vec![tape.value(z).shape().to_vec(), tape.value(logits).shape().to_vec()],
        });
    }
    let (on, off) = mask_vector(tape, logits, mode, anchor)?;
    let relevant = tape.mul_row(z, on)?;
    let auxiliary = tape.mul_row(z, off)?;
    Ok((relevant, auxiliary))
}

/// Classifier logits `feat·W + b`.
pub fn logits(tape: &mut Tape, head: DenseVars, feat: Var) -> Result<Var, GradError> {
    dense(tape, head, feat)
}

/// Softmax class probabilities `f(feat)`.
pub fn classify_label(tape: &mut Tape, vars: &ModelVars, feat: Var) -> Result<Var, GradError> {
    let l = logits(tape, vars.f, feat)?;
    tape.softmax(l)
}

/// Softmax domain probabilities `g(feat)`.
pub fn classify_domain(tape: &mut Tape, vars: &ModelVars, feat: Var) -> Result<Var, GradError> {
    let l = logits(tape, vars.g, feat)?;
    tape.softmax(l)
}

/// Deterministic inference: `z = μ(x)`, `z*` by `mode`, `f(z*)` probabilities.
pub fn predict_proba(params: &ModelParams, x: &Tensor, mode: MaskMode) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let enc = encode(&mut tape, params, &vars, xv, None)?;
    let (relevant, _) = disentangle(&mut tape, enc.z, vars.mask_logits, mode, None)?;
    let p = classify_label(&mut tape, &vars, relevant)?;
    Ok(tape.value(p).clone())
}

pub fn predict(params: &ModelParams, x: &Tensor, mode: MaskMode) -> Result<Vec<usize>, ModelError> {
    let p = predict_proba(params, x, mode)?;
    let (rows, _) = p.dims2();
    Ok((0..rows).map(|r| argmax(p.row(r))).collect())
}

/// Deterministic `(z, z*, z′)` for a batch.
pub fn features(params: &ModelParams, x: &Tensor, mode: MaskMode) -> Result<(Tensor, Tensor, Tensor), ModelError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let enc = encode(&mut tape, params, &vars, xv, None)?;
    let (relevant, auxiliary) = disentangle(&mut tape, enc.z, vars.mask_logits, mode, None)?;
    Ok((
        tape.value(enc.z).clone(),
        tape.value(relevant).clone(),
        tape.value(auxiliary).clone(),
    ))
}

/// Index of the largest entry; first wins on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Soft mask values `1 − σ(m̃)`.
pub fn soft_mask_values(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&m| soft_mask(m)).collect()
}
