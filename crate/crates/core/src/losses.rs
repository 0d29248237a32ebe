//! Objective terms and their weighted total.
//!
//! ```text
//! L = L_dis + α(t)·(L_IT_l + L_IT_d) + β(t)·L_puri + γ·L_msr
//! L_dis = CE(f(z*), y) + CE(g(z′), d) + ε_ib·KL[q(z|x) ‖ N(0, I)]
//! ```
//!
//! Single-source training drops `CE(g(z′), d)`, `L_IT_d` and the
//! bottleneck term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{GradError, Tape, Tensor, Var};
use crate::model::{self, disentangle, encode, DenseVars, MaskMode, ModelError, ModelParams, ModelVars};

pub const EPS_IB_SMALL: f64 = 1e-7;
pub const EPS_IB_DEFAULT: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{kind} label {label} out of range for {count} outputs")]
    LabelRange { kind: &'static str, label: usize, count: usize },
    #[error("non-finite value in loss term {term}")]
    NonFinite { term: &'static str },
    #[error("gaussian KL needs σ > 0, got {value} at index {index}")]
    NonPositiveStd { index: usize, value: f64 },
    #[error("batch has {x} feature rows but {y} labels and {d} domains")]
    BatchSize { x: usize, y: usize, d: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eps_ib: f64,
}

impl LossWeights {
    pub fn multi_dg() -> Self {
        Self {
            alpha: 9.0,
            beta: 1.0,
            gamma: 1.0,
            eps_ib: EPS_IB_DEFAULT,
        }
    }

    pub fn single_dg() -> Self {
        Self {
            alpha: 10.0,
            beta: 1.0,
            gamma: 1.0,
            eps_ib: 0.0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::multi_dg()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DgMode {
    #[default]
    Multi,
    Single,
}

/// Which paired purification loss is used, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Purification {
    /// Through `f`: `z′` must not move label predictions.
    Label,
    /// Through `g`: `z*` must not move domain predictions.
    Domain,
}

/// Optional terms on top of `L_dis`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub msr: bool,
    pub it: bool,
    pub purification: Option<Purification>,
}

impl ObjectiveTerms {
    pub fn full() -> Self {
        Self {
            msr: true,
            it: true,
            purification: Some(Purification::Label),
        }
    }

    pub fn baseline() -> Self {
        Self {
            msr: false,
            it: false,
            purification: None,
        }
    }
}

impl Default for ObjectiveTerms {
    fn default() -> Self {
        Self::full()
    }
}

/// Unweighted term values and the weights applied at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_label: f64,
    pub ce_domain: f64,
    pub ib: f64,
    /// `ce_label + ce_domain + ε_ib·ib`.
    pub dis: f64,
    pub it_l: f64,
    pub it_d: f64,
    pub puri: f64,
    pub msr: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    /// `dis + α(it_l + it_d) + β·puri + γ·msr`.
    pub fn combine(dis: f64, it_l: f64, it_d: f64, puri: f64, msr: f64, alpha: f64, beta: f64, gamma: f64) -> Result<Self, LossError> {
        for (term, v) in [("dis", dis), ("it_l", it_l), ("it_d", it_d), ("puri", puri), ("msr", msr)] {
            if !v.is_finite() {
                return Err(LossError::NonFinite { term });
            }
        }
        Ok(Self {
            dis,
            it_l,
            it_d,
            puri,
            msr,
            total: dis + alpha * (it_l + it_d) + beta * puri + gamma * msr,
            alpha,
            beta,
            gamma,
            ..Self::default()
        })
    }
}

/// Closed-form `KL[N(μ, diag σ²) ‖ N(0, I)]`, averaged over batch rows.
pub fn gaussian_kl(mean: &Tensor, std: &Tensor) -> Result<f64, LossError> {
    if let Some((index, &value)) = std.data().iter().enumerate().find(|(_, &s)| !(s > 0.0)) {
        return Err(LossError::NonPositiveStd { index, value });
    }
    let rows = mean.dims2().0 as f64;
    let total: f64 = mean
        .data()
        .iter()
        .zip(std.data())
        .map(|(&m, &s)| m * m + s * s - (s * s).ln() - 1.0)
        .sum();
    Ok(0.5 * total / rows)
}

/// Graph form of [`gaussian_kl`] parameterized by `log σ²`.
pub fn gaussian_kl_term(tape: &mut Tape, mean: Var, log_var: Var) -> Result<Var, GradError> {
    let rows = tape.value(mean).dims2().0 as f64;
    let m2 = tape.square(mean)?;
    let var = tape.exp(log_var)?;
    let a = tape.add(m2, var)?;
    let b = tape.sub(a, log_var)?;
    let c = tape.add_scalar(b, -1.0)?;
    let s = tape.sum(c)?;
    tape.scale(s, 0.5 / rows)
}

fn one_hot(labels: &[usize], count: usize, kind: &'static str) -> Result<Tensor, LossError> {
    let mut data = vec![0.0; labels.len() * count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= count {
            return Err(LossError::LabelRange { kind, label: l, count });
        }
        data[i * count + l] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), count], data)?)
}

/// Batch-mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], kind: &'static str) -> Result<Var, LossError> {
    let (rows, count) = tape.value(logits).dims2();
    if rows != labels.len() {
        return Err(LossError::BatchSize {
            x: rows,
            y: labels.len(),
            d: labels.len(),
        });
    }
    let targets = tape.constant(one_hot(labels, count, kind)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(targets, logp)?;
    let s = tape.sum(picked)?;
    Ok(tape.scale(s, -1.0 / rows as f64)?)
}

/// Batch-mean `KL[softmax(teacher) ‖ softmax(student)]` with the teacher detached.
pub fn kl_to_teacher(tape: &mut Tape, teacher_logits: Var, student_logits: Var) -> Result<Var, GradError> {
    let rows = tape.value(student_logits).dims2().0 as f64;
    let t = tape.detach(teacher_logits)?;
    let log_p = tape.log_softmax(t)?;
    let p = tape.exp(log_p)?;
    let log_q = tape.log_softmax(student_logits)?;
    let diff = tape.sub(log_p, log_q)?;
    let w = tape.mul(p, diff)?;
    let s = tape.sum(w)?;
    tape.scale(s, 1.0 / rows)
}

/// `KL[f(z) ‖ f(z*)]`.
pub fn it_label_loss(tape: &mut Tape, vars: &ModelVars, z: Var, relevant: Var) -> Result<Var, GradError> {
    let teacher = model::logits(tape, vars.f, z)?;
    let student = model::logits(tape, vars.f, relevant)?;
    kl_to_teacher(tape, teacher, student)
}

/// `KL[g(z) ‖ g(z′)]`.
pub fn it_domain_loss(tape: &mut Tape, vars: &ModelVars, z: Var, auxiliary: Var) -> Result<Var, GradError> {
    let teacher = model::logits(tape, vars.g, z)?;
    let student = model::logits(tape, vars.g, auxiliary)?;
    kl_to_teacher(tape, teacher, student)
}

/// `Σ_i (1 − σ(m̃_i))`.
pub fn msr_loss(tape: &mut Tape, mask_logits: Var) -> Result<Var, GradError> {
    let k = tape.value(mask_logits).len() as f64;
    let s = tape.sigmoid(mask_logits)?;
    let total = tape.sum(s)?;
    let neg = tape.scale(total, -1.0)?;
    tape.add_scalar(neg, k)
}

/// In-batch pairing: sample `order[t]` is paired with `order[(t + 1) % B]`.
pub fn cyclic_pairs(order: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n = order.len();
    let first = order.to_vec();
    let second = (0..n).map(|t| order[(t + 1) % n]).collect();
    (first, second)
}

/// A paired purification value; `degenerate` marks a batch too small to pair.
#[derive(Clone, Copy, Debug)]
pub struct PairedTerm {
    pub value: Var,
    pub degenerate: bool,
}

/// Paired purification through `head`:
///
/// `mean_t MSE(h(keep_i), h(keep_i + add_j)) + MSE(h(keep_j), h(keep_j + add_i))`
///
/// over pairs `(i, j)` from [`cyclic_pairs`], with `h` the softmax of `head`.
pub fn paired_purification(
    tape: &mut Tape,
    head: DenseVars,
    keep: Var,
    add: Var,
    order: &[usize],
) -> Result<PairedTerm, GradError> {
    if order.len() < 2 {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(PairedTerm {
            value: zero,
            degenerate: true,
        });
    }
    let (first, second) = cyclic_pairs(order);
    let one_side = |tape: &mut Tape, a: &[usize], b: &[usize]| -> Result<Var, GradError> {
        let keep_a = tape.select_rows(keep, a.to_vec())?;
        let add_b = tape.select_rows(add, b.to_vec())?;
        let mixed = tape.add(keep_a, add_b)?;
        let lp = model::logits(tape, head, keep_a)?;
        let p = tape.softmax(lp)?;
        let lq = model::logits(tape, head, mixed)?;
        let q = tape.softmax(lq)?;
        let d = tape.sub(p, q)?;
        let sq = tape.square(d)?;
        tape.mean(sq)
    };
    let a = one_side(tape, &first, &second)?;
    let b = one_side(tape, &second, &first)?;
    Ok(PairedTerm {
        value: tape.add(a, b)?,
        degenerate: false,
    })
}

/// `L^f_puri`: keep `z*`, add another sample's `z′`, compare `f` outputs.
pub fn purification_label_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    relevant: Var,
    auxiliary: Var,
    order: &[usize],
) -> Result<PairedTerm, GradError> {
    paired_purification(tape, vars.f, relevant, auxiliary, order)
}

/// `L^g_puri`: keep `z′`, add another sample's `z*`, compare `g` outputs.
pub fn purification_domain_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    relevant: Var,
    auxiliary: Var,
    order: &[usize],
) -> Result<PairedTerm, GradError> {
    paired_purification(tape, vars.g, auxiliary, relevant, order)
}

/// Weights in effect at one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eps_ib: f64,
}

impl From<LossWeights> for StepWeights {
    fn from(w: LossWeights) -> Self {
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            eps_ib: w.eps_ib,
        }
    }
}

/// One mini-batch and the randomness used to evaluate the objective on it.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub y: &'a [usize],
    pub d: &'a [usize],
    /// `ε` for the reparameterized sample; `None` encodes deterministically.
    pub noise: Option<&'a Tensor>,
    /// Shuffled order of batch rows used for purification pairing.
    pub pairing: &'a [usize],
}

/// Values pinned at an unperturbed point so a finite-difference check sees
/// the same function the tape differentiates: the hard-mask threshold and
/// the detached teacher logits `f(z)`, `g(z)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Anchors {
    pub mask: Option<Vec<f64>>,
    pub label_teacher: Option<Tensor>,
    pub domain_teacher: Option<Tensor>,
}

/// Graph handles of every objective term.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveGraph {
    pub total: Var,
    pub z: Var,
    pub relevant: Var,
    pub auxiliary: Var,
    pub ce_label: Var,
    pub ce_domain: Option<Var>,
    pub ib: Option<Var>,
    pub it_l: Option<Var>,
    pub it_d: Option<Var>,
    /// Teacher logits feeding the IT terms.
    pub label_teacher: Option<Var>,
    pub domain_teacher: Option<Var>,
    pub puri: Option<Var>,
    pub msr: Option<Var>,
    pub puri_degenerate: bool,
    pub breakdown: LossBreakdown,
}

/// Records the full objective on `tape` for `batch`.
///
/// `anchors` are empty in training; see [`Anchors`].
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ModelVars,
    batch: &Batch<'_>,
    weights: StepWeights,
    terms: ObjectiveTerms,
    mode: DgMode,
    mask_mode: MaskMode,
    anchors: &Anchors,
) -> Result<ObjectiveGraph, LossError> {
    let rows = batch.x.dims2().0;
    if rows != batch.y.len() || rows != batch.d.len() {
        return Err(LossError::BatchSize {
            x: rows,
            y: batch.y.len(),
            d: batch.d.len(),
        });
    }
    let multi = mode == DgMode::Multi;
    let x = tape.constant(batch.x.clone());
    let enc = encode(tape, params, vars, x, batch.noise)?;
    let (relevant, auxiliary) = disentangle(tape, enc.z, vars.mask_logits, mask_mode, anchors.mask.clone())?;

    let f_logits = model::logits(tape, vars.f, relevant)?;
    let ce_label = cross_entropy(tape, f_logits, batch.y, "class")?;
    let mut dis = ce_label;
    let mut ce_domain = None;
    let mut ib = None;
    if multi {
        let g_logits = model::logits(tape, vars.g, auxiliary)?;
        let ce = cross_entropy(tape, g_logits, batch.d, "domain")?;
        dis = tape.add(dis, ce)?;
        ce_domain = Some(ce);
        if let Some(log_var) = enc.log_var {
            let kl = gaussian_kl_term(tape, enc.mean, log_var)?;
            let scaled = tape.scale(kl, weights.eps_ib)?;
            dis = tape.add(dis, scaled)?;
            ib = Some(kl);
        }
    }

    let mut total = dis;
    let (mut it_l, mut it_d) = (None, None);
    let (mut label_teacher, mut domain_teacher) = (None, None);
    let teacher = |tape: &mut Tape, pinned: &Option<Tensor>, head: model::DenseVars| match pinned {
        Some(t) => Ok::<Var, GradError>(tape.constant(t.clone())),
        None => model::logits(tape, head, enc.z),
    };
    if terms.it {
        let t = teacher(tape, &anchors.label_teacher, vars.f)?;
        let student = model::logits(tape, vars.f, relevant)?;
        let l = kl_to_teacher(tape, t, student)?;
        let mut sum = l;
        it_l = Some(l);
        label_teacher = Some(t);
        if multi {
            let t = teacher(tape, &anchors.domain_teacher, vars.g)?;
            let student = model::logits(tape, vars.g, auxiliary)?;
            let d = kl_to_teacher(tape, t, student)?;
            sum = tape.add(sum, d)?;
            it_d = Some(d);
            domain_teacher = Some(t);
        }
        let scaled = tape.scale(sum, weights.alpha)?;
        total = tape.add(total, scaled)?;
    }
    let mut puri = None;
    let mut puri_degenerate = false;
    if let Some(kind) = terms.purification {
        let term = match kind {
            Purification::Label => purification_label_loss(tape, vars, relevant, auxiliary, batch.pairing)?,
            Purification::Domain => purification_domain_loss(tape, vars, relevant, auxiliary, batch.pairing)?,
        };
        puri_degenerate = term.degenerate;
        let scaled = tape.scale(term.value, weights.beta)?;
        total = tape.add(total, scaled)?;
        puri = Some(term.value);
    }
    let mut msr = None;
    if terms.msr {
        let m = msr_loss(tape, vars.mask_logits)?;
        let scaled = tape.scale(m, weights.gamma)?;
        total = tape.add(total, scaled)?;
        msr = Some(m);
    }

    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let mut breakdown = LossBreakdown::combine(
        tape.value(dis).item(),
        val(it_l),
        val(it_d),
        val(puri),
        val(msr),
        weights.alpha,
        weights.beta,
        weights.gamma,
    )?;
    breakdown.ce_label = tape.value(ce_label).item();
    breakdown.ce_domain = val(ce_domain);
    breakdown.ib = val(ib);
    for (term, v) in [
        ("ce_label", breakdown.ce_label),
        ("ce_domain", breakdown.ce_domain),
        ("ib", breakdown.ib),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite { term });
        }
    }
    breakdown.total = tape.value(total).item();
    if !breakdown.total.is_finite() {
        return Err(LossError::NonFinite { term: "total" });
    }

    Ok(ObjectiveGraph {
        total,
        z: enc.z,
        relevant,
        auxiliary,
        ce_label,
        ce_domain,
        ib,
        it_l,
        it_d,
        label_teacher,
        domain_teacher,
        puri,
        msr,
        puri_degenerate,
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Dense, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn gaussian_kl_closed_form_values() {
        let zero = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let one = Tensor::filled(&[2, 3], 1.0);
        assert_eq!(gaussian_kl(&zero, &one).unwrap(), 0.0);
        let kl = gaussian_kl(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        assert!(matches!(
            gaussian_kl(&Tensor::vector(vec![0.0, 0.0]), &Tensor::vector(vec![1.0, 0.0])),
            Err(LossError::NonPositiveStd { index: 1, .. })
        ));
    }

    #[test]
    fn graph_kl_matches_closed_form() {
        let mean = Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let log_var = Tensor::new(vec![2, 2], vec![0.2, -0.5, 1.0, 0.0]).unwrap();
        let std = log_var.map(|l| (0.5 * l).exp());
        let mut tape = Tape::new();
        let m = tape.param(mean.clone());
        let lv = tape.param(log_var);
        let kl = gaussian_kl_term(&mut tape, m, lv).unwrap();
        assert!((scalar(&tape, kl) - gaussian_kl(&mean, &std).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kl_of_hand_set_distributions() {
        // p = [.5, .5], q = [.9, .1] as logits.
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let q = tape.param(Tensor::new(vec![1, 2], vec![0.9f64.ln(), 0.1f64.ln()]).unwrap());
        let kl = kl_to_teacher(&mut tape, p, q).unwrap();
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((scalar(&tape, kl) - expect).abs() < 1e-12);
        assert!((expect - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kl_teacher_receives_no_gradient() {
        let mut tape = Tape::new();
        let t = tape.param(Tensor::new(vec![1, 3], vec![0.2, 1.0, -0.4]).unwrap());
        let s = tape.param(Tensor::new(vec![1, 3], vec![0.0, 0.5, 0.0]).unwrap());
        let kl = kl_to_teacher(&mut tape, t, s).unwrap();
        let g = tape.backward(kl).unwrap();
        assert!(g.wrt(t).data().iter().all(|&v| v == 0.0));
        assert!(g.wrt(s).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn msr_values_and_gradient_sign() {
        let mut tape = Tape::new();
        let m = tape.param(Tensor::zeros(&[10]));
        let l = msr_loss(&mut tape, m).unwrap();
        assert_eq!(scalar(&tape, l), 5.0);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(m).data().iter().all(|&v| v == -0.25));

        let mut tape = Tape::new();
        let m = tape.param(Tensor::filled(&[4], 800.0));
        let l = msr_loss(&mut tape, m).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_and_perfect_predictions() {
        // Uniform over C classes and N domains: ln C + ln N.
        let mut tape = Tape::new();
        let lf = tape.param(Tensor::zeros(&[3, 4]));
        let lg = tape.param(Tensor::zeros(&[3, 2]));
        let a = cross_entropy(&mut tape, lf, &[0, 1, 3], "class").unwrap();
        let b = cross_entropy(&mut tape, lg, &[1, 0, 1], "domain").unwrap();
        let total = scalar(&tape, a) + scalar(&tape, b);
        assert!((total - (4f64.ln() + 2f64.ln())).abs() < 1e-12);

        let mut tape = Tape::new();
        let confident = tape.param(Tensor::new(vec![2, 2], vec![50.0, -50.0, -50.0, 50.0]).unwrap());
        let ce = cross_entropy(&mut tape, confident, &[0, 1], "class").unwrap();
        assert!(scalar(&tape, ce) < 1e-30);

        assert!(matches!(
            cross_entropy(&mut tape, confident, &[0, 2], "class"),
            Err(LossError::LabelRange { label: 2, count: 2, .. })
        ));
    }

    fn probe_vars(k: usize, classes: usize, domains: usize, seed: u64) -> (ModelParams, Tape, ModelVars) {
        let params = init_model(&ModelConfig::probe(k, classes, domains), seed).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        (params, tape, vars)
    }

    #[test]
    fn it_label_loss_is_zero_with_mask_all_on() {
        let (_, mut tape, vars) = probe_vars(5, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = tape.constant(model::sample_noise(&mut rng, 4, 5));
        let (rel, _) = disentangle(&mut tape, z, vars.mask_logits, MaskMode::Hard, None).unwrap();
        let l = it_label_loss(&mut tape, &vars, z, rel).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }

    #[test]
    fn purification_is_zero_without_auxiliary_signal() {
        let (_, mut tape, vars) = probe_vars(4, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rel = tape.constant(model::sample_noise(&mut rng, 4, 4));
        let aux = tape.constant(Tensor::zeros(&[4, 4]));
        let p = purification_label_loss(&mut tape, &vars, rel, aux, &[2, 0, 3, 1]).unwrap();
        assert_eq!(scalar(&tape, p.value), 0.0);
        let d = purification_domain_loss(&mut tape, &vars, aux, rel, &[2, 0, 3, 1]).unwrap();
        assert_eq!(scalar(&tape, d.value), 0.0);
    }

    #[test]
    fn purification_ignores_dims_the_classifier_ignores() {
        let (mut params, _, _) = probe_vars(4, 3, 2, 3);
        // z* lives on dims 0..2, z' on dims 2..4, and f reads only dims 0..2.
        let mut w = params.f.weight.clone();
        for r in 2..4 {
            for c in 0..3 {
                w.data_mut()[r * 3 + c] = 0.0;
            }
        }
        params.f = Dense {
            weight: w,
            bias: params.f.bias.clone(),
        };
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let rel = tape.constant(Tensor::new(vec![3, 4], vec![1.0, 2.0, 0.0, 0.0, -1.0, 0.5, 0.0, 0.0, 0.3, 0.3, 0.0, 0.0]).unwrap());
        let aux = tape.constant(Tensor::new(vec![3, 4], vec![0.0, 0.0, 4.0, -2.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, -3.0, 2.5]).unwrap());
        let p = purification_label_loss(&mut tape, &vars, rel, aux, &[0, 1, 2]).unwrap();
        assert!(scalar(&tape, p.value).abs() < 1e-15);
    }

    #[test]
    fn purification_of_single_sample_is_degenerate() {
        let (_, mut tape, vars) = probe_vars(3, 2, 2, 0);
        let rel = tape.constant(Tensor::filled(&[1, 3], 1.0));
        let aux = tape.constant(Tensor::filled(&[1, 3], 2.0));
        let p = purification_label_loss(&mut tape, &vars, rel, aux, &[0]).unwrap();
        assert!(p.degenerate);
        assert_eq!(scalar(&tape, p.value), 0.0);
    }

    #[test]
    fn combine_arithmetic() {
        let b = LossBreakdown::combine(1.0, 2.0, 3.0, 4.0, 5.0, 9.0, 1.0, 1.0).unwrap();
        assert_eq!(b.total, 55.0);
        let b = LossBreakdown::combine(1.5, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(b.total, 1.5);
        let b = LossBreakdown::combine(0.0, 0.0, 0.0, 0.0, 0.0, 9.0, 1.0, 1.0).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(matches!(
            LossBreakdown::combine(0.0, f64::NAN, 0.0, 0.0, 0.0, 9.0, 1.0, 1.0),
            Err(LossError::NonFinite { term: "it_l" })
        ));
    }

    #[test]
    fn single_dg_excludes_domain_terms() {
        let params = init_model(&ModelConfig::encoder(4, 2, 1), 0).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = model::sample_noise(&mut rng, 4, 4);
        let noise = model::sample_noise(&mut rng, 4, 4);
        let batch = Batch {
            x: &x,
            y: &[0, 1, 1, 0],
            d: &[0, 0, 0, 0],
            noise: Some(&noise),
            pairing: &[0, 1, 2, 3],
        };
        let graph = build_objective(
            &mut tape,
            &params,
            &vars,
            &batch,
            LossWeights::single_dg().into(),
            ObjectiveTerms::full(),
            DgMode::Single,
            MaskMode::Hard,
            &Anchors::default(),
        )
        .unwrap();
        assert!(graph.ce_domain.is_none() && graph.it_d.is_none() && graph.ib.is_none());
        let grads = tape.backward(graph.total).unwrap();
        for v in [vars.g.weight, vars.g.bias] {
            assert!(grads.wrt(v).data().iter().all(|&x| x == 0.0));
        }
    }
}
