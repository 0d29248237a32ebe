use super::tensor::{self, sigmoid, Tensor};
use super::GradError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operations the tape knows how to differentiate.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    /// `[m,k]·[k,n]`.
    MatMul,
    Add,
    Sub,
    /// Elementwise product of equal shapes.
    Mul,
    Sigmoid,
    Tanh,
    SoftmaxRows,
    LogSoftmaxRows,
    Log,
    Exp,
    Sum,
    Mean,
    Square,
    /// `[r,c] + [c]` broadcast over rows.
    AddBias,
    /// `[r,c] ⊙ [c]` broadcast over rows.
    MulRow,
    ConcatCols,
    Scale(f64),
    AddScalar(f64),
    SelectRows(Vec<usize>),
    /// Binary threshold `1(σ(m̃) < 0.5)` with surrogate gradient `d(1 − σ(m̃))/dm̃`.
    ///
    /// With an anchor the forward value is `hard(anchor) + s(m̃) − s(anchor)`,
    /// `s = 1 − σ`, which equals the hard mask at the anchor and whose exact
    /// derivative is the surrogate. Gradient checks perturb around the anchor.
    SteMask { anchor: Option<Vec<f64>> },
    /// Forward identity, no gradient.
    Detach,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::SoftmaxRows => "softmax",
            OpKind::LogSoftmaxRows => "log_softmax",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Square => "square",
            OpKind::AddBias => "add_bias",
            OpKind::MulRow => "mul_row",
            OpKind::ConcatCols => "concat",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::SelectRows(_) => "select_rows",
            OpKind::SteMask { .. } => "ste_mask",
            OpKind::Detach => "detach",
        }
    }
}

/// Hard `{0,1}` mask under the on-when-`σ(m̃) < 0.5` convention.
pub fn hard_mask(logit: f64) -> f64 {
    if sigmoid(logit) < 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Soft surrogate `1 − σ(m̃)`.
pub fn soft_mask(logit: f64) -> f64 {
    1.0 - sigmoid(logit)
}

#[derive(Debug)]
struct Node {
    kind: OpKind,
    parents: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar output with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zeros when it is not on any path to the output.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> &OpKind {
        &self.nodes[var.0].kind
    }

    pub fn parents(&self, var: Var) -> &[Var] {
        &self.nodes[var.0].parents
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Leaf, Vec::new(), value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Leaf, Vec::new(), value, false)
    }

    fn push(&mut self, kind: OpKind, parents: Vec<Var>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            kind,
            parents,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, kind: &OpKind, parents: &[Var]) -> GradError {
        GradError::Conformance {
            op: kind.name(),
            shapes: parents
                .iter()
                .map(|p| self.nodes[p.0].value.shape().to_vec())
                .collect(),
        }
    }

    /// Computes `kind` on `parents`, records the node and returns its handle.
    pub fn evaluate(&mut self, kind: OpKind, parents: &[Var]) -> Result<Var, GradError> {
        let arity = match kind {
            OpKind::Leaf => return Err(GradError::Arity { op: "leaf", expected: 0, got: parents.len() }),
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::AddBias | OpKind::MulRow => Some(2),
            OpKind::ConcatCols => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if parents.len() != n {
                return Err(GradError::Arity {
                    op: kind.name(),
                    expected: n,
                    got: parents.len(),
                });
            }
        }
        if let Some(bad) = parents.iter().find(|p| p.0 >= self.nodes.len()) {
            return Err(GradError::UnknownVar { index: bad.0 });
        }
        let value = self.forward(&kind, parents)?;
        let requires_grad = !matches!(kind, OpKind::Detach)
            && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(kind, parents.to_vec(), value, requires_grad))
    }

    fn forward(&self, kind: &OpKind, parents: &[Var]) -> Result<Tensor, GradError> {
        let val = |i: usize| &self.nodes[parents[i].0].value;
        let same_shape = |this: &Self| -> Result<(), GradError> {
            if val(0).shape() != val(1).shape() {
                Err(this.mismatch(kind, parents))
            } else {
                Ok(())
            }
        };
        let out = match kind {
            OpKind::Leaf => unreachable!(),
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.mismatch(kind, parents));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::new(vec![m, n], tensor::matmul(a.data(), b.data(), m, k, n))?
            }
            OpKind::Add => {
                same_shape(self)?;
                val(0).zip_map(val(1), |a, b| a + b)
            }
            OpKind::Sub => {
                same_shape(self)?;
                val(0).zip_map(val(1), |a, b| a - b)
            }
            OpKind::Mul => {
                same_shape(self)?;
                val(0).zip_map(val(1), |a, b| a * b)
            }
            OpKind::Sigmoid => val(0).map(sigmoid),
            OpKind::Tanh => val(0).map(f64::tanh),
            OpKind::SoftmaxRows | OpKind::LogSoftmaxRows => {
                let a = val(0);
                if a.shape().len() > 2 {
                    return Err(self.mismatch(kind, parents));
                }
                let (r, c) = a.dims2();
                let data = if matches!(kind, OpKind::SoftmaxRows) {
                    tensor::softmax_rows(a.data(), r, c)
                } else {
                    tensor::log_softmax_rows(a.data(), r, c)
                };
                Tensor::new(a.shape().to_vec(), data)?
            }
            OpKind::Log => val(0).map(f64::ln),
            OpKind::Exp => val(0).map(f64::exp),
            OpKind::Sum => Tensor::scalar(val(0).data().iter().sum()),
            OpKind::Mean => {
                let a = val(0);
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            OpKind::Square => val(0).map(|v| v * v),
            OpKind::AddBias | OpKind::MulRow => {
                let (a, b) = (val(0), val(1));
                let (r, c) = a.dims2();
                if a.shape().len() != 2 || b.len() != c || b.dims2().0 != 1 {
                    return Err(self.mismatch(kind, parents));
                }
                let mut data = a.data().to_vec();
                for row in data.chunks_mut(c) {
                    for (x, &bv) in row.iter_mut().zip(b.data()) {
                        if matches!(kind, OpKind::AddBias) {
                            *x += bv;
                        } else {
                            *x *= bv;
                        }
                    }
                }
                Tensor::new(vec![r, c], data)?
            }
            OpKind::ConcatCols => {
                if parents.is_empty() {
                    return Err(GradError::Arity { op: "concat", expected: 1, got: 0 });
                }
                let rows = val(0).dims2().0;
                if parents.iter().any(|p| {
                    let v = &self.nodes[p.0].value;
                    v.shape().len() != 2 || v.shape()[0] != rows
                }) {
                    return Err(self.mismatch(kind, parents));
                }
                let total: usize = parents.iter().map(|p| self.nodes[p.0].value.shape()[1]).sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parents {
                        data.extend_from_slice(self.nodes[p.0].value.row(r));
                    }
                }
                Tensor::new(vec![rows, total], data)?
            }
            OpKind::Scale(c) => val(0).map(|v| v * c),
            OpKind::AddScalar(c) => val(0).map(|v| v + c),
            OpKind::SelectRows(idx) => {
                let a = val(0);
                let (r, c) = a.dims2();
                if a.shape().len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= r) {
                    return Err(self.mismatch(kind, parents));
                }
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(a.row(i));
                }
                Tensor::new(vec![idx.len(), c], data)?
            }
            OpKind::SteMask { anchor } => {
                let a = val(0);
                match anchor {
                    None => a.map(hard_mask),
                    Some(anchor) => {
                        if anchor.len() != a.len() {
                            return Err(self.mismatch(kind, parents));
                        }
                        let data = a
                            .data()
                            .iter()
                            .zip(anchor)
                            .map(|(&x, &x0)| hard_mask(x0) + (soft_mask(x) - soft_mask(x0)))
                            .collect();
                        Tensor::new(a.shape().to_vec(), data)?
                    }
                }
            }
            OpKind::Detach => val(0).clone(),
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients, GradError> {
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(GradError::NonScalarOutput {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            for (slot, contribution) in self.local_grads(node, &grad) {
                let parent = node.parents[slot];
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    empty => *empty = Some(contribution),
                }
            }
        }
        // Only leaf slots survive the sweep.
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian products for each parent slot that needs one.
    fn local_grads(&self, node: &Node, grad: &Tensor) -> Vec<(usize, Tensor)> {
        let pval = |i: usize| &self.nodes[node.parents[i].0].value;
        let y = &node.value;
        match &node.kind {
            OpKind::Leaf | OpKind::Detach => Vec::new(),
            OpKind::MatMul => {
                let (a, b) = (pval(0), pval(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let da = tensor::matmul_bt(grad.data(), b.data(), m, n, k);
                let db = tensor::matmul_at(a.data(), grad.data(), m, k, n);
                vec![
                    (0, Tensor::new(vec![m, k], da).expect("matmul grad")),
                    (1, Tensor::new(vec![k, n], db).expect("matmul grad")),
                ]
            }
            OpKind::Add => vec![(0, grad.clone()), (1, grad.clone())],
            OpKind::Sub => vec![(0, grad.clone()), (1, grad.map(|g| -g))],
            OpKind::Mul => vec![
                (0, grad.zip_map(pval(1), |g, b| g * b)),
                (1, grad.zip_map(pval(0), |g, a| g * a)),
            ],
            OpKind::Sigmoid => vec![(0, grad.zip_map(y, |g, s| g * s * (1.0 - s)))],
            OpKind::Tanh => vec![(0, grad.zip_map(y, |g, t| g * (1.0 - t * t)))],
            OpKind::SoftmaxRows => {
                let (r, c) = y.dims2();
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y.data()[row * c..(row + 1) * c];
                    let gs = &grad.data()[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![(0, Tensor::new(y.shape().to_vec(), dx).expect("softmax grad"))]
            }
            OpKind::LogSoftmaxRows => {
                let (r, c) = y.dims2();
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let ls = &y.data()[row * c..(row + 1) * c];
                    let gs = &grad.data()[row * c..(row + 1) * c];
                    let total: f64 = gs.iter().sum();
                    for j in 0..c {
                        dx[row * c + j] = gs[j] - ls[j].exp() * total;
                    }
                }
                vec![(0, Tensor::new(y.shape().to_vec(), dx).expect("log_softmax grad"))]
            }
            OpKind::Log => vec![(0, grad.zip_map(pval(0), |g, x| g / x))],
            OpKind::Exp => vec![(0, grad.zip_map(y, |g, e| g * e))],
            OpKind::Sum => vec![(0, Tensor::filled(pval(0).shape(), grad.item()))],
            OpKind::Mean => {
                let a = pval(0);
                vec![(0, Tensor::filled(a.shape(), grad.item() / a.len() as f64))]
            }
            OpKind::Square => vec![(0, grad.zip_map(pval(0), |g, x| 2.0 * g * x))],
            OpKind::AddBias => {
                let b = pval(1);
                let c = b.len();
                let mut db = vec![0.0; c];
                for row in grad.data().chunks(c) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                vec![
                    (0, grad.clone()),
                    (1, Tensor::new(b.shape().to_vec(), db).expect("bias grad")),
                ]
            }
            OpKind::MulRow => {
                let (a, b) = (pval(0), pval(1));
                let c = b.len();
                let mut da = grad.data().to_vec();
                let mut db = vec![0.0; c];
                for (drow, (grow, arow)) in da
                    .chunks_mut(c)
                    .zip(grad.data().chunks(c).zip(a.data().chunks(c)))
                {
                    for j in 0..c {
                        drow[j] = grow[j] * b.data()[j];
                        db[j] += grow[j] * arow[j];
                    }
                }
                vec![
                    (0, Tensor::new(a.shape().to_vec(), da).expect("mul_row grad")),
                    (1, Tensor::new(b.shape().to_vec(), db).expect("mul_row grad")),
                ]
            }
            OpKind::ConcatCols => {
                let rows = y.shape()[0];
                let total = y.shape()[1];
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.parents.len());
                for (slot, p) in node.parents.iter().enumerate() {
                    let w = self.nodes[p.0].value.shape()[1];
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&grad.data()[r * total + offset..r * total + offset + w]);
                    }
                    out.push((slot, Tensor::new(vec![rows, w], d).expect("concat grad")));
                    offset += w;
                }
                out
            }
            OpKind::Scale(c) => vec![(0, grad.map(|g| g * c))],
            OpKind::AddScalar(_) => vec![(0, grad.clone())],
            OpKind::SelectRows(idx) => {
                let a = pval(0);
                let c = a.shape()[1];
                let mut da = Tensor::zeros(a.shape());
                for (out_row, &src) in idx.iter().enumerate() {
                    let g = &grad.data()[out_row * c..(out_row + 1) * c];
                    for (d, gv) in da.data_mut()[src * c..(src + 1) * c].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                vec![(0, da)]
            }
            OpKind::SteMask { .. } => vec![(
                0,
                grad.zip_map(pval(0), |g, x| {
                    let s = sigmoid(x);
                    -g * s * (1.0 - s)
                }),
            )],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::Mul, &[a, b])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::Tanh, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::SoftmaxRows, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::LogSoftmaxRows, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::Log, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::Exp, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::Mean, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::Square, &[a])
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::AddBias, &[a, bias])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::MulRow, &[a, row])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        self.evaluate(OpKind::ConcatCols, parts)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        self.evaluate(OpKind::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        self.evaluate(OpKind::AddScalar(c), &[a])
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var, GradError> {
        self.evaluate(OpKind::SelectRows(rows), &[a])
    }

    pub fn detach(&mut self, a: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::Detach, &[a])
    }

    /// Hard binary mask from logits with the straight-through surrogate.
    pub fn ste_mask(&mut self, logits: Var) -> Result<Var, GradError> {
        self.evaluate(OpKind::SteMask { anchor: None }, &[logits])
    }

    pub fn ste_mask_anchored(&mut self, logits: Var, anchor: Vec<f64>) -> Result<Var, GradError> {
        self.evaluate(OpKind::SteMask { anchor: Some(anchor) }, &[logits])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(tape: &mut Tape, data: &[f64]) -> Var {
        tape.param(Tensor::vector(data.to_vec()))
    }

    #[test]
    fn add_componentwise() {
        let mut t = Tape::new();
        let a = v(&mut t, &[1.0, 2.0]);
        let b = v(&mut t, &[3.0, 4.0]);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_and_softmax_values() {
        let mut t = Tape::new();
        let a = v(&mut t, &[0.0]);
        let s = t.sigmoid(a).unwrap();
        assert_eq!(t.value(s).item(), 0.5);
        let b = v(&mut t, &[0.0, 0.0, 0.0]);
        let p = t.softmax(b).unwrap();
        for &x in t.value(p).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn derivative_of_square() {
        let mut t = Tape::new();
        let x = v(&mut t, &[3.0]);
        let y = t.square(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn derivative_of_sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = v(&mut t, &[0.0]);
        let y = t.sigmoid(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 0.25);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut t = Tape::new();
        let x = v(&mut t, &[0.3, -1.2, 2.5, 0.0]);
        let p = t.softmax(x).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        for &d in g.wrt(x).data() {
            assert!(d.abs() < 1e-15);
        }
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = v(&mut t, &[1.0, 2.0]);
        let unused = v(&mut t, &[5.0, 5.0]);
        let y = t.sum(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let x = v(&mut t, &[1.0, 2.0]);
        let y = t.square(x).unwrap();
        assert!(matches!(t.backward(y), Err(GradError::NonScalarOutput { .. })));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = v(&mut t, &[1.0, 2.0]);
        let b = v(&mut t, &[1.0, 2.0, 3.0]);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn ste_forward_and_surrogate() {
        let mut t = Tape::new();
        let m = v(&mut t, &[-1.0, 2.0, 0.0]);
        let hard = t.ste_mask(m).unwrap();
        // σ(0) = 0.5 is not < 0.5, so a tie maps to 0.
        assert_eq!(t.value(hard).data(), &[1.0, 0.0, 0.0]);
        let s = t.sum(hard).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(m).data()[2], -0.25);
    }

    #[test]
    fn anchored_ste_is_hard_at_anchor() {
        let mut t = Tape::new();
        let logits = vec![-1.0, 2.0, -0.3, 0.7];
        let m = v(&mut t, &logits);
        let hard = t.ste_mask_anchored(m, logits.clone()).unwrap();
        assert_eq!(t.value(hard).data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = v(&mut t, &[2.0]);
        let d = t.detach(x).unwrap();
        let y = t.mul(x, d).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).item(), 2.0);
    }

    #[test]
    fn log_softmax_is_finite_for_extreme_logits() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![1, 3], vec![1000.0, -1000.0, 0.0]).unwrap());
        let l = t.log_softmax(x).unwrap();
        assert!(t.value(l).is_finite());
        let p = t.softmax(x).unwrap();
        assert!((t.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
