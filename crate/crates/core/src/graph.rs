//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node that
//! records its inputs, so a node can only refer to nodes created before it and
//! the tape is acyclic by construction. [`Graph::backward`] walks the tape in
//! reverse from a scalar loss and accumulates gradients into every tracked
//! node. Constants (frozen weights, data) are never tracked and always report
//! a zero gradient.

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

/// Dense row-major matrix of doubles; batches are stored one sample per row.
pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    RepeatRows(Var),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Mse {
        input: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<String>,
}

/// Gradients produced by one call to [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` is untracked or untouched.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0]),
        }
    }

    pub fn is_touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn add_into(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax restricted to `mask` (entries outside the mask get zero
/// probability).
pub fn masked_softmax(logits: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let mut out = Tensor::zeros(logits.raw_dim());
    for (row, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        let allowed = |j: usize| mask.map_or(true, |m| m[j]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| allowed(*j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                dst[j] = e;
                total += e;
            }
        }
        dst.mapv_inplace(|v| v / total);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool, name: &str) -> Var {
        if self.fault.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.fault = Some(format!("{name} (node {})", self.nodes.len()));
        }
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Fails if any operation so far produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match &self.fault {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    /// A differentiable input (parameter or designated input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// A constant input; its gradient is always zero.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::shape(format!("matmul {ar}x{ac} by {br}x{bc}")));
        }
        let value = self.value(a).dot(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked, "matmul"))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(Error::shape(format!("add_row with {rr}x{rc} onto width {ac}")));
        }
        let value = self.value(a) + self.value(row);
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(value, Op::AddRow(a, row), tracked, "add_row"))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked, "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a, b), tracked, "sub"))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a) * self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), tracked, "mul"))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, factor), tracked, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let tracked = self.tracked(a);
        self.push(value, Op::Relu(a), tracked, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let tracked = self.tracked(a);
        self.push(value, Op::Sigmoid(a), tracked, "sigmoid")
    }

    /// Stacks a `1 x m` row `rows` times.
    pub fn repeat_rows(&mut self, row: Var, rows: usize) -> Result<Var> {
        let (rr, rc) = self.shape(row);
        if rr != 1 {
            return Err(Error::shape(format!("repeat_rows on {rr}x{rc}")));
        }
        let value = self
            .value(row)
            .broadcast((rows, rc))
            .expect("1-row broadcast")
            .to_owned();
        let tracked = self.tracked(row);
        Ok(self.push(value, Op::RepeatRows(row), tracked, "repeat_rows"))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols input"));
        }
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::shape("concat_cols with differing row counts"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked, "concat_cols"))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(value, Op::Sum(a), tracked, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(a).mean().unwrap_or(0.0));
        let tracked = self.tracked(a);
        self.push(value, Op::Mean(a), tracked, "mean")
    }

    /// Mean softmax cross-entropy over the batch. With a mask, the softmax is
    /// taken over the permitted heads only and every other head receives an
    /// exactly-zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return Err(Error::shape(format!("{} targets for {rows} logit rows", targets.len())));
        }
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::shape(format!("mask of {} for {cols} heads", m.len())));
            }
        }
        for &t in targets {
            let allowed = t < cols && mask.map_or(true, |m| m[t]);
            if !allowed {
                return Err(Error::TargetOutsideMask { target: t });
            }
        }
        let probs = masked_softmax(self.value(logits), mask);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = self.value(logits).row(i);
                let allowed = |j: usize| mask.map_or(true, |m| m[j]);
                let (arg, max) = row.iter().enumerate().filter(|(j, _)| allowed(*j)).fold(
                    (usize::MAX, f64::NEG_INFINITY),
                    |best, (j, &v)| {
                        if v > best.1 {
                            (j, v)
                        } else {
                            best
                        }
                    },
                );
                // ln(sum exp(v - max)) as ln_1p of the mass off the argmax
                let rest: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| allowed(*j) && *j != arg)
                    .map(|(_, &v)| (v - max).exp())
                    .sum();
                (max - row[t]) + rest.ln_1p()
            })
            .sum::<f64>()
            / rows as f64;
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            tracked,
            "cross_entropy",
        ))
    }

    /// Mean binary cross-entropy on a `B x 1` column of logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if cols != 1 || targets.len() != rows {
            return Err(Error::shape(format!(
                "bce on {rows}x{cols} with {} targets",
                targets.len()
            )));
        }
        let loss = self
            .value(logits)
            .column(0)
            .iter()
            .zip(targets)
            .map(|(&l, &y)| l.max(0.0) - l * y + (-l.abs()).exp().ln_1p())
            .sum::<f64>()
            / rows as f64;
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::from_elem((1, 1), loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            tracked,
            "bce_with_logits",
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, input: Var, target: &Tensor) -> Result<Var> {
        if self.value(input).dim() != target.dim() {
            return Err(Error::shape(format!(
                "mse of {:?} against {:?}",
                self.value(input).dim(),
                target.dim()
            )));
        }
        let diff = self.value(input) - target;
        let loss = diff.mapv(|d| d * d).mean().unwrap_or(0.0);
        let tracked = self.tracked(input);
        Ok(self.push(
            Tensor::from_elem((1, 1), loss),
            Op::Mse {
                input,
                target: target.clone(),
            },
            tracked,
            "mse",
        ))
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.tracked {
                grads[idx] = None;
            }
        }
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("backward".into()));
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if wants(*row) {
                    add_into(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], -g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g * self.value(*b));
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], g * self.value(*a));
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g * *f);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::RepeatRows(row) => {
                if wants(*row) {
                    add_into(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if wants(*p) {
                        add_into(&mut grads[p.0], g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], Tensor::from_elem(self.value(*a).raw_dim(), g[[0, 0]]));
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = self.value(*a).len().max(1) as f64;
                    add_into(
                        &mut grads[a.0],
                        Tensor::from_elem(self.value(*a).raw_dim(), g[[0, 0]] / n),
                    );
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[[i, t]] -= 1.0;
                    }
                    d.mapv_inplace(|v| v * scale);
                    add_into(&mut grads[logits.0], d);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if wants(*logits) {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut d = self.value(*logits).mapv(sigmoid);
                    for (i, &y) in targets.iter().enumerate() {
                        d[[i, 0]] = (d[[i, 0]] - y) * scale;
                    }
                    add_into(&mut grads[logits.0], d);
                }
            }
            Op::Mse { input, target } => {
                if wants(*input) {
                    let n = target.len().max(1) as f64;
                    let d = (self.value(*input) - target) * (2.0 * g[[0, 0]] / n);
                    add_into(&mut grads[input.0], d);
                }
            }
        }
    }
}
