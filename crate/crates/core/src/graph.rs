//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an append-only tape of operation records plus a named
//! parameter store. Evaluation is non-mutating: [`Graph::forward`] computes
//! the requested outputs into an [`Evaluation`], and [`Graph::backward`]
//! walks the tape in reverse accumulating gradients. A frozen graph can
//! therefore be evaluated from any number of threads concurrently; only
//! parameter updates need exclusive access.
//!
//! The op set is the minimum closure covering the losses in this crate:
//! matmul, add, multiply, exp, log, relu, leaky-relu, log-sum-exp, fused
//! softmax-NLL, sum, row-sum, mean, elementwise digamma/lgamma, a clamp
//! (subgradient 1 inside the interval), and a training-time dropout mask
//! with inverted scaling.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::special;
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Op {
    /// Placeholder bound at evaluation time.
    Input(String),
    /// Trainable tensor; the payload indexes [`Graph::params`].
    Param(usize),
    Const(Tensor),
    /// Rank-2 matrix product.
    MatMul(NodeId, NodeId),
    /// Elementwise with rank<=2 broadcasting.
    Add(NodeId, NodeId),
    /// Elementwise with rank<=2 broadcasting.
    Mul(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    /// min(max(x, lo), hi); gradient passes through on [lo, hi].
    Clamp(NodeId, f64, f64),
    /// Overflow-safe reduction of the last axis: [K] -> [1], [B,K] -> [B,1].
    LogSumExp(NodeId),
    /// Fused -ln softmax(logits)[label]: ([B,K], [B]) -> [B,1].
    /// Labels carry integer class indices; they receive no gradient.
    SoftmaxNll(NodeId, NodeId),
    /// Sum of all elements -> [1].
    Sum(NodeId),
    /// Sum over the last axis of a rank-2 tensor: [B,K] -> [B,1].
    SumRows(NodeId),
    /// Mean of all elements -> [1].
    Mean(NodeId),
    Digamma(NodeId),
    Lgamma(NodeId),
    /// Train-mode Bernoulli(keep) mask scaled by 1/keep; identity in eval mode.
    Dropout(NodeId, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Clamp(..) => "clamp",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::SoftmaxNll(..) => "softmax_nll",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::Mean(_) => "mean",
            Op::Digamma(_) => "digamma",
            Op::Lgamma(_) => "lgamma",
            Op::Dropout(..) => "dropout",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::SoftmaxNll(a, b) => {
                vec![a, b]
            }
            Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Clamp(a, _, _)
            | Op::LogSumExp(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::Mean(a)
            | Op::Digamma(a)
            | Op::Lgamma(a)
            | Op::Dropout(a, _) => vec![a],
        }
    }
}

/// Evaluation mode: dropout is active only in `Train`, where the seed makes
/// the masks (and therefore the whole forward pass) deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { dropout_seed: u64 },
}

/// Input bindings for one forward pass.
#[derive(Default)]
pub struct Bindings<'a> {
    map: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &'a str, value: &'a Tensor) -> Self {
        self.map.insert(name, value);
        self
    }

    fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Values produced by one forward pass. Only nodes reachable from the
/// requested outputs are populated.
#[derive(Debug)]
pub struct Evaluation {
    values: Vec<Option<Tensor>>,
    masks: Vec<Option<Vec<f64>>>,
    mode: Mode,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.values
            .get(id)
            .and_then(|v| v.as_ref())
            .ok_or(Error::Unvisited(id))
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let t = self.value(id)?;
        if t.numel() != 1 {
            return Err(Error::NonScalarRoot {
                node: id,
                shape: t.shape().to_vec(),
            });
        }
        Ok(t.data()[0])
    }
}

/// Gradients of one scalar output with respect to every reachable node.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient tensor for a node, if the node influenced the output.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Clone)]
pub struct Graph {
    nodes: Vec<Op>,
    params: Vec<(String, Tensor)>,
    param_index: HashMap<String, usize>,
    param_nodes: Vec<NodeId>,
    input_nodes: HashMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            param_nodes: Vec::new(),
            input_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        for dep in op.inputs() {
            if dep >= self.nodes.len() {
                return Err(Error::Dimension(format!(
                    "op {} references node {dep} which does not exist yet",
                    op.name()
                )));
            }
        }
        self.nodes.push(op);
        Ok(self.nodes.len() - 1)
    }

    /// Declare a named input placeholder. Names are unique; re-declaring
    /// returns the existing node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.input_nodes.get(name) {
            return id;
        }
        self.nodes.push(Op::Input(name.to_string()));
        let id = self.nodes.len() - 1;
        self.input_nodes.insert(name.to_string(), id);
        id
    }

    /// Register a named trainable parameter with its initial value.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.param_index.contains_key(name) {
            return Err(Error::InvalidConfig(format!(
                "parameter `{name}` already exists"
            )));
        }
        let idx = self.params.len();
        self.params.push((name.to_string(), value));
        self.param_index.insert(name.to_string(), idx);
        self.nodes.push(Op::Param(idx));
        let id = self.nodes.len() - 1;
        self.param_nodes.push(id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Op::Const(value));
        self.nodes.len() - 1
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    /// a - b, lowered to add(a, mul(b, -1)).
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg1 = self.scalar_const(-1.0);
        let nb = self.mul(b, neg1)?;
        self.add(a, nb)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.push(Op::LeakyRelu(a, slope))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::InvalidConfig(format!(
                "clamp bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        self.push(Op::Clamp(a, lo, hi))
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSumExp(a))
    }

    pub fn softmax_nll(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxNll(logits, labels))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    pub fn digamma(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Digamma(a))
    }

    pub fn lgamma(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Lgamma(a))
    }

    pub fn dropout(&mut self, a: NodeId, keep_prob: f64) -> Result<NodeId> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "dropout keep probability must be in (0, 1], got {keep_prob}"
            )));
        }
        self.push(Op::Dropout(a, keep_prob))
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param_value(&self, name: &str) -> Result<&Tensor> {
        let idx = self
            .param_index
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        Ok(&self.params[*idx].1)
    }

    pub fn param_value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let idx = *self
            .param_index
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        Ok(&mut self.params[idx].1)
    }

    /// In-order mutable access to every parameter tensor (optimizer hook).
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Replace a parameter value; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let cur = self.param_value_mut(name)?;
        if cur.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has shape {:?}, checkpoint provides {:?}",
                cur.shape(),
                value.shape()
            )));
        }
        *cur = value;
        Ok(())
    }

    pub fn input_node(&self, name: &str) -> Result<NodeId> {
        self.input_nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownInput(name.to_string()))
    }

    pub fn param_node(&self, name: &str) -> Result<NodeId> {
        let idx = self
            .param_index
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        Ok(self.param_nodes[*idx])
    }

    fn shape_err(&self, node: NodeId, detail: String) -> Error {
        Error::ShapeMismatch { node, detail }
    }

    /// Mark every ancestor of `outputs`, inclusive.
    fn reachable(&self, outputs: &[NodeId]) -> Result<Vec<bool>> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = Vec::new();
        for &o in outputs {
            if o >= self.nodes.len() {
                return Err(Error::Unvisited(o));
            }
            stack.push(o);
        }
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            stack.extend(self.nodes[id].inputs());
        }
        Ok(needed)
    }

    /// Compute the requested output nodes. Only ancestors of `outputs` are
    /// evaluated, so inputs feeding unrelated heads need not be bound.
    pub fn forward(
        &self,
        bindings: &Bindings<'_>,
        outputs: &[NodeId],
        mode: Mode,
    ) -> Result<Evaluation> {
        let needed = self.reachable(outputs)?;
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut masks: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];

        for id in 0..self.nodes.len() {
            if !needed[id] {
                continue;
            }
            let value = self.eval_node(id, &values, bindings, mode, &mut masks)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: id,
                    op: self.nodes[id].name().to_string(),
                });
            }
            values[id] = Some(value);
        }
        Ok(Evaluation {
            values,
            masks,
            mode,
        })
    }

    fn eval_node(
        &self,
        id: NodeId,
        values: &[Option<Tensor>],
        bindings: &Bindings<'_>,
        mode: Mode,
        masks: &mut [Option<Vec<f64>>],
    ) -> Result<Tensor> {
        let val = |nid: NodeId| -> &Tensor { values[nid].as_ref().expect("topological order") };
        match &self.nodes[id] {
            Op::Input(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnboundInput(name.clone())),
            Op::Param(idx) => Ok(self.params[*idx].1.clone()),
            Op::Const(t) => Ok(t.clone()),
            Op::MatMul(a, b) => {
                let (a, b) = (val(*a), val(*b));
                if a.rank() != 2 || b.rank() != 2 {
                    return Err(self.shape_err(
                        id,
                        format!("matmul needs rank-2 operands, got {:?} x {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let (k2, n) = (b.shape()[0], b.shape()[1]);
                if k != k2 {
                    return Err(self.shape_err(
                        id,
                        format!("matmul inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
                    ));
                }
                Ok(matmul(a.data(), b.data(), m, k, n))
            }
            Op::Add(a, b) => self.broadcast_apply(id, val(*a), val(*b), |x, y| x + y),
            Op::Mul(a, b) => self.broadcast_apply(id, val(*a), val(*b), |x, y| x * y),
            Op::Exp(a) => Ok(map_unary(val(*a), f64::exp)),
            Op::Log(a) => Ok(map_unary(val(*a), f64::ln)),
            Op::Relu(a) => Ok(map_unary(val(*a), |x| if x > 0.0 { x } else { 0.0 })),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                Ok(map_unary(val(*a), move |x| if x > 0.0 { x } else { s * x }))
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                Ok(map_unary(val(*a), move |x| x.clamp(lo, hi)))
            }
            Op::LogSumExp(a) => {
                let t = val(*a);
                let (rows, cols) = (t.rows(), t.cols());
                let mut out = Vec::with_capacity(rows);
                for r in 0..rows {
                    out.push(log_sum_exp_slice(t.row(r)));
                }
                let shape = if t.rank() == 2 { vec![rows, 1] } else { vec![1] };
                let _ = cols;
                Tensor::new(shape, out)
            }
            Op::SoftmaxNll(logits, labels) => {
                let (z, y) = (val(*logits), val(*labels));
                if z.rank() != 2 {
                    return Err(self.shape_err(
                        id,
                        format!("softmax_nll logits must be rank-2, got {:?}", z.shape()),
                    ));
                }
                let (b, k) = (z.shape()[0], z.shape()[1]);
                if y.numel() != b {
                    return Err(self.shape_err(
                        id,
                        format!("softmax_nll labels must have {b} entries, got {}", y.numel()),
                    ));
                }
                let mut out = Vec::with_capacity(b);
                for r in 0..b {
                    let label = class_index(y.data()[r], k).map_err(|e| match e {
                        Error::Domain(d) => Error::Domain(format!("node {id}: {d}")),
                        other => other,
                    })?;
                    let row = z.row(r);
                    out.push(log_sum_exp_slice(row) - row[label]);
                }
                Tensor::new(vec![b, 1], out)
            }
            Op::Sum(a) => Ok(Tensor::scalar(val(*a).data().iter().sum())),
            Op::SumRows(a) => {
                let t = val(*a);
                if t.rank() != 2 {
                    return Err(self.shape_err(
                        id,
                        format!("sum_rows needs a rank-2 operand, got {:?}", t.shape()),
                    ));
                }
                let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
                Tensor::new(vec![t.rows(), 1], data)
            }
            Op::Mean(a) => {
                let t = val(*a);
                Ok(Tensor::scalar(
                    t.data().iter().sum::<f64>() / t.numel() as f64,
                ))
            }
            Op::Digamma(a) => self.map_domain(id, val(*a), special::digamma_unchecked),
            Op::Lgamma(a) => self.map_domain(id, val(*a), special::ln_gamma_unchecked),
            Op::Dropout(a, keep) => {
                let t = val(*a);
                match mode {
                    Mode::Eval => Ok(t.clone()),
                    Mode::Train { dropout_seed } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            dropout_seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                        );
                        let mask: Vec<f64> = (0..t.numel())
                            .map(|_| if rng.random::<f64>() < *keep { 1.0 } else { 0.0 })
                            .collect();
                        let scale = 1.0 / keep;
                        let data = t
                            .data()
                            .iter()
                            .zip(&mask)
                            .map(|(x, m)| x * m * scale)
                            .collect();
                        masks[id] = Some(mask);
                        Tensor::new(t.shape().to_vec(), data)
                    }
                }
            }
        }
    }

    fn map_domain(&self, id: NodeId, t: &Tensor, f: fn(f64) -> f64) -> Result<Tensor> {
        if t.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain(format!(
                "node {id} ({}) requires strictly positive inputs",
                self.nodes[id].name()
            )));
        }
        Ok(map_unary(t, f))
    }

    fn broadcast_apply(
        &self,
        id: NodeId,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let plan = BroadcastPlan::for_pair(a.shape(), b.shape())
            .ok_or_else(|| {
                self.shape_err(
                    id,
                    format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
                )
            })?;
        let mut data = Vec::with_capacity(plan.rows * plan.cols);
        for r in 0..plan.rows {
            for c in 0..plan.cols {
                data.push(f(plan.fetch(a, r, c, true), plan.fetch(b, r, c, false)));
            }
        }
        Tensor::new(plan.out_shape.clone(), data)
    }

    /// Gradients of a scalar node with respect to every node that feeds it.
    pub fn backward(&self, eval: &Evaluation, root: NodeId) -> Result<Gradients> {
        let root_val = eval.value(root)?;
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot {
                node: root,
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::new(root_val.shape().to_vec(), vec![1.0]).expect("scalar"));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, eval, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    fn backprop_node(
        &self,
        id: NodeId,
        g: &Tensor,
        eval: &Evaluation,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |nid: NodeId| -> &Tensor { eval.values[nid].as_ref().expect("computed") };
        match &self.nodes[id] {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                // dA = G B^T, dB = A^T G
                let bt = transpose(bv.data(), k, n);
                let da = matmul(g.data(), bt.data(), m, n, k);
                let at = transpose(av.data(), m, k);
                let db = matmul(at.data(), g.data(), k, m, n);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                let plan = BroadcastPlan::for_pair(val(*a).shape(), val(*b).shape())
                    .expect("checked in forward");
                accumulate(grads, *a, plan.reduce_to(g, val(*a).shape(), true, |_, _| 1.0, val(*a), val(*b)));
                accumulate(grads, *b, plan.reduce_to(g, val(*b).shape(), false, |_, _| 1.0, val(*a), val(*b)));
            }
            Op::Mul(a, b) => {
                let plan = BroadcastPlan::for_pair(val(*a).shape(), val(*b).shape())
                    .expect("checked in forward");
                accumulate(
                    grads,
                    *a,
                    plan.reduce_to(g, val(*a).shape(), true, |_, y| y, val(*a), val(*b)),
                );
                accumulate(
                    grads,
                    *b,
                    plan.reduce_to(g, val(*b).shape(), false, |x, _| x, val(*a), val(*b)),
                );
            }
            Op::Exp(a) => {
                let out = val(id);
                accumulate(grads, *a, zip_mul(g, out.data()));
            }
            Op::Log(a) => {
                let x = val(*a);
                let d: Vec<f64> = g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::LeakyRelu(a, s) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { s * g })
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let (rows, cols) = (x.rows(), x.cols());
                let mut d = vec![0.0; x.numel()];
                for r in 0..rows {
                    let row = x.row(r);
                    let p = softmax_slice(row);
                    for c in 0..cols {
                        d[r * cols + c] = g.data()[r] * p[c];
                    }
                }
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::SoftmaxNll(logits, labels) => {
                let z = val(*logits);
                let y = val(*labels);
                let (b, k) = (z.shape()[0], z.shape()[1]);
                let mut d = vec![0.0; b * k];
                for r in 0..b {
                    let label = class_index(y.data()[r], k).expect("validated in forward");
                    let p = softmax_slice(z.row(r));
                    for c in 0..k {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        d[r * k + c] = g.data()[r] * (p[c] - onehot);
                    }
                }
                accumulate(grads, *logits, Tensor::new(z.shape().to_vec(), d).unwrap());
                // labels are class indices, not a differentiable quantity
            }
            Op::Sum(a) => {
                let x = val(*a);
                let d = vec![g.data()[0]; x.numel()];
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::SumRows(a) => {
                let x = val(*a);
                let (rows, cols) = (x.rows(), x.cols());
                let mut d = vec![0.0; x.numel()];
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] = g.data()[r];
                    }
                }
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::Mean(a) => {
                let x = val(*a);
                let d = vec![g.data()[0] / x.numel() as f64; x.numel()];
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::Digamma(a) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| g * special::trigamma_unchecked(x))
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::Lgamma(a) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| g * special::digamma_unchecked(x))
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::Dropout(a, keep) => {
                let x = val(*a);
                match eval.mode {
                    Mode::Eval => accumulate(grads, *a, g.clone()),
                    Mode::Train { .. } => {
                        let mask = eval.masks[id].as_ref().expect("mask stored in train mode");
                        let scale = 1.0 / keep;
                        let d = g
                            .data()
                            .iter()
                            .zip(mask)
                            .map(|(g, m)| g * m * scale)
                            .collect();
                        accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
                    }
                }
            }
        }
        Ok(())
    }

    /// Forward + backward, returning the gradient of `loss` with respect to
    /// the named input; shape matches the bound input.
    pub fn grad_wrt_input(
        &self,
        bindings: &Bindings<'_>,
        loss: NodeId,
        input_name: &str,
        mode: Mode,
    ) -> Result<Tensor> {
        let node = self.input_node(input_name)?;
        let eval = self.forward(bindings, &[loss], mode)?;
        let grads = self.backward(&eval, loss)?;
        Ok(grads.wrt(node).cloned().unwrap_or_else(|| {
            let bound = bindings.get(input_name).expect("input bound for forward");
            Tensor::zeros(bound.shape().to_vec())
        }))
    }

    /// Named parameter gradients in declaration order (zeros where the loss
    /// does not depend on a parameter).
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .zip(&self.param_nodes)
            .map(|((name, value), &node)| {
                let g = grads
                    .wrt(node)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Worst-case relative disagreement between backward gradients and central
/// finite differences of the scalar node `root`, taken over every parameter
/// element and every element of every bound input. The relative error uses
/// denominator max(|analytic|, |numeric|, 1e-8).
pub fn finite_diff_check(
    graph: &Graph,
    bindings: &[(&str, Tensor)],
    root: NodeId,
    h: f64,
    mode: Mode,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!(
            "finite difference step must be positive, got {h}"
        )));
    }
    let bound = make_bindings(bindings);
    let eval = graph.forward(&bound, &[root], mode)?;
    let grads = graph.backward(&eval, root)?;

    let mut worst = 0.0_f64;
    let mut check = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    };

    // parameters
    let mut scratch = graph.clone();
    let param_names: Vec<String> = graph.params().iter().map(|(n, _)| n.clone()).collect();
    for name in &param_names {
        let node = graph.param_node(name)?;
        let count = graph.param_value(name)?.numel();
        for j in 0..count {
            let orig = scratch.param_value(name)?.data()[j];
            scratch.param_value_mut(name)?.data_mut()[j] = orig + h;
            let fp = scratch
                .forward(&make_bindings(bindings), &[root], mode)?
                .scalar(root)?;
            scratch.param_value_mut(name)?.data_mut()[j] = orig - h;
            let fm = scratch
                .forward(&make_bindings(bindings), &[root], mode)?
                .scalar(root)?;
            scratch.param_value_mut(name)?.data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.wrt(node).map_or(0.0, |t| t.data()[j]);
            check(analytic, numeric);
        }
    }

    // inputs
    for (idx, (name, tensor)) in bindings.iter().enumerate() {
        let node = match graph.input_node(name) {
            Ok(n) => n,
            Err(_) => continue,
        };
        for j in 0..tensor.numel() {
            let mut perturbed: Vec<(&str, Tensor)> = bindings.to_vec();
            perturbed[idx].1.data_mut()[j] += h;
            let fp = graph
                .forward(&make_bindings(&perturbed), &[root], mode)?
                .scalar(root)?;
            perturbed[idx].1.data_mut()[j] -= 2.0 * h;
            let fm = graph
                .forward(&make_bindings(&perturbed), &[root], mode)?
                .scalar(root)?;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.wrt(node).map_or(0.0, |t| t.data()[j]);
            check(analytic, numeric);
        }
    }

    Ok(worst)
}

fn make_bindings<'a>(tensors: &'a [(&'a str, Tensor)]) -> Bindings<'a> {
    let mut b = Bindings::new();
    for (name, t) in tensors {
        b = b.bind(name, t);
    }
    b
}

// ---------------------------------------------------------------------------
// numeric helpers

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Tensor {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    Tensor::new(vec![cols, rows], out).expect("transpose shape")
}

fn map_unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn zip_mul(g: &Tensor, other: &[f64]) -> Tensor {
    Tensor::new(
        g.shape().to_vec(),
        g.data().iter().zip(other).map(|(a, b)| a * b).collect(),
    )
    .expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, add: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, a) in existing.data_mut().iter_mut().zip(add.data()) {
                *e += a;
            }
        }
        slot @ None => *slot = Some(add),
    }
}

/// max-shifted log(sum(exp)). Finite for any finite input.
pub fn log_sum_exp_slice(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Labels travel as f64 tensors; decode to the nearest integer class. The
/// 0.01 slack keeps finite-difference probes from invalidating a label while
/// still rejecting genuinely non-integral or out-of-range values.
fn class_index(v: f64, k: usize) -> Result<usize> {
    let r = v.round();
    if (v - r).abs() > 0.01 || r < 0.0 || r >= k as f64 {
        return Err(Error::Domain(format!(
            "label {v} is not a class index in [0, {k})"
        )));
    }
    Ok(r as usize)
}

/// Row/column broadcasting plan for rank <= 2 operands: dimensions must be
/// equal or 1 after promoting rank-1 shapes to a single row.
struct BroadcastPlan {
    rows: usize,
    cols: usize,
    out_shape: Vec<usize>,
    a_dims: (usize, usize),
    b_dims: (usize, usize),
}

impl BroadcastPlan {
    fn promote(shape: &[usize]) -> Option<(usize, usize)> {
        match shape.len() {
            1 => Some((1, shape[0])),
            2 => Some((shape[0], shape[1])),
            _ => None,
        }
    }

    fn for_pair(a: &[usize], b: &[usize]) -> Option<Self> {
        let ad = Self::promote(a)?;
        let bd = Self::promote(b)?;
        let merge = |x: usize, y: usize| -> Option<usize> {
            if x == y {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else if y == 1 {
                Some(x)
            } else {
                None
            }
        };
        // a scalar [1] also broadcasts against any column count
        let scalar_a = a == [1];
        let scalar_b = b == [1];
        let (rows, cols) = if scalar_a {
            (bd.0, bd.1)
        } else if scalar_b {
            (ad.0, ad.1)
        } else {
            (merge(ad.0, bd.0)?, merge(ad.1, bd.1)?)
        };
        let out_shape = if a.len() == 1 && b.len() == 1 {
            vec![cols]
        } else {
            vec![rows, cols]
        };
        Some(Self {
            rows,
            cols,
            out_shape,
            a_dims: if scalar_a { (1, 1) } else { ad },
            b_dims: if scalar_b { (1, 1) } else { bd },
        })
    }

    fn fetch(&self, t: &Tensor, r: usize, c: usize, is_a: bool) -> f64 {
        let (tr, tc) = if is_a { self.a_dims } else { self.b_dims };
        let rr = if tr == 1 { 0 } else { r };
        let cc = if tc == 1 { 0 } else { c };
        t.data()[rr * tc + cc]
    }

    /// Reduce the output-shaped gradient onto one operand's shape, scaling
    /// each element by `factor(a_val, b_val)` (the local partial).
    fn reduce_to(
        &self,
        g: &Tensor,
        target_shape: &[usize],
        is_a: bool,
        factor: impl Fn(f64, f64) -> f64,
        a: &Tensor,
        b: &Tensor,
    ) -> Tensor {
        let mut out = Tensor::zeros(target_shape.to_vec());
        let (tr, tc) = if is_a { self.a_dims } else { self.b_dims };
        for r in 0..self.rows {
            for c in 0..self.cols {
                let gval = g.data()[r * self.cols + c];
                let av = self.fetch(a, r, c, true);
                let bv = self.fetch(b, r, c, false);
                let rr = if tr == 1 { 0 } else { r };
                let cc = if tc == 1 { 0 } else { c };
                out.data_mut()[rr * tc + cc] += gval * factor(av, bv);
            }
        }
        out
    }
}
