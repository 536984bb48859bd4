//! Prior Network and baseline classifier heads.
//!
//! A [`Model`] wraps one MLP [`Graph`] together with every loss head the
//! toolkit needs: mean negative log-likelihood, forward and reverse
//! Dirichlet-KL against a bound target, and the joint in-domain + weighted
//! OOD variants of both. All heads share the same parameters; evaluation is
//! lazy, so scoring the alpha head never requires the training inputs.
//!
//! Input names bound at evaluation time:
//!   "x"            natural batch, [B, D]
//!   "labels"       class indices as f64, [B]
//!   "target_alpha" per-example target concentrations, [B, K]
//!   "x_ood"        OOD/adversarial batch, [B', D]
//!   "target_ood"   its target concentrations, [B', K]
//!   "gamma"        OOD loss weight, [1]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dirichlet::DirichletParams;
use crate::error::{Error, Result};
use crate::graph::{softmax_slice, Bindings, Graph, Mode, NodeId};
use crate::tensor::Tensor;

/// Logits are clamped to this symmetric interval before exponentiation, so
/// alpha stays in [e^-30, e^30] and never overflows.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Target-class concentrations for building training-target Dirichlets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConcentration {
    pub beta_in: f64,
    pub beta_ood: f64,
    pub num_classes: usize,
}

impl TargetConcentration {
    pub fn new(beta_in: f64, beta_ood: f64, num_classes: usize) -> Result<Self> {
        if !(beta_in > 0.0) || !(beta_ood > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "target concentrations must be positive, got beta_in={beta_in}, beta_ood={beta_ood}"
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            beta_in,
            beta_ood,
            num_classes,
        })
    }
}

/// Whether an example counts as in-domain or OOD/adversarial for target
/// construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetDomain {
    In,
    Ood,
}

/// Weight of the out-of-distribution term in the joint loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gamma must be finite and non-negative, got {gamma}"
            )));
        }
        Ok(Self { gamma })
    }
}

/// Target Dirichlet focused on one class: alpha_k = 1 + beta * [k == class],
/// with beta chosen by domain. The beta -> 0 limit is flat.
pub fn target_alpha(
    class: usize,
    tc: &TargetConcentration,
    domain: TargetDomain,
) -> Result<DirichletParams> {
    if class >= tc.num_classes {
        return Err(Error::Domain(format!(
            "class {class} out of range for K={}",
            tc.num_classes
        )));
    }
    let beta = match domain {
        TargetDomain::In => tc.beta_in,
        TargetDomain::Ood => tc.beta_ood,
    };
    let mut alpha = vec![1.0; tc.num_classes];
    alpha[class] += beta;
    DirichletParams::new(alpha)
}

/// Flat Dirichlet [1, ..., 1]; the target for OOD-dataset minibatches.
pub fn flat_alpha(num_classes: usize) -> Result<DirichletParams> {
    DirichletParams::new(vec![1.0; num_classes])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dnn,
    PriorNet,
}

/// Architecture of the desk-scale MLP backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    /// Probability of keeping a unit; 1.0 disables dropout entirely.
    pub dropout_keep: f64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            num_classes,
            dropout_keep: 1.0,
        }
    }

    pub fn with_dropout(mut self, keep: f64) -> Self {
        self.dropout_keep = keep;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need input_dim >= 1 and K >= 2, got D={}, K={}",
                self.input_dim, self.num_classes
            )));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig(
                "hidden widths must be positive".into(),
            ));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "dropout keep probability must be in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        Ok(())
    }
}

/// Node ids of the public heads.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub logits: NodeId,
    pub alpha: NodeId,
    pub logits_ood: NodeId,
    pub alpha_ood: NodeId,
    /// Mean NLL over the batch.
    pub nll: NodeId,
    /// Per-example NLL, [B, 1].
    pub nll_per: NodeId,
    /// Mean KL(target || alpha).
    pub forward_kl: NodeId,
    /// Mean KL(alpha || target).
    pub reverse_kl: NodeId,
    /// Per-example reverse KL, [B, 1].
    pub reverse_kl_per: NodeId,
    /// forward_kl + gamma * forward_kl over the OOD chain.
    pub joint_forward_kl: NodeId,
    /// reverse_kl + gamma * reverse_kl over the OOD chain.
    pub joint_reverse_kl: NodeId,
}

/// Which divergence a KL-trained head uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Divergence {
    Forward,
    Reverse,
}

/// An MLP classifier with a Dirichlet head and prebuilt loss heads.
pub struct Model {
    graph: Graph,
    pub kind: ModelKind,
    pub spec: MlpSpec,
    heads: Heads,
}

impl Model {
    /// Build the model with He-normal weight init, deterministic in `seed`.
    pub fn build(kind: ModelKind, spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input("x");
        let x_ood = g.input("x_ood");

        // shared parameter stack
        let mut dims = vec![spec.input_dim];
        dims.extend_from_slice(&spec.hidden);
        dims.push(spec.num_classes);
        let mut layer_params = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let std = if l + 2 == dims.len() {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            let w = Tensor::matrix(
                fan_in,
                fan_out,
                (0..fan_in * fan_out)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
            )?;
            let w = g.param(&format!("w{l}"), w)?;
            let b = g.param(&format!("b{l}"), Tensor::zeros(vec![1, fan_out]))?;
            layer_params.push((w, b));
        }

        let build_chain = |g: &mut Graph, input: NodeId| -> Result<NodeId> {
            let mut h = input;
            for (l, &(w, b)) in layer_params.iter().enumerate() {
                h = g.matmul(h, w)?;
                h = g.add(h, b)?;
                if l + 1 < layer_params.len() {
                    h = g.relu(h)?;
                    if spec.dropout_keep < 1.0 {
                        h = g.dropout(h, spec.dropout_keep)?;
                    }
                }
            }
            Ok(h)
        };

        let logits = build_chain(&mut g, x)?;
        let clamped = g.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP)?;
        let alpha = g.exp(clamped)?;

        let logits_ood = build_chain(&mut g, x_ood)?;
        let clamped_ood = g.clamp(logits_ood, -LOGIT_CLAMP, LOGIT_CLAMP)?;
        let alpha_ood = g.exp(clamped_ood)?;

        let labels = g.input("labels");
        let nll_per = g.softmax_nll(logits, labels)?;
        let nll = g.mean(nll_per)?;

        let target = g.input("target_alpha");
        let fkl_per = kl_per_example(&mut g, target, alpha)?;
        let forward_kl = g.mean(fkl_per)?;
        let rkl_per = kl_per_example(&mut g, alpha, target)?;
        let reverse_kl = g.mean(rkl_per)?;

        let target_ood = g.input("target_ood");
        let gamma = g.input("gamma");
        let fkl_ood_per = kl_per_example(&mut g, target_ood, alpha_ood)?;
        let fkl_ood = g.mean(fkl_ood_per)?;
        let weighted_f = g.mul(gamma, fkl_ood)?;
        let joint_forward_kl = g.add(forward_kl, weighted_f)?;

        let rkl_ood_per = kl_per_example(&mut g, alpha_ood, target_ood)?;
        let rkl_ood = g.mean(rkl_ood_per)?;
        let weighted_r = g.mul(gamma, rkl_ood)?;
        let joint_reverse_kl = g.add(reverse_kl, weighted_r)?;

        Ok(Self {
            graph: g,
            kind,
            spec,
            heads: Heads {
                logits,
                alpha,
                logits_ood,
                alpha_ood,
                nll,
                nll_per,
                forward_kl,
                reverse_kl,
                reverse_kl_per: rkl_per,
                joint_forward_kl,
                joint_reverse_kl,
            },
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn heads(&self) -> Heads {
        self.heads
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn kl_head(&self, div: Divergence) -> NodeId {
        match div {
            Divergence::Forward => self.heads.forward_kl,
            Divergence::Reverse => self.heads.reverse_kl,
        }
    }

    pub fn joint_head(&self, div: Divergence) -> NodeId {
        match div {
            Divergence::Forward => self.heads.joint_forward_kl,
            Divergence::Reverse => self.heads.joint_reverse_kl,
        }
    }

    /// Dirichlet parameters for each row of `x`.
    pub fn forward_alpha(&self, x: &Tensor) -> Result<Vec<DirichletParams>> {
        let eval = self.graph.forward(
            &Bindings::new().bind("x", x),
            &[self.heads.alpha],
            Mode::Eval,
        )?;
        let a = eval.value(self.heads.alpha)?;
        (0..a.rows())
            .map(|r| DirichletParams::new(a.row(r).to_vec()))
            .collect()
    }

    /// Softmax class probabilities for each row of `x`.
    pub fn forward_probs(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let eval = self.graph.forward(
            &Bindings::new().bind("x", x),
            &[self.heads.logits],
            Mode::Eval,
        )?;
        let z = eval.value(self.heads.logits)?;
        Ok((0..z.rows()).map(|r| softmax_slice(z.row(r))).collect())
    }

    /// Argmax class for each row of `x`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let eval = self.graph.forward(
            &Bindings::new().bind("x", x),
            &[self.heads.logits],
            Mode::Eval,
        )?;
        let z = eval.value(self.heads.logits)?;
        Ok((0..z.rows()).map(|r| argmax(z.row(r))).collect())
    }

    /// Stack per-example target Dirichlets into a [B, K] tensor.
    pub fn target_rows(targets: &[DirichletParams]) -> Result<Tensor> {
        let rows: Vec<&[f64]> = targets.iter().map(|t| t.alpha()).collect();
        Tensor::stack_rows(&rows)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-example KL(Dir(a_rows) || Dir(b_rows)) as a [B, 1] graph node:
/// lnG(a0) - sum lnG(ak) - lnG(b0) + sum lnG(bk) + sum (ak-bk)(psi(ak)-psi(a0))
fn kl_per_example(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let a0 = g.sum_rows(a)?;
    let b0 = g.sum_rows(b)?;
    let lg_a0 = g.lgamma(a0)?;
    let lg_b0 = g.lgamma(b0)?;
    let lg_a = g.lgamma(a)?;
    let lg_b = g.lgamma(b)?;
    let sum_lg_a = g.sum_rows(lg_a)?;
    let sum_lg_b = g.sum_rows(lg_b)?;

    let dg_a = g.digamma(a)?;
    let dg_a0 = g.digamma(a0)?;
    let dg_diff = g.sub(dg_a, dg_a0)?; // [B,K] - [B,1] broadcast
    let ab_diff = g.sub(a, b)?;
    let prod = g.mul(ab_diff, dg_diff)?;
    let cross = g.sum_rows(prod)?;

    let t1 = g.sub(lg_a0, sum_lg_a)?;
    let t2 = g.sub(sum_lg_b, lg_b0)?;
    let t12 = g.add(t1, t2)?;
    g.add(t12, cross)
}
