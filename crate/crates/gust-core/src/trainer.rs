//! EM-alternating training: uncertainty-gated pseudo-label expectation and
//! Adam-based maximization of the combined objective.
//!
//! Each EM iteration first runs a fresh encode/sample/predict pass and turns
//! the predictions into a pseudo-label table, mixing each unlabeled node's
//! prediction with the uniform distribution according to its latent variance:
//! `y_hat_i = alpha_i * p_i + (1 - alpha_i) * uniform`, with
//! `alpha_i = 1 / (1 + exp(gamma * sigma_bar_i^2))`. The M-step then takes
//! `m_epochs` Adam steps on
//!
//! ```text
//! L = CE(p, one_hot(y); train) + CE(p, y_hat; unlabeled)
//!       + lambda / |E| * smoothness(p)
//! ```
//!
//! holding the pseudo-labels fixed. Cross-entropies are means over their
//! masked rows and the edge penalty is normalized by the edge count, so the
//! usual `{0.1, 0.5, 1, 2, 5}` grid for gamma and lambda is scale-meaningful
//! across datasets.
//!
//! The supervised and classic self-training baselines run as modes of this
//! same engine so that comparisons isolate the method rather than
//! implementation differences.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha20Rng;

use crate::adam::{adam_step, AdamState};
use crate::encoder::{
    encode, mean_uncertainty, predict, sample_latent, sample_latent_mean,
    sample_latent_with_noise, EncodedDistribution, EncoderDims, EncoderParams, Features,
    LatentDistribution, ParamLeaves,
};
use crate::error::{Error, Result};
use crate::graph::{build_normalized_adjacency, Graph, SparseAdjacency};
use crate::matrix::DenseMatrix;
use crate::rand_util::seeded_rng;
use crate::tape::{NodeId, Tape};

/// Validation-set search grid for `gamma` and `lambda`.
pub const GAMMA_LAMBDA_GRID: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 5.0];

/// Training hyperparameters, seeds, and ablation switches.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    /// Sharpness of the uncertainty gate; must be positive.
    pub gamma: f64,
    /// Weight of the edge-consistency penalty; must be nonnegative.
    pub lambda: f64,
    /// Number of EM iterations (T).
    pub em_iterations: usize,
    /// Gradient steps per M-step.
    pub m_epochs: usize,
    pub lr: f64,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub seed: u64,
    /// Ablation: skip sampling, use `z = mu` and report zero variance.
    pub deterministic_encoder: bool,
    /// Ablation: force a single EM iteration.
    pub single_step: bool,
    /// Ablation: drop the edge-consistency term (forces lambda = 0).
    pub no_graph_reg: bool,
    /// Confidence cutoff for the hard-label self-training baseline.
    pub confidence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 1.0,
            lambda: 5.0,
            em_iterations: 10,
            m_epochs: 50,
            lr: 0.001,
            hidden_dim: 16,
            latent_dim: 16,
            seed: 0,
            deterministic_encoder: false,
            single_step: false,
            no_graph_reg: false,
            confidence_threshold: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.em_iterations == 0 {
            return Err(Error::InvalidConfig(String::from("T must be >= 1")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidConfig(String::from(
                "hidden_dim and latent_dim must be >= 1",
            )));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence_threshold must be in (0, 1], got {}",
                self.confidence_threshold
            )));
        }
        Ok(())
    }

    /// EM iterations after applying the `single_step` ablation.
    pub fn effective_em_iterations(&self) -> usize {
        if self.single_step {
            1
        } else {
            self.em_iterations
        }
    }

    /// Regularization weight after applying the `no_graph_reg` ablation.
    pub fn effective_lambda(&self) -> f64 {
        if self.no_graph_reg {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Training modes sharing the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    /// Full EM loop with the uncertainty gate and edge penalty.
    Gust,
    /// Deterministic encoder, labeled loss only, no EM refinement.
    GcnSupervised,
    /// Hard argmax pseudo-labels above the confidence threshold, no
    /// uncertainty gate, no edge penalty.
    SelfTraining,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Gust => "gust",
            Method::GcnSupervised => "gcn_supervised",
            Method::SelfTraining => "self_training",
        }
    }
}

/// Row-stochastic soft target distribution over all nodes.
///
/// Labeled (training) rows are exact one-hot ground truth; every row sums to
/// one within 1e-6 with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelTable {
    y_hat: DenseMatrix,
}

impl PseudoLabelTable {
    pub fn new(y_hat: DenseMatrix) -> Result<Self> {
        for i in 0..y_hat.rows() {
            let mut sum = 0.0;
            for &v in y_hat.row(i) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidConfig(format!(
                        "pseudo-label entry {v} at row {i} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!(
                    "pseudo-label row {i} sums to {sum}"
                )));
            }
        }
        Ok(PseudoLabelTable { y_hat })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.y_hat
    }
}

/// Per-node gate `alpha_i = 1 / (1 + exp(gamma * sigma_bar_i^2))`.
///
/// For `gamma > 0` and nonnegative variances the gate lies in `(0, 1/2]`,
/// equals exactly 1/2 at zero variance, and decreases strictly with the
/// variance. Saturated values are floored at the smallest positive normal so
/// the interval stays open.
pub fn compute_alpha(sigma_bar: &[f64], gamma: f64) -> Vec<f64> {
    sigma_bar
        .iter()
        .map(|&s| {
            let a = 1.0 / (1.0 + libm::exp(gamma * s));
            libm::fmax(a, f64::MIN_POSITIVE)
        })
        .collect()
}

fn one_hot_targets(
    labels: &[Option<usize>],
    num_classes: usize,
    context: &'static str,
) -> Result<DenseMatrix> {
    let mut t = DenseMatrix::zeros(labels.len(), num_classes);
    for (i, label) in labels.iter().enumerate() {
        if let Some(l) = *label {
            if l >= num_classes {
                return Err(Error::IndexOutOfBounds {
                    context,
                    index: l,
                    len: num_classes,
                });
            }
            t.set(i, l, 1.0);
        }
    }
    Ok(t)
}

/// Pseudo-label expectation step.
///
/// Unlabeled rows become `alpha_i * p_i + (1 - alpha_i) * uniform`; rows in
/// the training mask are pinned to their one-hot ground truth.
pub fn e_step(
    p: &DenseMatrix,
    alpha: &[f64],
    labels: &[Option<usize>],
    train_mask: &[usize],
) -> Result<PseudoLabelTable> {
    let (n, k) = p.shape();
    if alpha.len() != n || labels.len() != n {
        return Err(Error::InvalidConfig(format!(
            "e_step got {n} prediction rows, {} alphas, {} labels",
            alpha.len(),
            labels.len()
        )));
    }
    let mut in_train = vec![false; n];
    for &i in train_mask {
        if i >= n {
            return Err(Error::IndexOutOfBounds {
                context: "e_step train_mask",
                index: i,
                len: n,
            });
        }
        in_train[i] = true;
    }
    let uniform = 1.0 / k as f64;
    let mut y_hat = DenseMatrix::zeros(n, k);
    for i in 0..n {
        if in_train[i] {
            let label = labels[i].ok_or_else(|| {
                Error::InvalidGraph(format!("train_mask node {i} has no label"))
            })?;
            if label >= k {
                return Err(Error::IndexOutOfBounds {
                    context: "e_step label",
                    index: label,
                    len: k,
                });
            }
            y_hat.set(i, label, 1.0);
        } else {
            let a = alpha[i];
            let rest = (1.0 - a) * uniform;
            for (out, &pv) in y_hat.row_mut(i).iter_mut().zip(p.row(i)) {
                *out = a * pv + rest;
            }
        }
    }
    PseudoLabelTable::new(y_hat)
}

/// Handles to the loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub labeled: NodeId,
    pub pseudo: NodeId,
    /// Present only when the weighted edge penalty participates.
    pub smooth: Option<NodeId>,
}

/// Scalar values of the loss terms for one epoch. `smooth` is the
/// lambda-weighted, edge-normalized contribution, so
/// `total = labeled + pseudo + smooth`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub total: f64,
    pub labeled: f64,
    pub pseudo: f64,
    pub smooth: f64,
}

impl LossBreakdown {
    fn from_tape(tape: &Tape, nodes: &LossNodes) -> Result<Self> {
        Ok(LossBreakdown {
            total: tape.scalar(nodes.total)?,
            labeled: tape.scalar(nodes.labeled)?,
            pseudo: tape.scalar(nodes.pseudo)?,
            smooth: match nodes.smooth {
                Some(s) => tape.scalar(s)?,
                None => 0.0,
            },
        })
    }
}

/// Frozen, shareable inputs of the M-step loss.
struct LossInputs {
    targets: Arc<DenseMatrix>,
    train_rows: Arc<Vec<usize>>,
    pseudo_targets: Arc<DenseMatrix>,
    pseudo_rows: Arc<Vec<usize>>,
    edges: Arc<Vec<(usize, usize)>>,
    lambda: f64,
}

impl LossInputs {
    fn build(
        y_hat: &PseudoLabelTable,
        labels: &[Option<usize>],
        train_mask: &[usize],
        pseudo_rows: &[usize],
        edges: &[(usize, usize)],
        lambda: f64,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(LossInputs {
            targets: Arc::new(one_hot_targets(labels, num_classes, "m_step_loss label")?),
            train_rows: Arc::new(train_mask.to_vec()),
            pseudo_targets: Arc::new(y_hat.matrix().clone()),
            pseudo_rows: Arc::new(pseudo_rows.to_vec()),
            edges: Arc::new(edges.to_vec()),
            lambda,
        })
    }
}

fn attach_loss(tape: &mut Tape, predictions: NodeId, inputs: &LossInputs) -> Result<LossNodes> {
    let labeled = tape.cross_entropy(predictions, &inputs.targets, &inputs.train_rows)?;
    let pseudo = tape.cross_entropy(predictions, &inputs.pseudo_targets, &inputs.pseudo_rows)?;
    let mut total = tape.add(labeled, pseudo)?;
    let smooth = if inputs.lambda > 0.0 && !inputs.edges.is_empty() {
        let raw = tape.smoothness(predictions, &inputs.edges)?;
        let weighted = tape.scale(raw, inputs.lambda / inputs.edges.len() as f64);
        total = tape.add(total, weighted)?;
        Some(weighted)
    } else {
        None
    };
    Ok(LossNodes {
        total,
        labeled,
        pseudo,
        smooth,
    })
}

/// Builds the full M-step objective on the tape:
/// labeled cross-entropy + pseudo-label cross-entropy + weighted smoothness.
///
/// The pseudo-label table is a fixed target; no gradient flows into it. An
/// empty pseudo row set simply contributes zero.
#[allow(clippy::too_many_arguments)]
pub fn m_step_loss(
    tape: &mut Tape,
    predictions: NodeId,
    y_hat: &PseudoLabelTable,
    labels: &[Option<usize>],
    train_mask: &[usize],
    pseudo_rows: &[usize],
    edges: &[(usize, usize)],
    lambda: f64,
    num_classes: usize,
) -> Result<LossNodes> {
    let inputs = LossInputs::build(
        y_hat,
        labels,
        train_mask,
        pseudo_rows,
        edges,
        lambda,
        num_classes,
    )?;
    attach_loss(tape, predictions, &inputs)
}

/// How the per-epoch forward pass draws its latent sample.
#[derive(Clone, Copy)]
enum SampleMode {
    Stochastic,
    Mean,
}

struct ForwardPass {
    leaves: ParamLeaves,
    enc: EncodedDistribution,
    probs: NodeId,
}

fn forward_pass(
    tape: &mut Tape,
    adj: &Arc<SparseAdjacency>,
    features: &Features,
    params: &EncoderParams,
    mode: SampleMode,
    rng: &mut ChaCha20Rng,
) -> Result<ForwardPass> {
    let leaves = ParamLeaves::create(tape, params);
    let enc = encode(tape, adj, features, &leaves)?;
    let sample = match mode {
        SampleMode::Stochastic => sample_latent(tape, &enc, rng)?,
        SampleMode::Mean => sample_latent_mean(tape, &enc),
    };
    let probs = predict(tape, sample.z, leaves.w_cls)?;
    Ok(ForwardPass { leaves, enc, probs })
}

fn log_var_range(tape: &Tape, enc: &EncodedDistribution) -> (f64, f64) {
    let lv = tape.value(enc.log_var).as_slice();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in lv {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

struct Prepared {
    adj: Arc<SparseAdjacency>,
    features: Features,
    num_classes: usize,
}

impl Prepared {
    fn build(graph: &Graph, num_classes: usize) -> Result<Self> {
        for (i, label) in graph.labels().iter().enumerate() {
            if let Some(l) = *label {
                if l >= num_classes {
                    return Err(Error::InvalidGraph(format!(
                        "node {i} has label {l}, expected < {num_classes}"
                    )));
                }
            }
        }
        Ok(Prepared {
            adj: Arc::new(build_normalized_adjacency(graph)),
            features: Features::auto(graph.features()),
            num_classes,
        })
    }
}

fn m_step_prepared(
    params: &mut EncoderParams,
    adam: &mut AdamState,
    prepared: &Prepared,
    inputs: &LossInputs,
    m_epochs: usize,
    mode: SampleMode,
    rng: &mut ChaCha20Rng,
) -> Result<LossBreakdown> {
    if m_epochs == 0 {
        // Evaluation-only pass; the model stays untouched and no noise is
        // drawn.
        let mut tape = Tape::new();
        let pass = forward_pass(
            &mut tape,
            &prepared.adj,
            &prepared.features,
            params,
            SampleMode::Mean,
            rng,
        )?;
        let nodes = attach_loss(&mut tape, pass.probs, inputs)?;
        return LossBreakdown::from_tape(&tape, &nodes);
    }

    let mut last = None;
    for epoch in 1..=m_epochs {
        params.zero_grads();
        let mut tape = Tape::new();
        let pass = forward_pass(
            &mut tape,
            &prepared.adj,
            &prepared.features,
            params,
            mode,
            rng,
        )?;
        let nodes = attach_loss(&mut tape, pass.probs, inputs)?;
        let breakdown = LossBreakdown::from_tape(&tape, &nodes)?;
        if !breakdown.total.is_finite() {
            let (lo, hi) = log_var_range(&tape, &pass.enc);
            return Err(Error::NonFinite(format!(
                "m-step loss at epoch {epoch} (log_var range [{lo:.3}, {hi:.3}])"
            )));
        }
        tape.backward(nodes.total)?;
        pass.leaves.accumulate_grads(&tape, params)?;
        let mut param_refs = params.params_mut();
        adam_step(&mut param_refs[..], adam)?;
        last = Some(breakdown);
    }
    Ok(last.expect("m_epochs >= 1"))
}

/// One parameter-maximization step: `m_epochs` iterations of fresh forward,
/// backward, and Adam update against a fixed pseudo-label table.
///
/// With `m_epochs = 0` the model is left unchanged and the current loss is
/// returned. Returns the final-epoch loss breakdown otherwise.
#[allow(clippy::too_many_arguments)]
pub fn m_step(
    params: &mut EncoderParams,
    adam: &mut AdamState,
    graph: &Graph,
    num_classes: usize,
    y_hat: &PseudoLabelTable,
    pseudo_rows: &[usize],
    config: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<LossBreakdown> {
    config.validate()?;
    let prepared = Prepared::build(graph, num_classes)?;
    let inputs = LossInputs::build(
        y_hat,
        graph.labels(),
        graph.train_mask(),
        pseudo_rows,
        graph.edges(),
        config.effective_lambda(),
        num_classes,
    )?;
    let mode = if config.deterministic_encoder {
        SampleMode::Mean
    } else {
        SampleMode::Stochastic
    };
    m_step_prepared(params, adam, &prepared, &inputs, config.m_epochs, mode, rng)
}

/// One EM iteration record.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EmRecord {
    /// 1-based EM iteration index.
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_labeled: f64,
    pub loss_pseudo: f64,
    /// Lambda-weighted, edge-normalized smoothness contribution; exactly zero
    /// when the penalty is disabled.
    pub loss_smooth: f64,
    /// Mean gate value over the unlabeled nodes (1.0 for the hard-label
    /// baseline, 0.0 when no pseudo-labeling happens).
    pub mean_alpha: f64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// Full trace of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EmHistory {
    pub records: Vec<EmRecord>,
    pub warnings: Vec<String>,
    /// Iteration with the best validation accuracy, for reporting only; no
    /// early stopping happens.
    pub best_val_iteration: Option<usize>,
}

impl EmHistory {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.test_acc)
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.val_acc)
    }

    /// Validation accuracy at the best iteration.
    pub fn best_val_acc(&self) -> Option<f64> {
        self.best_val_iteration
            .and_then(|it| self.records.get(it - 1))
            .and_then(|r| r.val_acc)
    }

    /// Test accuracy at the best validation iteration.
    pub fn test_acc_at_best_val(&self) -> Option<f64> {
        self.best_val_iteration
            .and_then(|it| self.records.get(it - 1))
            .and_then(|r| r.test_acc)
    }

    /// Test accuracy used in reports: taken at the best validation iteration
    /// when a validation mask exists, from the final iteration otherwise.
    pub fn reported_test_acc(&self) -> Option<f64> {
        self.test_acc_at_best_val().or_else(|| self.final_test_acc())
    }
}

/// Result of a training run: the final-iteration weights, the snapshot at
/// the best validation iteration (equal to the final weights when there is
/// no validation mask), and the per-iteration history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub best_params: EncoderParams,
    pub history: EmHistory,
}

/// Outcome of the expectation step for one iteration.
struct EStepOutcome {
    y_hat: PseudoLabelTable,
    pseudo_rows: Vec<usize>,
    mean_alpha: f64,
}

fn gust_e_step(
    graph: &Graph,
    prepared: &Prepared,
    params: &EncoderParams,
    config: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<EStepOutcome> {
    let mode = if config.deterministic_encoder {
        SampleMode::Mean
    } else {
        SampleMode::Stochastic
    };
    let mut tape = Tape::new();
    let pass = forward_pass(&mut tape, &prepared.adj, &prepared.features, params, mode, rng)?;
    let p = tape.value(pass.probs).clone();

    // The deterministic ablation reports zero variance, which sends every
    // gate to exactly 1/2.
    let sigma_bar = if config.deterministic_encoder {
        vec![0.0; graph.n()]
    } else {
        let dist = LatentDistribution::from_tape(&tape, &pass.enc);
        mean_uncertainty(&dist)
    };
    let alpha = compute_alpha(&sigma_bar, config.gamma);
    let y_hat = e_step(&p, &alpha, graph.labels(), graph.train_mask())?;
    let pseudo_rows = graph.unlabeled_nodes();
    let mean_alpha = if pseudo_rows.is_empty() {
        0.0
    } else {
        pseudo_rows.iter().map(|&i| alpha[i]).sum::<f64>() / pseudo_rows.len() as f64
    };
    Ok(EStepOutcome {
        y_hat,
        pseudo_rows,
        mean_alpha,
    })
}

fn self_training_e_step(
    graph: &Graph,
    prepared: &Prepared,
    params: &EncoderParams,
    config: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<EStepOutcome> {
    let mut tape = Tape::new();
    let pass = forward_pass(
        &mut tape,
        &prepared.adj,
        &prepared.features,
        params,
        SampleMode::Mean,
        rng,
    )?;
    let p = tape.value(pass.probs).clone();
    let k = prepared.num_classes;
    let uniform = 1.0 / k as f64;

    let mut in_train = vec![false; graph.n()];
    for &i in graph.train_mask() {
        in_train[i] = true;
    }
    // Only training labels enter the table; held-out ground truth must not
    // leak into the pseudo targets.
    let mut y_hat = DenseMatrix::zeros(graph.n(), k);
    let mut pseudo_rows = Vec::new();
    for (i, &is_train) in in_train.iter().enumerate() {
        if is_train {
            let label = graph.labels()[i].expect("train nodes are labeled by construction");
            y_hat.set(i, label, 1.0);
            continue;
        }
        let row = p.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if row[best] >= config.confidence_threshold {
            y_hat.set(i, best, 1.0);
            pseudo_rows.push(i);
        } else {
            // Row kept stochastic but excluded from the pseudo loss.
            y_hat.row_mut(i).fill(uniform);
        }
    }
    Ok(EStepOutcome {
        y_hat: PseudoLabelTable::new(y_hat)?,
        pseudo_rows,
        mean_alpha: 1.0,
    })
}

fn supervised_e_step(graph: &Graph, num_classes: usize) -> Result<EStepOutcome> {
    let uniform = 1.0 / num_classes as f64;
    let mut in_train = vec![false; graph.n()];
    for &i in graph.train_mask() {
        in_train[i] = true;
    }
    let mut y_hat = DenseMatrix::zeros(graph.n(), num_classes);
    for (i, &is_train) in in_train.iter().enumerate() {
        if is_train {
            let label = graph.labels()[i].expect("train nodes are labeled");
            y_hat.set(i, label, 1.0);
        } else {
            y_hat.row_mut(i).fill(uniform);
        }
    }
    Ok(EStepOutcome {
        y_hat: PseudoLabelTable::new(y_hat)?,
        pseudo_rows: Vec::new(),
        mean_alpha: 0.0,
    })
}

fn evaluate_prepared(
    params: &EncoderParams,
    prepared: &Prepared,
    labels: &[Option<usize>],
    mask: &[usize],
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask("evaluate"));
    }
    let mut tape = Tape::new();
    let mut unused_rng = seeded_rng(0);
    let pass = forward_pass(
        &mut tape,
        &prepared.adj,
        &prepared.features,
        params,
        SampleMode::Mean,
        &mut unused_rng,
    )?;
    let p = tape.value(pass.probs);
    let predicted = p.argmax_rows();
    let mut correct = 0usize;
    for &i in mask {
        let label = labels
            .get(i)
            .copied()
            .flatten()
            .ok_or(Error::InvalidConfig(format!(
                "evaluate: node {i} in mask has no label"
            )))?;
        if predicted[i] == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / mask.len() as f64)
}

/// Accuracy of the mean-embedding predictions over a labeled mask. Ties in
/// the argmax resolve to the lowest class index.
pub fn evaluate(params: &EncoderParams, graph: &Graph, mask: &[usize]) -> Result<f64> {
    let num_classes = params.w_cls.value.cols();
    let prepared = Prepared::build(graph, num_classes)?;
    evaluate_prepared(params, &prepared, graph.labels(), mask)
}

/// Runs a full training loop for the given method. Deterministic for a
/// fixed config (the master seed drives initialization and every draw).
///
/// All EM iterations always run; validation accuracy never stops training.
/// The weights at the best validation iteration are snapshotted for
/// reporting and checkpointing.
pub fn run_method(
    graph: &Graph,
    num_classes: usize,
    config: &TrainConfig,
    method: Method,
) -> Result<TrainOutcome> {
    config.validate()?;
    let prepared = Prepared::build(graph, num_classes)?;

    let mut warnings = Vec::new();
    let mut per_class = vec![0usize; num_classes];
    for &i in graph.train_mask() {
        if let Some(l) = graph.labels()[i] {
            per_class[l] += 1;
        }
    }
    for (class, &count) in per_class.iter().enumerate() {
        if count == 0 {
            warnings.push(format!("train mask has no labeled node for class {class}"));
        }
    }

    let mut rng = seeded_rng(config.seed);
    let dims = EncoderDims {
        in_dim: graph.features().cols(),
        hidden_dim: config.hidden_dim,
        latent_dim: config.latent_dim,
        num_classes,
    };
    let mut params = EncoderParams::init(dims, &mut rng);
    let mut adam = AdamState::new(&params.params(), config.lr);

    let m_mode = match method {
        Method::Gust if !config.deterministic_encoder => SampleMode::Stochastic,
        _ => SampleMode::Mean,
    };
    let lambda = match method {
        Method::Gust => config.effective_lambda(),
        _ => 0.0,
    };

    let mut records = Vec::new();
    let mut best_val: Option<f64> = None;
    let mut best_iteration: Option<usize> = None;
    let mut best_params: Option<EncoderParams> = None;
    for iteration in 1..=config.effective_em_iterations() {
        let outcome = match method {
            Method::Gust => gust_e_step(graph, &prepared, &params, config, &mut rng)?,
            Method::GcnSupervised => supervised_e_step(graph, num_classes)?,
            Method::SelfTraining => {
                self_training_e_step(graph, &prepared, &params, config, &mut rng)?
            }
        };
        let inputs = LossInputs::build(
            &outcome.y_hat,
            graph.labels(),
            graph.train_mask(),
            &outcome.pseudo_rows,
            graph.edges(),
            lambda,
            num_classes,
        )?;
        let losses = m_step_prepared(
            &mut params,
            &mut adam,
            &prepared,
            &inputs,
            config.m_epochs,
            m_mode,
            &mut rng,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!(
                "{msg}; mean alpha {:.3e}",
                outcome.mean_alpha
            )),
            other => other,
        })?;

        let val_acc = if graph.val_mask().is_empty() {
            None
        } else {
            Some(evaluate_prepared(
                &params,
                &prepared,
                graph.labels(),
                graph.val_mask(),
            )?)
        };
        let test_acc = if graph.test_mask().is_empty() {
            None
        } else {
            Some(evaluate_prepared(
                &params,
                &prepared,
                graph.labels(),
                graph.test_mask(),
            )?)
        };
        if let Some(v) = val_acc {
            if best_val.is_none_or(|b| v >= b) {
                best_val = Some(v);
                best_iteration = Some(iteration);
                best_params = Some(params.clone());
            }
        }
        records.push(EmRecord {
            iteration,
            loss_total: losses.total,
            loss_labeled: losses.labeled,
            loss_pseudo: losses.pseudo,
            loss_smooth: losses.smooth,
            mean_alpha: outcome.mean_alpha,
            val_acc,
            test_acc,
        });
    }

    let best_params = best_params.unwrap_or_else(|| params.clone());
    Ok(TrainOutcome {
        params,
        best_params,
        history: EmHistory {
            records,
            warnings,
            best_val_iteration: best_iteration,
        },
    })
}

/// The full EM loop (Method::Gust).
pub fn run_gust(
    graph: &Graph,
    num_classes: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    run_method(graph, num_classes, config, Method::Gust)
}

/// Fixed-noise loss evaluation for gradient checking.
///
/// The pseudo-label table, masks, and reparameterization noise stay frozen
/// while the weights vary, so central differences see a deterministic
/// function of the parameters.
pub struct FrozenLoss {
    prepared: Prepared,
    inputs: LossInputs,
    noise: DenseMatrix,
}

impl FrozenLoss {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        graph: &Graph,
        num_classes: usize,
        y_hat: &PseudoLabelTable,
        pseudo_rows: &[usize],
        noise: DenseMatrix,
        lambda: f64,
    ) -> Result<Self> {
        let prepared = Prepared::build(graph, num_classes)?;
        let inputs = LossInputs::build(
            y_hat,
            graph.labels(),
            graph.train_mask(),
            pseudo_rows,
            graph.edges(),
            lambda,
            num_classes,
        )?;
        Ok(FrozenLoss {
            prepared,
            inputs,
            noise,
        })
    }

    fn record(&self, values: &[DenseMatrix]) -> Result<(Tape, ParamLeaves, LossNodes)> {
        let params = EncoderParams::from_values(values)?;
        let mut tape = Tape::new();
        let leaves = ParamLeaves::create(&mut tape, &params);
        let enc = encode(&mut tape, &self.prepared.adj, &self.prepared.features, &leaves)?;
        let sample = sample_latent_with_noise(&mut tape, &enc, self.noise.clone())?;
        let probs = predict(&mut tape, sample.z, leaves.w_cls)?;
        let nodes = attach_loss(&mut tape, probs, &self.inputs)?;
        Ok((tape, leaves, nodes))
    }

    /// Loss value at the given weights.
    pub fn value(&self, values: &[DenseMatrix]) -> Result<f64> {
        let (tape, _, nodes) = self.record(values)?;
        tape.scalar(nodes.total)
    }

    /// Loss value and analytic gradients at the given weights.
    pub fn value_and_grads(&self, values: &[DenseMatrix]) -> Result<(f64, Vec<DenseMatrix>)> {
        let (mut tape, leaves, nodes) = self.record(values)?;
        let total = tape.scalar(nodes.total)?;
        tape.backward(nodes.total)?;
        let mut params = EncoderParams::from_values(values)?;
        leaves.accumulate_grads(&tape, &mut params)?;
        Ok((total, params.grads()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::LOG_EPSILON;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn alpha_is_exactly_half_at_zero_variance() {
        for gamma in GAMMA_LAMBDA_GRID {
            let alpha = compute_alpha(&[0.0], gamma);
            assert_eq!(alpha[0].to_bits(), 0.5f64.to_bits());
        }
    }

    #[test]
    fn alpha_analytic_point_ln_three() {
        let alpha = compute_alpha(&[libm::log(3.0)], 1.0);
        assert_abs_diff_eq!(alpha[0], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn alpha_saturates_without_overflow() {
        let alpha = compute_alpha(&[10.0], 5.0);
        assert!(alpha[0] < 1e-20);
        assert!(alpha[0] > 0.0);
        assert!(alpha[0].is_finite());
        // Far past the exp overflow point the floor keeps the interval open.
        let extreme = compute_alpha(&[1e6], 5.0);
        assert!(extreme[0] > 0.0);
    }

    #[test]
    fn e_step_half_gate_mixes_half_uniform() {
        let p = DenseMatrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let table = e_step(&p, &[0.5], &[None], &[]).unwrap();
        assert_eq!(table.matrix().row(0), &[0.75, 0.25]);
    }

    #[test]
    fn e_step_vanishing_gate_gives_uniform() {
        let p = DenseMatrix::from_rows(&[&[0.9, 0.05, 0.05]]).unwrap();
        let table = e_step(&p, &[1e-300], &[None], &[]).unwrap();
        for &v in table.matrix().row(0) {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn e_step_pins_labeled_rows_and_matches_scalar_oracle() {
        let mut rng = crate::rand_util::seeded_rng(40);
        let n = 9;
        let k = 4;
        let p = DenseMatrix::from_vec(
            n,
            k,
            (0..n * k).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
        .softmax_rows();
        let alpha: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 0.5).collect();
        let labels: Vec<Option<usize>> =
            (0..n).map(|i| if i % 3 == 0 { Some(i % k) } else { None }).collect();
        let train_mask: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
        let table = e_step(&p, &alpha, &labels, &train_mask).unwrap();
        let y = table.matrix();
        for i in 0..n {
            let sum: f64 = y.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
            if train_mask.contains(&i) {
                let label = labels[i].unwrap();
                for (j, &v) in y.row(i).iter().enumerate() {
                    assert_eq!(v, if j == label { 1.0 } else { 0.0 });
                }
            } else {
                for (j, &v) in y.row(i).iter().enumerate() {
                    let expected = alpha[i] * p.get(i, j) + (1.0 - alpha[i]) / k as f64;
                    assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
                    assert!(v >= (1.0 - alpha[i]) / k as f64 - 1e-15);
                }
                // Convex mixing with uniform preserves the argmax.
                assert_eq!(argmax(p.row(i)), argmax(y.row(i)));
            }
        }
    }

    fn argmax(row: &[f64]) -> usize {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }

    fn toy_labeled_graph() -> Graph {
        // Two labeled nodes joined by an edge, one class each.
        let features = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        Graph::new(
            vec![(0, 1)],
            features,
            vec![Some(0), Some(1)],
            vec![0, 1],
            vec![],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn m_step_loss_is_zero_for_perfect_predictions() {
        let g = toy_labeled_graph();
        let mut tape = Tape::new();
        let p = tape.leaf(
            DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
            true,
        );
        let y_hat = PseudoLabelTable::new(DenseMatrix::from_rows(&[
            &[1.0, 0.0],
            &[0.0, 1.0],
        ])
        .unwrap())
        .unwrap();
        let nodes = m_step_loss(
            &mut tape,
            p,
            &y_hat,
            g.labels(),
            g.train_mask(),
            &[],
            g.edges(),
            0.0,
            2,
        )
        .unwrap();
        let total = tape.scalar(nodes.total).unwrap();
        assert!(total.abs() <= 1e-9, "total {total}");
    }

    #[test]
    fn m_step_loss_uniform_prediction_single_label_is_ln_two() {
        let features = DenseMatrix::zeros(2, 1);
        let g = Graph::new(
            vec![(0, 1)],
            features,
            vec![Some(0), None],
            vec![0],
            vec![],
            vec![],
        )
        .unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(DenseMatrix::filled(2, 2, 0.5), true);
        let y_hat =
            PseudoLabelTable::new(DenseMatrix::filled(2, 2, 0.5)).unwrap();
        let nodes = m_step_loss(
            &mut tape,
            p,
            &y_hat,
            g.labels(),
            g.train_mask(),
            &[],
            g.edges(),
            0.0,
            2,
        )
        .unwrap();
        let labeled = tape.scalar(nodes.labeled).unwrap();
        assert_abs_diff_eq!(labeled, libm::log(2.0), epsilon = 1e-9);
    }

    #[test]
    fn m_step_loss_matches_term_by_term_oracle() {
        let mut rng = crate::rand_util::seeded_rng(61);
        let n = 7;
        let k = 3;
        let features = crate::rand_util::standard_normal_matrix(&mut rng, n, 2);
        let labels: Vec<Option<usize>> = (0..n).map(|i| Some(i % k)).collect();
        let g = Graph::new(
            vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (0, 6), (2, 5)],
            features,
            labels.clone(),
            vec![0, 1, 2],
            vec![],
            vec![],
        )
        .unwrap();
        let p_val = crate::rand_util::standard_normal_matrix(&mut rng, n, k).softmax_rows();
        let y_val = crate::rand_util::standard_normal_matrix(&mut rng, n, k).softmax_rows();
        let y_hat = PseudoLabelTable::new(y_val.clone()).unwrap();
        let pseudo_rows: Vec<usize> = (3..n).collect();
        let lambda = 0.7;

        let mut tape = Tape::new();
        let p = tape.leaf(p_val.clone(), true);
        let nodes = m_step_loss(
            &mut tape,
            p,
            &y_hat,
            g.labels(),
            g.train_mask(),
            &pseudo_rows,
            g.edges(),
            lambda,
            k,
        )
        .unwrap();

        // Independent scalar-loop oracle for each of the three terms.
        let mut labeled = 0.0;
        for &i in g.train_mask() {
            labeled -= libm::log(p_val.get(i, labels[i].unwrap()) + LOG_EPSILON);
        }
        labeled /= g.train_mask().len() as f64;
        let mut pseudo = 0.0;
        for &i in &pseudo_rows {
            for c in 0..k {
                pseudo -= y_val.get(i, c) * libm::log(p_val.get(i, c) + LOG_EPSILON);
            }
        }
        pseudo /= pseudo_rows.len() as f64;
        let mut omega = 0.0;
        for &(a, b) in g.edges() {
            for c in 0..k {
                let d = p_val.get(a, c) - p_val.get(b, c);
                omega += d * d;
            }
        }
        let expected = labeled + pseudo + lambda * omega / g.edges().len() as f64;
        let total = tape.scalar(nodes.total).unwrap();
        assert_abs_diff_eq!(total, expected, epsilon = 1e-10);
    }

    #[test]
    fn scaling_lambda_scales_only_the_smoothness_component() {
        let mut rng = crate::rand_util::seeded_rng(62);
        let n = 6;
        let k = 2;
        let features = crate::rand_util::standard_normal_matrix(&mut rng, n, 2);
        let g = Graph::new(
            vec![(0, 1), (1, 2), (3, 4), (4, 5), (2, 3)],
            features,
            (0..n).map(|i| Some(i % k)).collect(),
            vec![0, 1],
            vec![],
            vec![],
        )
        .unwrap();
        let p_val = crate::rand_util::standard_normal_matrix(&mut rng, n, k).softmax_rows();
        let y_hat = PseudoLabelTable::new(DenseMatrix::filled(n, k, 0.5)).unwrap();
        let pseudo_rows: Vec<usize> = (2..n).collect();

        let run = |lambda: f64| {
            let mut tape = Tape::new();
            let p = tape.leaf(p_val.clone(), true);
            let nodes = m_step_loss(
                &mut tape,
                p,
                &y_hat,
                g.labels(),
                g.train_mask(),
                &pseudo_rows,
                g.edges(),
                lambda,
                k,
            )
            .unwrap();
            LossBreakdown::from_tape(&tape, &nodes).unwrap()
        };
        let base = run(0.5);
        let tripled = run(1.5);
        assert_eq!(base.labeled, tripled.labeled);
        assert_eq!(base.pseudo, tripled.pseudo);
        assert_abs_diff_eq!(tripled.smooth, 3.0 * base.smooth, epsilon = 1e-12);
    }

    #[test]
    fn m_step_with_zero_epochs_leaves_the_model_unchanged() {
        let g = toy_labeled_graph();
        let mut rng = seeded_rng(3);
        let mut params = EncoderParams::init(
            EncoderDims {
                in_dim: 2,
                hidden_dim: 3,
                latent_dim: 2,
                num_classes: 2,
            },
            &mut rng,
        );
        let before = params.clone();
        let mut adam = AdamState::new(&params.params(), 0.01);
        let y_hat = PseudoLabelTable::new(DenseMatrix::filled(2, 2, 0.5)).unwrap();
        let config = TrainConfig {
            m_epochs: 0,
            ..TrainConfig::default()
        };
        let losses = m_step(
            &mut params,
            &mut adam,
            &g,
            2,
            &y_hat,
            &[],
            &config,
            &mut rng,
        )
        .unwrap();
        assert_eq!(params, before);
        assert!(losses.total.is_finite());
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn m_step_descends_on_a_fully_labeled_toy_graph() {
        let g = toy_labeled_graph();
        let mut rng = seeded_rng(5);
        let mut params = EncoderParams::init(
            EncoderDims {
                in_dim: 2,
                hidden_dim: 4,
                latent_dim: 3,
                num_classes: 2,
            },
            &mut rng,
        );
        let mut adam = AdamState::new(&params.params(), 0.01);
        let y_hat = PseudoLabelTable::new(DenseMatrix::from_rows(&[
            &[1.0, 0.0],
            &[0.0, 1.0],
        ])
        .unwrap())
        .unwrap();
        let eval_config = TrainConfig {
            m_epochs: 0,
            deterministic_encoder: true,
            ..TrainConfig::default()
        };
        let initial = m_step(
            &mut params,
            &mut adam,
            &g,
            2,
            &y_hat,
            &[],
            &eval_config,
            &mut rng,
        )
        .unwrap();
        let train_config = TrainConfig {
            m_epochs: 100,
            deterministic_encoder: true,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let after = m_step(
            &mut params,
            &mut adam,
            &g,
            2,
            &y_hat,
            &[],
            &train_config,
            &mut rng,
        )
        .unwrap();
        assert!(
            after.total < initial.total,
            "no descent: {} -> {}",
            initial.total,
            after.total
        );
    }

    #[test]
    fn run_single_step_flag_forces_one_iteration() {
        let g = toy_labeled_graph();
        let config = TrainConfig {
            em_iterations: 7,
            single_step: true,
            m_epochs: 2,
            ..TrainConfig::default()
        };
        let outcome = run_gust(&g, 2, &config).unwrap();
        assert_eq!(outcome.history.records.len(), 1);
    }

    #[test]
    fn run_without_graph_reg_reports_exactly_zero_smoothness() {
        let g = toy_labeled_graph();
        let config = TrainConfig {
            em_iterations: 2,
            m_epochs: 3,
            no_graph_reg: true,
            lambda: 2.0,
            ..TrainConfig::default()
        };
        let outcome = run_gust(&g, 2, &config).unwrap();
        for record in &outcome.history.records {
            assert_eq!(record.loss_smooth, 0.0);
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_history_bitwise() {
        let g = toy_labeled_graph();
        let config = TrainConfig {
            em_iterations: 3,
            m_epochs: 4,
            ..TrainConfig::default()
        };
        let outcome_a = run_gust(&g, 2, &config).unwrap();
        let outcome_b = run_gust(&g, 2, &config).unwrap();
        assert_eq!(outcome_a, outcome_b);
    }

    #[test]
    fn run_warns_when_a_class_has_no_labeled_node() {
        let features = DenseMatrix::zeros(3, 2);
        let g = Graph::new(
            vec![(0, 1), (1, 2)],
            features,
            vec![Some(0), None, None],
            vec![0],
            vec![],
            vec![],
        )
        .unwrap();
        let config = TrainConfig {
            em_iterations: 1,
            m_epochs: 1,
            ..TrainConfig::default()
        };
        let outcome = run_gust(&g, 2, &config).unwrap();
        assert_eq!(outcome.history.records.len(), 1);
        assert!(outcome.history.warnings.iter().any(|w| w.contains("class 1")));
    }

    #[test]
    fn evaluate_perfect_and_tied_predictions() {
        // Zero classifier weights give uniform predictions: argmax ties break
        // to class 0 for every node.
        let features = DenseMatrix::from_rows(&[&[1.0], &[1.0], &[1.0]]).unwrap();
        let g = Graph::new(
            vec![(0, 1), (1, 2)],
            features,
            vec![Some(0), Some(0), Some(1)],
            vec![],
            vec![],
            vec![0, 1, 2],
        )
        .unwrap();
        let mut rng = seeded_rng(1);
        let mut params = EncoderParams::init(
            EncoderDims {
                in_dim: 1,
                hidden_dim: 2,
                latent_dim: 2,
                num_classes: 2,
            },
            &mut rng,
        );
        params.w_cls.value.fill(0.0);
        let acc = evaluate(&params, &g, g.test_mask()).unwrap();
        assert_abs_diff_eq!(acc, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn evaluate_rejects_empty_mask() {
        let g = toy_labeled_graph();
        let mut rng = seeded_rng(1);
        let params = EncoderParams::init(
            EncoderDims {
                in_dim: 2,
                hidden_dim: 2,
                latent_dim: 2,
                num_classes: 2,
            },
            &mut rng,
        );
        assert_eq!(evaluate(&params, &g, &[]), Err(Error::EmptyMask("evaluate")));
    }

    #[test]
    fn evaluate_random_predictor_sits_near_chance() {
        let k = 4;
        let n = 2000;
        let mut rng = seeded_rng(123);
        let features = crate::rand_util::standard_normal_matrix(&mut rng, n, 3);
        let labels: Vec<Option<usize>> =
            (0..n).map(|_| Some(rng.random_range(0..k))).collect();
        let g = Graph::new(
            vec![],
            features,
            labels,
            vec![],
            vec![],
            (0..n).collect(),
        )
        .unwrap();
        let params = EncoderParams::init(
            EncoderDims {
                in_dim: 3,
                hidden_dim: 4,
                latent_dim: 3,
                num_classes: k,
            },
            &mut rng,
        );
        let acc = evaluate(&params, &g, g.test_mask()).unwrap();
        assert!(
            (acc - 1.0 / k as f64).abs() < 0.05,
            "accuracy {acc} too far from chance"
        );
    }
}
