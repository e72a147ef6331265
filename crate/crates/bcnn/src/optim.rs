//! SGD with momentum, an inverse-decay learning-rate schedule, the
//! training loop, and dataset-level evaluation.
//!
//! The update treats the L2 penalty from the training objective as part of
//! the gradient: `v ← μ·v − lr·(g + 2·λ·θ)`, `θ ← θ + v`, with
//! `lr(iter) = base_lr · (1 + γ·iter)^(−p)`.  All updates walk parameters
//! in layer order and ascending element order, so training is bit-for-bit
//! reproducible from `(dataset, config)`.

use crate::bayes::{self, BayesError};
use crate::data::{self, DataError, Dataset};
use crate::nn::{ForwardMode, Gradients, LayerParams, MaskSource, Network};
use crate::tensor::Tensor;
use std::fmt;

/// Hyperparameters and budget of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Inverse-decay coefficient γ.
    pub gamma: f64,
    /// Inverse-decay exponent p.
    pub power: f64,
    pub momentum: f64,
    /// L2 coefficient λ applied to weights and biases.
    pub weight_decay: f64,
    pub max_iters: u64,
    pub batch_size: usize,
    /// Seed for init, masks, shuffles and splits.
    pub seed: u64,
    /// Evaluation hook cadence in iterations.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            gamma: 1e-4,
            power: 0.75,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_iters: 10_000,
            batch_size: 64,
            seed: 1,
            eval_every: 1_000,
        }
    }
}

/// Learning rate at an iteration: `base_lr · (1 + γ·iter)^(−p)`.
pub fn lr_at(cfg: &TrainConfig, iter: u64) -> f64 {
    cfg.base_lr * (1.0 + cfg.gamma * iter as f64).powf(-cfg.power)
}

/// Errors from optimisation and evaluation.
#[derive(Debug)]
pub enum OptimError {
    Bayes(BayesError),
    Data(DataError),
    /// A zero budget, batch size or eval cadence.
    BadConfig { what: &'static str },
    /// Gradients do not line up with the network's parameters.
    GradMismatch { layer: usize },
    /// An update produced NaN or infinity (diverged).
    NonFiniteUpdate { iter: u64, layer: usize },
    /// The objective could not be evaluated at an iteration (for example the
    /// loss went non-finite).  Carries each learnable layer's squared
    /// parameter norm at the point of failure for diagnosis.
    ObjectiveFailed { iter: u64, param_norms: Vec<(usize, f64)>, source: BayesError },
    /// A dataset label exceeds the network's class count.
    LabelOutOfRange { label: u8, classes: usize },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::Bayes(e) => write!(f, "{e}"),
            OptimError::Data(e) => write!(f, "{e}"),
            OptimError::BadConfig { what } => write!(f, "invalid config: {what}"),
            OptimError::GradMismatch { layer } => {
                write!(f, "gradients do not match parameters at layer {layer}")
            }
            OptimError::NonFiniteUpdate { iter, layer } => write!(
                f,
                "non-finite parameter update at iteration {iter}, layer {layer} (diverged?)"
            ),
            OptimError::ObjectiveFailed { iter, param_norms, source } => {
                write!(f, "objective failed at iteration {iter}: {source} (")?;
                for (i, (layer, norm)) in param_norms.iter().enumerate() {
                    let sep = if i == 0 { "" } else { ", " };
                    write!(f, "{sep}layer {layer} |params|^2 = {norm:.3e}")?;
                }
                write!(f, ")")
            }
            OptimError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} outside the network's {classes} classes")
            }
        }
    }
}

impl std::error::Error for OptimError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            OptimError::Bayes(e) => Some(e),
            OptimError::Data(e) => Some(e),
            OptimError::ObjectiveFailed { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<BayesError> for OptimError {
    fn from(e: BayesError) -> Self {
        OptimError::Bayes(e)
    }
}

impl From<DataError> for OptimError {
    fn from(e: DataError) -> Self {
        OptimError::Data(e)
    }
}

impl From<crate::nn::NnError> for OptimError {
    fn from(e: crate::nn::NnError) -> Self {
        OptimError::Bayes(BayesError::Nn(e))
    }
}

impl From<crate::tensor::TensorError> for OptimError {
    fn from(e: crate::tensor::TensorError) -> Self {
        OptimError::Bayes(BayesError::Nn(e.into()))
    }
}

/// Momentum buffers, one velocity tensor pair per parameterised layer.
#[derive(Debug)]
pub struct OptState {
    velocity: Vec<Option<LayerParams>>,
}

impl OptState {
    /// Zero velocities shaped like the network's parameters.
    pub fn new(net: &Network) -> Self {
        let velocity = (0..net.num_layers())
            .map(|i| {
                net.params(i).map(|p| LayerParams {
                    weight: Tensor::zeros(p.weight.shape().clone()),
                    bias: Tensor::zeros(p.bias.shape().clone()),
                })
            })
            .collect();
        OptState { velocity }
    }
}

/// One heavy-ball update with L2:
/// `v ← μ·v − lr(iter)·(g + 2·λ·θ)`, then `θ ← θ + v`, layer by layer.
pub fn step(
    net: &mut Network,
    state: &mut OptState,
    grads: &Gradients,
    cfg: &TrainConfig,
    iter: u64,
) -> Result<(), OptimError> {
    if grads.layers.len() != net.num_layers() || state.velocity.len() != net.num_layers() {
        return Err(OptimError::GradMismatch { layer: 0 });
    }
    let lr = lr_at(cfg, iter);
    let lambda2 = 2.0 * cfg.weight_decay;
    for layer in 0..net.num_layers() {
        let Some(params) = net.params_mut(layer) else {
            if grads.layers[layer].is_some() {
                return Err(OptimError::GradMismatch { layer });
            }
            continue;
        };
        let (Some(g), Some(v)) = (&grads.layers[layer], &mut state.velocity[layer]) else {
            return Err(OptimError::GradMismatch { layer });
        };
        if g.weight.shape() != params.weight.shape() || g.bias.shape() != params.bias.shape() {
            return Err(OptimError::GradMismatch { layer });
        }
        let mut finite = true;
        for ((th, vel), &gr) in params
            .weight
            .data_mut()
            .iter_mut()
            .zip(v.weight.data_mut())
            .chain(params.bias.data_mut().iter_mut().zip(v.bias.data_mut()))
            .zip(g.weight.data().iter().chain(g.bias.data()))
        {
            *vel = cfg.momentum * *vel - lr * (gr + lambda2 * *th);
            *th += *vel;
            finite &= th.is_finite();
        }
        if !finite {
            return Err(OptimError::NonFiniteUpdate { iter, layer });
        }
    }
    Ok(())
}

/// How a dataset evaluation predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Weight averaging (activations scaled by keep probabilities).
    Standard,
    /// Monte Carlo averaging over sampled-mask passes.
    Mc,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Standard => write!(f, "standard"),
            EvalMode::Mc => write!(f, "mc"),
        }
    }
}

/// Outcome of evaluating a network over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mode: EvalMode,
    /// Averaged stochastic passes; 0 under [`EvalMode::Standard`].
    pub t_samples: usize,
    /// Fraction of examples misclassified, in `[0, 1]`.
    pub test_error: f64,
    pub correct_per_class: Vec<u64>,
    pub total_per_class: Vec<u64>,
}

fn tally(
    classes: usize,
    labels: &[u8],
    predictions: &[usize],
) -> Result<(Vec<u64>, Vec<u64>), OptimError> {
    let mut correct = vec![0u64; classes];
    let mut total = vec![0u64; classes];
    for (&label, &pred) in labels.iter().zip(predictions) {
        if label as usize >= classes {
            return Err(OptimError::LabelOutOfRange { label, classes });
        }
        total[label as usize] += 1;
        if pred == label as usize {
            correct[label as usize] += 1;
        }
    }
    Ok((correct, total))
}

fn finish(
    mode: EvalMode,
    t_samples: usize,
    n: usize,
    correct: Vec<u64>,
    total: Vec<u64>,
) -> EvalResult {
    let hits: u64 = correct.iter().sum();
    EvalResult {
        mode,
        t_samples,
        test_error: 1.0 - hits as f64 / n as f64,
        correct_per_class: correct,
        total_per_class: total,
    }
}

/// Evaluates with the standard (weight-averaging) rule, `chunk` images per
/// stacked pass.  Identical classwise to calling
/// [`bayes::predict_standard`] per image.
pub fn evaluate_standard(
    net: &Network,
    ds: &Dataset,
    chunk: usize,
) -> Result<EvalResult, OptimError> {
    if chunk == 0 {
        return Err(OptimError::BadConfig { what: "evaluation chunk must be >= 1" });
    }
    let classes = net.output_shape().elem_count();
    let n = ds.len();
    let mut correct = vec![0u64; classes];
    let mut total = vec![0u64; classes];
    let mut at = 0;
    while at < n {
        let end = (at + chunk).min(n);
        let indices: Vec<usize> = (at..end).collect();
        let (images, labels) = ds.gather(&indices);
        let logits = net.forward_batch_infer(&images, &ForwardMode::StandardTest)?;
        let logits = logits.reshape(&[end - at, classes])?;
        // Softmax is monotone per row, so logits argmax = probability argmax.
        let preds = logits.argmax_axis(1)?;
        let (c, t) = tally(classes, &labels, &preds)?;
        for i in 0..classes {
            correct[i] += c[i];
            total[i] += t[i];
        }
        at = end;
    }
    Ok(finish(EvalMode::Standard, 0, n, correct, total))
}

/// Evaluates with the Monte Carlo rule: image `j` under repeat `r` averages
/// the softmax outputs of passes `(r·N + j)·t + 0 .. (r·N + j)·t + t`.
/// Classwise identical to calling [`bayes::predict_mc`] per image with
/// `MaskSource::new(seed, (r·N + j)·t)`; stacking `chunk` images per pass
/// only changes speed.
pub fn evaluate_mc(
    net: &Network,
    ds: &Dataset,
    t: usize,
    seed: u64,
    repeat: u64,
    chunk: usize,
) -> Result<EvalResult, OptimError> {
    if t == 0 {
        return Err(OptimError::Bayes(BayesError::ZeroSamples));
    }
    if chunk == 0 {
        return Err(OptimError::BadConfig { what: "evaluation chunk must be >= 1" });
    }
    let classes = net.output_shape().elem_count();
    let n = ds.len();
    let mut correct = vec![0u64; classes];
    let mut total = vec![0u64; classes];
    let mut at = 0;
    while at < n {
        let end = (at + chunk).min(n);
        let b = end - at;
        let indices: Vec<usize> = (at..end).collect();
        let (images, labels) = ds.gather(&indices);
        let mut acc = vec![0.0f64; b * classes];
        for sample in 0..t {
            // Slot s of this chunk is image at+s: its pass works out to
            // (repeat·N + at + s)·t + sample.
            let base = (repeat * n as u64 + at as u64) * t as u64 + sample as u64;
            let src = MaskSource::strided(seed, base, t as u64);
            let logits = net.forward_batch_infer(&images, &ForwardMode::StochasticTest(src))?;
            let probs = crate::nn::softmax_rows(&logits.reshape(&[b, classes])?)?;
            for (a, &p) in acc.iter_mut().zip(probs.data()) {
                *a += p;
            }
        }
        let means = Tensor::from_vec(&[b, classes], acc)?.scale(1.0 / t as f64)?;
        let preds = means.argmax_axis(1)?;
        let (c, tt) = tally(classes, &labels, &preds)?;
        for i in 0..classes {
            correct[i] += c[i];
            total[i] += tt[i];
        }
        at = end;
    }
    Ok(finish(EvalMode::Mc, t, n, correct, total))
}

/// Evaluates the Monte Carlo rule at several sample counts from one stream
/// of draws: each image gets `t_grid.last()` stochastic passes, and the
/// running probability mean is read out at every count in `t_grid`.  The
/// counts must be ascending, distinct and >= 1.
///
/// Mask passes are indexed exactly as in [`evaluate_mc`] with
/// `t = t_grid.last()`, so a single-entry grid reproduces `evaluate_mc`
/// bit for bit, and larger grids give nested-prefix estimates at a total
/// cost of `max(t_grid)` passes instead of their sum.
pub fn evaluate_mc_curve(
    net: &Network,
    ds: &Dataset,
    t_grid: &[usize],
    seed: u64,
    repeat: u64,
    chunk: usize,
) -> Result<Vec<EvalResult>, OptimError> {
    let t_max = match t_grid.last() {
        None => return Err(OptimError::BadConfig { what: "sample-count grid must be nonempty" }),
        Some(&t) => t,
    };
    if t_grid[0] == 0 {
        return Err(OptimError::Bayes(BayesError::ZeroSamples));
    }
    if t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OptimError::BadConfig { what: "sample-count grid must be ascending" });
    }
    if chunk == 0 {
        return Err(OptimError::BadConfig { what: "evaluation chunk must be >= 1" });
    }
    let classes = net.output_shape().elem_count();
    let n = ds.len();
    let mut correct = vec![vec![0u64; classes]; t_grid.len()];
    let mut total = vec![vec![0u64; classes]; t_grid.len()];
    let mut at = 0;
    while at < n {
        let end = (at + chunk).min(n);
        let b = end - at;
        let indices: Vec<usize> = (at..end).collect();
        let (images, labels) = ds.gather(&indices);
        let mut acc = vec![0.0f64; b * classes];
        let mut next = 0;
        for sample in 0..t_max {
            let base = (repeat * n as u64 + at as u64) * t_max as u64 + sample as u64;
            let src = MaskSource::strided(seed, base, t_max as u64);
            let logits = net.forward_batch_infer(&images, &ForwardMode::StochasticTest(src))?;
            let probs = crate::nn::softmax_rows(&logits.reshape(&[b, classes])?)?;
            for (a, &p) in acc.iter_mut().zip(probs.data()) {
                *a += p;
            }
            if sample + 1 == t_grid[next] {
                let means = Tensor::from_vec(&[b, classes], acc.clone())?
                    .scale(1.0 / t_grid[next] as f64)?;
                let preds = means.argmax_axis(1)?;
                let (c, tt) = tally(classes, &labels, &preds)?;
                for i in 0..classes {
                    correct[next][i] += c[i];
                    total[next][i] += tt[i];
                }
                next += 1;
            }
        }
        at = end;
    }
    Ok(t_grid
        .iter()
        .zip(correct.into_iter().zip(total))
        .map(|(&t, (c, tt))| finish(EvalMode::Mc, t, n, c, tt))
        .collect())
}

/// One logged point of a training run.
#[derive(Debug, Clone)]
pub struct MetricPoint {
    /// Iterations completed when the point was taken.
    pub iter: u64,
    /// Training objective (total) of the mini-batch at that iteration.
    pub train_loss: f64,
    /// Whatever the evaluation hook returned at this point.
    pub evals: Vec<EvalResult>,
}

/// Time series of a training run, recorded every `eval_every` iterations
/// and at the final iteration.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub points: Vec<MetricPoint>,
}

/// Runs mini-batch SGD for `cfg.max_iters` iterations over reshuffled
/// epochs of `train`.  Iteration `i` draws its dropout masks from training
/// passes `i·batch_size + slot`.  The `eval` hook runs every `eval_every`
/// iterations and at the end; whatever it returns is recorded in the log.
///
/// A zero iteration budget is a valid no-op: the network is left untouched
/// and the returned log is empty.
pub fn train(
    net: &mut Network,
    train_ds: &Dataset,
    cfg: &TrainConfig,
    mut eval: impl FnMut(&Network, u64, f64) -> Result<Vec<EvalResult>, OptimError>,
) -> Result<MetricsLog, OptimError> {
    if cfg.batch_size == 0 {
        return Err(OptimError::BadConfig { what: "batch_size must be >= 1" });
    }
    if cfg.eval_every == 0 {
        return Err(OptimError::BadConfig { what: "eval_every must be >= 1" });
    }
    let mut log = MetricsLog::default();
    if cfg.max_iters == 0 {
        return Ok(log);
    }
    let mut state = OptState::new(net);
    let mut iter: u64 = 0;
    'epochs: for epoch in 0.. {
        for batch in data::batches(train_ds, cfg.batch_size, cfg.seed, epoch)? {
            let masks = MaskSource::new(cfg.seed, iter * cfg.batch_size as u64);
            let (value, grads) =
                bayes::objective(net, &batch.images, &batch.labels, cfg.weight_decay, masks)
                    .map_err(|source| OptimError::ObjectiveFailed {
                        iter,
                        param_norms: param_norms(net),
                        source,
                    })?;
            step(net, &mut state, &grads, cfg, iter)?;
            iter += 1;
            if iter.is_multiple_of(cfg.eval_every) || iter == cfg.max_iters {
                let evals = eval(net, iter, value.total)?;
                log.points.push(MetricPoint { iter, train_loss: value.total, evals });
            }
            if iter == cfg.max_iters {
                break 'epochs;
            }
        }
    }
    Ok(log)
}

/// Squared parameter norm (weights plus biases) of each learnable layer,
/// keyed by layer index.  Used in failure diagnostics.
fn param_norms(net: &Network) -> Vec<(usize, f64)> {
    net.param_layers()
        .into_iter()
        .filter_map(|layer| {
            net.params(layer).map(|p| (layer, p.weight.sq_norm() + p.bias.sq_norm()))
        })
        .collect()
}
