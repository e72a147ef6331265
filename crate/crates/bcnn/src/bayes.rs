//! The dropout training objective and its two prediction rules.
//!
//! Training a dropout network minimises the mean cross-entropy of a
//! sampled-mask forward pass plus an L2 term over weights and biases — a
//! single-sample Monte Carlo estimate of a variational bound, unbiased in
//! the mask draw.  At test time the approximating distribution over masked
//! weights can be consumed two ways:
//!
//! * **standard** (weight averaging): propagate the input once with every
//!   activation scaled by its keep probability — exact only while the
//!   masked quantity enters the output linearly;
//! * **Monte Carlo**: average the *probability vectors* of `T` sampled-mask
//!   passes, which estimates the true predictive mean regardless of what
//!   nonlinearities follow the masks.
//!
//! [`batched_mc`] computes the Monte Carlo rule in one stacked pass —
//! replica `t` draws exactly the masks pass `t` would have drawn, so its
//! output is bit-identical to [`predict_mc`], just faster: layers before
//! the first dropout run once instead of `T` times, and each weight matrix
//! is reused across all replicas while it is cache-resident.

use crate::nn::{
    softmax, softmax_cross_entropy, softmax_rows, ForwardMode, Gradients, MaskSource, Network,
    NnError,
};
use crate::tensor::{Tensor, TensorError};
use std::fmt;

/// Decomposition of the training objective at one mini-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    /// Mean sampled-mask cross-entropy over the batch.
    pub data_term: f64,
    /// `weight_decay · Σ_layers (‖W‖² + ‖b‖²)`.
    pub reg_term: f64,
    /// `data_term + reg_term`.
    pub total: f64,
}

/// A predictive distribution over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    /// Class probabilities, shape `[classes]`.
    pub probs: Tensor,
    /// Number of averaged stochastic passes; 0 for the standard
    /// (weight-averaging) rule.
    pub t_samples: usize,
}

impl Predictive {
    /// Most probable class (lowest index on ties).
    pub fn class(&self) -> usize {
        self.probs.argmax()
    }
}

/// Errors from objective evaluation or prediction.
#[derive(Debug)]
pub enum BayesError {
    Nn(NnError),
    /// Monte Carlo prediction needs at least one sample.
    ZeroSamples,
}

impl fmt::Display for BayesError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BayesError::Nn(e) => write!(f, "{e}"),
            BayesError::ZeroSamples => write!(f, "monte carlo prediction needs t >= 1"),
        }
    }
}

impl std::error::Error for BayesError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            BayesError::Nn(e) => Some(e),
            BayesError::ZeroSamples => None,
        }
    }
}

impl From<NnError> for BayesError {
    fn from(e: NnError) -> Self {
        BayesError::Nn(e)
    }
}

impl From<TensorError> for BayesError {
    fn from(e: TensorError) -> Self {
        BayesError::Nn(NnError::Tensor(e))
    }
}

/// Evaluates the training objective on one mini-batch and returns its
/// gradients with respect to all parameters.
///
/// The forward pass runs in training mode with masks from `masks` (batch
/// slot `s` uses pass `masks.base_pass + s·masks.pass_stride`).  Returned
/// gradients cover the data term only; the optimiser adds the L2 gradient
/// `2·weight_decay·θ` itself.  The regulariser sums squared norms in layer
/// order, weights before biases.
pub fn objective(
    net: &Network,
    images: &Tensor,
    labels: &[u8],
    weight_decay: f64,
    masks: MaskSource,
) -> Result<(ObjectiveValue, Gradients), BayesError> {
    let (logits, tape) = net.forward_batch(images, &ForwardMode::Train(masks))?;
    let label_ix: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let (losses, d_sum) = softmax_cross_entropy(&logits, &label_ix)?;
    let batch = losses.len();
    let mut data_term = 0.0;
    for &l in &losses {
        data_term += l;
    }
    data_term /= batch as f64;
    let d_mean = d_sum.scale(1.0 / batch as f64)?;
    let grads = net.backward_batch(&tape, &d_mean)?;

    let mut sq = 0.0;
    for i in net.param_layers() {
        let p = net.params(i).expect("param layer");
        sq += p.weight.sq_norm();
        sq += p.bias.sq_norm();
    }
    let reg_term = weight_decay * sq;
    Ok((
        ObjectiveValue { data_term, reg_term, total: data_term + reg_term },
        grads,
    ))
}

/// Standard (weight-averaging) prediction: one deterministic pass with
/// activations scaled by their keep probabilities.
pub fn predict_standard(net: &Network, x: &Tensor) -> Result<Predictive, BayesError> {
    let logits = net.forward_batch_infer(x, &ForwardMode::StandardTest)?;
    let logits = logits.reshape(net.output_shape().dims())?;
    Ok(Predictive { probs: softmax(&logits)?, t_samples: 0 })
}

/// Monte Carlo prediction: averages the softmax outputs of `t` sampled-mask
/// passes, pass `j` drawing masks for pass index `masks.pass_for_slot(j)`.
/// Probabilities accumulate in ascending pass order and divide by `t`.
pub fn predict_mc(
    net: &Network,
    x: &Tensor,
    t: usize,
    masks: MaskSource,
) -> Result<Predictive, BayesError> {
    if t == 0 {
        return Err(BayesError::ZeroSamples);
    }
    let classes = net.output_shape().elem_count();
    let mut acc = vec![0.0; classes];
    for j in 0..t {
        let source = MaskSource::new(masks.seed, masks.pass_for_slot(j));
        let logits = net.forward_batch_infer(x, &ForwardMode::StochasticTest(source))?;
        let logits = logits.reshape(net.output_shape().dims())?;
        let probs = softmax(&logits)?;
        for (a, &p) in acc.iter_mut().zip(probs.data()) {
            *a += p;
        }
    }
    let probs = Tensor::from_vec(&[classes], acc)?.scale(1.0 / t as f64)?;
    Ok(Predictive { probs, t_samples: t })
}

/// Monte Carlo prediction computed as one batched pass over `t` replicas of
/// `x`.  Bit-identical to [`predict_mc`] with the same `masks`: replica `j`
/// uses pass `masks.pass_for_slot(j)`, and the shared prefix (layers before
/// the first dropout) is computed once and reused by every replica.
pub fn batched_mc(
    net: &Network,
    x: &Tensor,
    t: usize,
    masks: MaskSource,
) -> Result<Predictive, BayesError> {
    if t == 0 {
        return Err(BayesError::ZeroSamples);
    }
    if x.dims() != net.input_shape().dims() {
        return Err(BayesError::Nn(NnError::InputShape {
            expected: net.input_shape().clone(),
            got: x.shape().clone(),
        }));
    }
    let split = net.first_dropout_layer().unwrap_or(net.num_layers());

    // Deterministic prefix on a batch of one…
    let mut dims = vec![1usize];
    dims.extend_from_slice(x.dims());
    let one = x.clone().reshape(&dims)?;
    let mode = ForwardMode::StochasticTest(masks);
    let prefix_out = net.run_layers(one, &mode, 0..split)?;

    // …tiled into `t` replicas for the mask-bearing suffix.
    let per = prefix_out.elem_count();
    let mut tiled = Vec::with_capacity(per * t);
    for _ in 0..t {
        tiled.extend_from_slice(prefix_out.data());
    }
    let mut tiled_dims = prefix_out.dims().to_vec();
    tiled_dims[0] = t;
    let tiled = Tensor::from_vec(&tiled_dims, tiled)?;
    let logits = net.run_layers(tiled, &mode, split..net.num_layers())?;

    let classes = net.output_shape().elem_count();
    let probs_rows = softmax_rows(&logits.reshape(&[t, classes])?)?;
    let mut acc = vec![0.0; classes];
    for row in probs_rows.data().chunks_exact(classes) {
        for (a, &p) in acc.iter_mut().zip(row) {
            *a += p;
        }
    }
    let probs = Tensor::from_vec(&[classes], acc)?.scale(1.0 / t as f64)?;
    Ok(Predictive { probs, t_samples: t })
}
