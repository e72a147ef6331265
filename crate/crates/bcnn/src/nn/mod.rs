//! Convolutional network core: layer specs, shape inference, batched
//! deterministic forward/backward passes, and dropout masking.
//!
//! A [`Network`] is a sequential stack of layers over `[H, W, C]` images (or
//! flat vectors).  Dropout draws its Bernoulli masks from counter-based
//! streams keyed by `(seed, layer index, purpose, pass index)`, so a forward
//! pass is a pure function of `(input, params, mode)` — replayable anywhere,
//! and identical whether examples run one at a time or stacked in a batch.
//!
//! Dropout conventions follow the multiplicative-mask formulation: training
//! and stochastic evaluation multiply activations by raw 0/1 masks (no
//! rescaling); standard evaluation multiplies activations by the keep
//! probability instead of sampling.

use crate::rng::{Purpose, RngError, RngStream};
use crate::tensor::{Shape, Tensor, TensorError};
use std::fmt;

pub mod checkpoint;
mod conv;
mod pool;

pub use checkpoint::{load, save, CheckpointError};

use conv::ConvGeom;

/// One layer of a sequential network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    /// 2-D convolution with `out_channels` kernels of `kh × kw`, applied at
    /// `stride` with symmetric zero `pad`.  Output spatial dims follow floor
    /// semantics: `(in + 2·pad − k) / stride + 1`.
    Conv {
        kh: usize,
        kw: usize,
        out_channels: usize,
        stride: usize,
        pad: usize,
    },
    /// Max pooling over `window × window` regions at `stride` (no padding),
    /// floor semantics.  Ties break toward the earliest window position.
    MaxPool { window: usize, stride: usize },
    /// Elementwise `max(x, 0)`.
    Relu,
    /// Fully connected layer; flattens its input to a vector.
    InnerProduct { out_units: usize },
    /// Multiplicative Bernoulli mask, one unit kept with `keep_prob`.
    Dropout { keep_prob: f64 },
}

/// Where a forward pass gets its dropout masks: a run seed plus a base pass
/// index.  Batch slot `s` uses pass `base_pass + s·pass_stride`, which lets
/// a batched pass reproduce exactly the masks a sequence of single passes
/// would draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSource {
    pub seed: u64,
    pub base_pass: u64,
    pub pass_stride: u64,
}

impl MaskSource {
    /// Consecutive pass indices per batch slot (stride 1).
    pub fn new(seed: u64, base_pass: u64) -> Self {
        MaskSource { seed, base_pass, pass_stride: 1 }
    }

    /// Custom slot-to-pass stride, for batches whose slots are not
    /// consecutive passes (e.g. one sample index across many images).
    pub fn strided(seed: u64, base_pass: u64, pass_stride: u64) -> Self {
        MaskSource { seed, base_pass, pass_stride }
    }

    /// Pass index assigned to batch slot `slot`.
    pub fn pass_for_slot(&self, slot: usize) -> u64 {
        self.base_pass.wrapping_add((slot as u64).wrapping_mul(self.pass_stride))
    }
}

/// How dropout behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Sampled masks from training streams; the resulting tape supports
    /// backprop.
    Train(MaskSource),
    /// Weight-averaging evaluation: activations scaled by the keep
    /// probability, no sampling.
    StandardTest,
    /// Sampled masks from evaluation streams; no backprop.
    StochasticTest(MaskSource),
}

impl ForwardMode {
    fn mask_params(&self) -> Option<(MaskSource, Purpose)> {
        match *self {
            ForwardMode::Train(src) => Some((src, Purpose::TrainMask)),
            ForwardMode::StochasticTest(src) => Some((src, Purpose::EvalMask)),
            ForwardMode::StandardTest => None,
        }
    }
}

/// Weight matrix and bias vector of one parameterised layer.
///
/// Convolution weights are stored matmul-ready as `[kh·kw·C_in, K]`: row
/// `(dy·kw + dx)·C + c` holds the kernel entries at offset `(dy, dx)`,
/// input channel `c`, for all `K` output channels.  Inner-product weights
/// are `[D_in, D_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Errors from building or running networks.
#[derive(Debug)]
pub enum NnError {
    Tensor(TensorError),
    Rng(RngError),
    /// A network needs at least one layer.
    NoLayers,
    /// Stride must be at least 1.
    ZeroStride { layer: usize },
    /// Kernel or pooling window has a zero dimension.
    ZeroKernel { layer: usize },
    /// Layer produces no output channels or units.
    ZeroWidth { layer: usize },
    /// Kernel (plus padding) or pooling window exceeds its input.
    KernelExceedsInput {
        layer: usize,
        kernel: (usize, usize),
        input: (usize, usize),
        pad: usize,
    },
    /// Dropout keep probability must lie in (0, 1].
    BadKeepProb { layer: usize, keep_prob: f64 },
    /// Conv or pool applied to a non-image (non-3-D) activation.
    NeedsImage { layer: usize, got: Shape },
    /// Forward input does not match the network's input shape (optionally
    /// with a leading batch dimension).
    InputShape { expected: Shape, got: Shape },
    /// Gradient passed to backward does not match the output shape.
    OutputShape { expected: Shape, got: Shape },
    /// Backward requires a tape recorded in training mode.
    NotTrainTape,
    /// Label count differs from the batch size.
    LabelCount { labels: usize, batch: usize },
    /// Class label out of range.
    InvalidLabel { label: usize, classes: usize },
    /// Loaded parameters do not fit the architecture.
    ParamShape {
        layer: usize,
        expected: Shape,
        got: Shape,
    },
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::Tensor(e) => write!(f, "tensor error: {e}"),
            NnError::Rng(e) => write!(f, "rng error: {e}"),
            NnError::NoLayers => write!(f, "network has no layers"),
            NnError::ZeroStride { layer } => write!(f, "layer {layer}: stride must be >= 1"),
            NnError::ZeroKernel { layer } => write!(f, "layer {layer}: kernel size must be >= 1"),
            NnError::ZeroWidth { layer } => {
                write!(f, "layer {layer}: output channels/units must be >= 1")
            }
            NnError::KernelExceedsInput { layer, kernel, input, pad } => write!(
                f,
                "layer {layer}: kernel {}x{} exceeds padded input {}x{} (pad {pad})",
                kernel.0, kernel.1, input.0, input.1
            ),
            NnError::BadKeepProb { layer, keep_prob } => {
                write!(f, "layer {layer}: keep probability {keep_prob} outside (0, 1]")
            }
            NnError::NeedsImage { layer, got } => {
                write!(f, "layer {layer}: expected an [H, W, C] activation, got {got}")
            }
            NnError::InputShape { expected, got } => {
                write!(f, "input shape {got} does not match network input {expected}")
            }
            NnError::OutputShape { expected, got } => {
                write!(f, "gradient shape {got} does not match network output {expected}")
            }
            NnError::NotTrainTape => {
                write!(f, "backward requires a tape recorded with ForwardMode::Train")
            }
            NnError::LabelCount { labels, batch } => {
                write!(f, "{labels} labels for a batch of {batch}")
            }
            NnError::InvalidLabel { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            NnError::ParamShape { layer, expected, got } => {
                write!(f, "layer {layer}: parameter shape {got} does not match {expected}")
            }
        }
    }
}

impl std::error::Error for NnError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            NnError::Tensor(e) => Some(e),
            NnError::Rng(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for NnError {
    fn from(e: TensorError) -> Self {
        NnError::Tensor(e)
    }
}

impl From<RngError> for NnError {
    fn from(e: RngError) -> Self {
        NnError::Rng(e)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    /// Per-example output shape (no batch dimension).
    out_shape: Shape,
    params: Option<LayerParams>,
}

/// A sequential network with fixed input shape and inferred layer shapes.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Shape,
    layers: Vec<Layer>,
}

/// Per-layer recordings of one training-mode forward pass, everything
/// backward needs: layer activations plus conv patch matrices, pooling
/// routes and dropout masks.
#[derive(Debug)]
pub struct Tape {
    mode: ForwardMode,
    batch: usize,
    input: Tensor,
    outs: Vec<Tensor>,
    aux: Vec<Aux>,
}

#[derive(Debug)]
enum Aux {
    None,
    Conv { cols: Tensor },
    Pool { routes: Vec<usize> },
    Dropout { mask: Tensor },
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// The 0/1 mask drawn for a dropout layer on this pass, shaped
    /// `[batch, …layer dims]`.  `None` for other layers or standard mode.
    pub fn dropout_mask(&self, layer: usize) -> Option<&Tensor> {
        match self.aux.get(layer) {
            Some(Aux::Dropout { mask }) => Some(mask),
            _ => None,
        }
    }

    /// Activation after `layer`, shaped `[batch, …layer dims]`.
    pub fn activation(&self, layer: usize) -> Option<&Tensor> {
        self.outs.get(layer)
    }
}

/// Parameter gradients from one backward pass (summed over the batch), plus
/// the gradient with respect to the input.
#[derive(Debug)]
pub struct Gradients {
    /// One entry per layer; `Some` exactly for parameterised layers.
    pub layers: Vec<Option<LayerParams>>,
    /// Gradient w.r.t. the (batched) input, `[batch, …input dims]`.
    pub input: Tensor,
}

impl Network {
    /// Validates a layer stack against an input shape and infers every
    /// activation shape.  Parameters start at zero; see [`Network::init_params`].
    pub fn build(input_shape: Shape, specs: Vec<LayerSpec>) -> Result<Self, NnError> {
        if specs.is_empty() {
            return Err(NnError::NoLayers);
        }
        let mut cur = input_shape.clone();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let (out_shape, params) = match spec {
                LayerSpec::Conv { kh, kw, out_channels, stride, pad } => {
                    let (h, w, c) = expect_image(&cur, i)?;
                    if stride == 0 {
                        return Err(NnError::ZeroStride { layer: i });
                    }
                    if kh == 0 || kw == 0 {
                        return Err(NnError::ZeroKernel { layer: i });
                    }
                    if out_channels == 0 {
                        return Err(NnError::ZeroWidth { layer: i });
                    }
                    if kh > h + 2 * pad || kw > w + 2 * pad {
                        return Err(NnError::KernelExceedsInput {
                            layer: i,
                            kernel: (kh, kw),
                            input: (h, w),
                            pad,
                        });
                    }
                    let oh = (h + 2 * pad - kh) / stride + 1;
                    let ow = (w + 2 * pad - kw) / stride + 1;
                    let weight = Tensor::zeros(Shape::new(&[kh * kw * c, out_channels])?);
                    let bias = Tensor::zeros(Shape::new(&[out_channels])?);
                    (
                        Shape::new(&[oh, ow, out_channels])?,
                        Some(LayerParams { weight, bias }),
                    )
                }
                LayerSpec::MaxPool { window, stride } => {
                    let (h, w, c) = expect_image(&cur, i)?;
                    if stride == 0 {
                        return Err(NnError::ZeroStride { layer: i });
                    }
                    if window == 0 {
                        return Err(NnError::ZeroKernel { layer: i });
                    }
                    if window > h || window > w {
                        return Err(NnError::KernelExceedsInput {
                            layer: i,
                            kernel: (window, window),
                            input: (h, w),
                            pad: 0,
                        });
                    }
                    let oh = (h - window) / stride + 1;
                    let ow = (w - window) / stride + 1;
                    (Shape::new(&[oh, ow, c])?, None)
                }
                LayerSpec::Relu => (cur.clone(), None),
                LayerSpec::InnerProduct { out_units } => {
                    if out_units == 0 {
                        return Err(NnError::ZeroWidth { layer: i });
                    }
                    let d_in = cur.elem_count();
                    let weight = Tensor::zeros(Shape::new(&[d_in, out_units])?);
                    let bias = Tensor::zeros(Shape::new(&[out_units])?);
                    (Shape::new(&[out_units])?, Some(LayerParams { weight, bias }))
                }
                LayerSpec::Dropout { keep_prob } => {
                    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                        return Err(NnError::BadKeepProb { layer: i, keep_prob });
                    }
                    (cur.clone(), None)
                }
            };
            cur = out_shape.clone();
            layers.push(Layer { spec, out_shape, params });
        }
        Ok(Network { input_shape, layers })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    /// Per-example shape of the final layer's output.
    pub fn output_shape(&self) -> &Shape {
        &self.layers.last().expect("networks have >= 1 layer").out_shape
    }

    /// Per-example output shape of a given layer.
    pub fn layer_shape(&self, layer: usize) -> &Shape {
        &self.layers[layer].out_shape
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn params(&self, layer: usize) -> Option<&LayerParams> {
        self.layers[layer].params.as_ref()
    }

    pub fn params_mut(&mut self, layer: usize) -> Option<&mut LayerParams> {
        self.layers[layer].params.as_mut()
    }

    /// Indices of layers that carry parameters, in order.
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.params.as_ref().map(|_| i))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(|p| p.weight.elem_count() + p.bias.elem_count())
            .sum()
    }

    /// Replaces the parameters of one layer, checking shapes.
    pub fn set_params(&mut self, layer: usize, params: LayerParams) -> Result<(), NnError> {
        let slot = self.layers[layer]
            .params
            .as_mut()
            .ok_or(NnError::ParamShape {
                layer,
                expected: Shape::new(&[1]).expect("static shape"),
                got: params.weight.shape().clone(),
            })?;
        if params.weight.shape() != slot.weight.shape() {
            return Err(NnError::ParamShape {
                layer,
                expected: slot.weight.shape().clone(),
                got: params.weight.shape().clone(),
            });
        }
        if params.bias.shape() != slot.bias.shape() {
            return Err(NnError::ParamShape {
                layer,
                expected: slot.bias.shape().clone(),
                got: params.bias.shape().clone(),
            });
        }
        *slot = params;
        Ok(())
    }

    /// Fan-in uniform init: weights of layer `i` drawn ascending from the
    /// stream `(seed, layer i, WeightInit)` as U(−√(3/fan_in), √(3/fan_in));
    /// biases start at zero (they are trained as point values).
    pub fn init_params(&mut self, seed: u64) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let Some(params) = layer.params.as_mut() else { continue };
            let fan_in = params.weight.dims()[0];
            let limit = (3.0 / fan_in as f64).sqrt();
            let mut stream = RngStream::for_purpose(seed, i as u32, Purpose::WeightInit, 0);
            for v in params.weight.data_mut() {
                *v = stream
                    .uniform(-limit, limit)
                    .expect("non-empty init range");
            }
            for v in params.bias.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Checks a forward input and returns it as `[B, …input dims]` together
    /// with whether the caller passed a single example.
    fn batched_input(&self, x: &Tensor) -> Result<(Tensor, bool), NnError> {
        let in_dims = self.input_shape.dims();
        if x.dims() == in_dims {
            let mut dims = vec![1];
            dims.extend_from_slice(in_dims);
            return Ok((x.clone().reshape(&dims)?, true));
        }
        if x.dims().len() == in_dims.len() + 1 && &x.dims()[1..] == in_dims {
            return Ok((x.clone(), false));
        }
        Err(NnError::InputShape {
            expected: self.input_shape.clone(),
            got: x.shape().clone(),
        })
    }

    /// Forward pass over a single example shaped like the input shape.
    /// Returns the per-example output and the pass's tape.
    pub fn forward(&self, x: &Tensor, mode: &ForwardMode) -> Result<(Tensor, Tape), NnError> {
        let (batched, _) = self.batched_input(x)?;
        let (out, tape) = self.run(batched, mode, true)?;
        let out = out.reshape(self.output_shape().dims())?;
        Ok((out, tape.expect("tape requested")))
    }

    /// Forward pass over `[B, …input dims]`, returning `[B, …output dims]`
    /// and the tape.
    pub fn forward_batch(&self, x: &Tensor, mode: &ForwardMode) -> Result<(Tensor, Tape), NnError> {
        let (batched, _) = self.batched_input(x)?;
        let (out, tape) = self.run(batched, mode, true)?;
        Ok((out, tape.expect("tape requested")))
    }

    /// Forward pass that keeps no tape (inference only).
    pub fn forward_batch_infer(&self, x: &Tensor, mode: &ForwardMode) -> Result<Tensor, NnError> {
        let (batched, _) = self.batched_input(x)?;
        let (out, _) = self.run(batched, mode, false)?;
        Ok(out)
    }

    /// Index of the first dropout layer, if any.
    pub(crate) fn first_dropout_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l.spec, LayerSpec::Dropout { .. }))
    }

    /// Applies a contiguous range of layers to an already-batched activation
    /// without recording a tape.  The input must match the entry shape of
    /// `range.start`; internal callers guarantee this.
    pub(crate) fn run_layers(
        &self,
        input: Tensor,
        mode: &ForwardMode,
        range: std::ops::Range<usize>,
    ) -> Result<Tensor, NnError> {
        let batch = input.dims()[0];
        let mut cur = input;
        for i in range {
            let layer = &self.layers[i];
            let (next, _) = self.apply_layer(i, layer, &cur, batch, mode)?;
            cur = next;
        }
        Ok(cur)
    }

    fn run(
        &self,
        input: Tensor,
        mode: &ForwardMode,
        keep_tape: bool,
    ) -> Result<(Tensor, Option<Tape>), NnError> {
        let batch = input.dims()[0];
        let mut outs = Vec::new();
        let mut aux = Vec::new();
        let mut cur = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, a) = self.apply_layer(i, layer, &cur, batch, mode)?;
            if keep_tape {
                outs.push(next.clone());
                aux.push(a);
            }
            cur = next;
        }
        let tape = keep_tape.then_some(Tape {
            mode: *mode,
            batch,
            input,
            outs,
            aux,
        });
        Ok((cur, tape))
    }

    fn apply_layer(
        &self,
        index: usize,
        layer: &Layer,
        x: &Tensor,
        batch: usize,
        mode: &ForwardMode,
    ) -> Result<(Tensor, Aux), NnError> {
        match layer.spec {
            LayerSpec::Conv { .. } => {
                let geom = ConvGeom::for_layer(&layer.spec, x, &layer.out_shape);
                let params = layer.params.as_ref().expect("conv has params");
                let (y, cols) = conv::forward(x, params, &geom)?;
                Ok((y, Aux::Conv { cols }))
            }
            LayerSpec::MaxPool { window, stride } => {
                let (y, routes) = pool::forward(x, window, stride, &layer.out_shape)?;
                Ok((y, Aux::Pool { routes }))
            }
            LayerSpec::Relu => Ok((x.relu(), Aux::None)),
            LayerSpec::InnerProduct { .. } => {
                let params = layer.params.as_ref().expect("inner product has params");
                let d_in = params.weight.dims()[0];
                let x2d = x.clone().reshape(&[batch, d_in])?;
                let y = x2d.matmul_bias(&params.weight, Some(&params.bias))?;
                Ok((y, Aux::None))
            }
            LayerSpec::Dropout { keep_prob } => match mode.mask_params() {
                Some((src, purpose)) => {
                    let mask = self.draw_mask(index, x, batch, keep_prob, src, purpose)?;
                    Ok((x.mul(&mask)?, Aux::Dropout { mask }))
                }
                None => Ok((x.scale(keep_prob)?, Aux::None)),
            },
        }
    }

    /// Draws a `[batch, …dims]` 0/1 mask; slot `s` takes its per-element
    /// Bernoulli bits (ascending flat order) from the stream for pass
    /// `src.pass_for_slot(s)`.
    fn draw_mask(
        &self,
        layer: usize,
        x: &Tensor,
        batch: usize,
        keep_prob: f64,
        src: MaskSource,
        purpose: Purpose,
    ) -> Result<Tensor, NnError> {
        let per_example = x.elem_count() / batch;
        let mut data = Vec::with_capacity(x.elem_count());
        for slot in 0..batch {
            let mut stream =
                RngStream::for_purpose(src.seed, layer as u32, purpose, src.pass_for_slot(slot));
            for _ in 0..per_example {
                data.push(if stream.bernoulli(keep_prob)? { 1.0 } else { 0.0 });
            }
        }
        Ok(Tensor::from_parts(x.shape().clone(), data))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the batched output, summed
    /// convention) through a training-mode tape.
    pub fn backward_batch(&self, tape: &Tape, d_out: &Tensor) -> Result<Gradients, NnError> {
        if !matches!(tape.mode, ForwardMode::Train(_)) {
            return Err(NnError::NotTrainTape);
        }
        let last = tape.outs.last().expect("tape covers all layers");
        if d_out.shape() != last.shape() {
            return Err(NnError::OutputShape {
                expected: last.shape().clone(),
                got: d_out.shape().clone(),
            });
        }
        let batch = tape.batch;
        let mut grads: Vec<Option<LayerParams>> = vec![None; self.layers.len()];
        let mut d = d_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = if i == 0 { &tape.input } else { &tape.outs[i - 1] };
            d = match layer.spec {
                LayerSpec::Conv { .. } => {
                    let geom = ConvGeom::for_layer(&layer.spec, x, &layer.out_shape);
                    let params = layer.params.as_ref().expect("conv has params");
                    let Aux::Conv { cols } = &tape.aux[i] else {
                        unreachable!("conv layer recorded conv aux")
                    };
                    let (dw, db, dx) = conv::backward(&d, cols, params, &geom)?;
                    grads[i] = Some(LayerParams { weight: dw, bias: db });
                    dx
                }
                LayerSpec::MaxPool { .. } => {
                    let Aux::Pool { routes } = &tape.aux[i] else {
                        unreachable!("pool layer recorded pool aux")
                    };
                    pool::backward(&d, routes, x.shape())?
                }
                LayerSpec::Relu => d.mul(&x.relu_grad())?,
                LayerSpec::InnerProduct { .. } => {
                    let params = layer.params.as_ref().expect("inner product has params");
                    let d_in = params.weight.dims()[0];
                    let x2d = x.clone().reshape(&[batch, d_in])?;
                    let dw = x2d.matmul_at_b(&d)?;
                    let db = d.sum_axis(0)?;
                    grads[i] = Some(LayerParams { weight: dw, bias: db });
                    d.matmul_a_bt(&params.weight)?.reshape(x.dims())?
                }
                LayerSpec::Dropout { .. } => {
                    let Aux::Dropout { mask } = &tape.aux[i] else {
                        unreachable!("train-mode dropout recorded a mask")
                    };
                    d.mul(mask)?
                }
            };
        }
        Ok(Gradients { layers: grads, input: d })
    }

    /// Single-example backward: `d_out` shaped like the per-example output.
    pub fn backward(&self, tape: &Tape, d_out: &Tensor) -> Result<Gradients, NnError> {
        if d_out.dims() == self.output_shape().dims() {
            let mut dims = vec![1];
            dims.extend_from_slice(d_out.dims());
            let d = d_out.clone().reshape(&dims)?;
            return self.backward_batch(tape, &d);
        }
        self.backward_batch(tape, d_out)
    }
}

fn expect_image(shape: &Shape, layer: usize) -> Result<(usize, usize, usize), NnError> {
    match shape.dims() {
        &[h, w, c] => Ok((h, w, c)),
        _ => Err(NnError::NeedsImage { layer, got: shape.clone() }),
    }
}

/// Row-wise softmax of `[B, D]` logits, shifted by each row's max for
/// stability.  Probabilities are positive and sum to 1 per row (within
/// rounding).
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor, NnError> {
    let &[b, d] = logits.dims() else {
        return Err(NnError::Tensor(TensorError::NotMatrix {
            op: "softmax_rows",
            shape: logits.shape().clone(),
        }));
    };
    let mut out = vec![0.0; b * d];
    for (row, orow) in logits.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(Tensor::from_parts(Shape::new(&[b, d])?, out))
}

/// Softmax of a 1-D logit vector.
pub fn softmax(logits: &Tensor) -> Result<Tensor, NnError> {
    let &[d] = logits.dims() else {
        return Err(NnError::Tensor(TensorError::NotMatrix {
            op: "softmax",
            shape: logits.shape().clone(),
        }));
    };
    softmax_rows(&logits.clone().reshape(&[1, d])?)?
        .reshape(&[d])
        .map_err(NnError::from)
}

/// Per-example cross-entropy losses for `[B, D]` logits and the gradient of
/// their **sum** w.r.t. the logits (`softmax − one_hot` per row).  Losses
/// are computed in log space, so vanishing probabilities cannot produce
/// non-finite values.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(Vec<f64>, Tensor), NnError> {
    let &[b, d] = logits.dims() else {
        return Err(NnError::Tensor(TensorError::NotMatrix {
            op: "softmax_cross_entropy",
            shape: logits.shape().clone(),
        }));
    };
    if labels.len() != b {
        return Err(NnError::LabelCount { labels: labels.len(), batch: b });
    }
    for &l in labels {
        if l >= d {
            return Err(NnError::InvalidLabel { label: l, classes: d });
        }
    }
    let probs = softmax_rows(logits)?;
    let mut grad = probs.data().to_vec();
    let mut losses = Vec::with_capacity(b);
    for (i, (row, &label)) in logits.data().chunks_exact(d).zip(labels).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        losses.push(sum.ln() - (row[label] - max));
        grad[i * d + label] -= 1.0;
    }
    Ok((losses, Tensor::from_parts(Shape::new(&[b, d])?, grad)))
}
