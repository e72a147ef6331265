//! Central finite-difference validation of network gradients.
//!
//! For each layer kind, random small networks are built around it and the
//! analytic gradients from `Network::backward` are compared against
//! `(loss(θ+ε) − loss(θ−ε)) / 2ε` for every weight, bias and input
//! element.  The loss is the test-local softmax cross-entropy, and its
//! logit gradient (softmax − one-hot) is likewise computed here, so the
//! check trusts nothing but the forward pass being differentiated.
//!
//! Relu and max-pool are piecewise linear; instances whose decision
//! margins sit inside the finite-difference window are redrawn so the
//! central difference stays on one linear piece.

use bcnn::nn::{ForwardMode, LayerParams, LayerSpec, MaskSource, Network};
use bcnn::tensor::{Shape, Tensor};

use super::{cross_entropy, rel_err, softmax, TestRng, FD_EPS};

/// Layer kinds covered by the gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    InnerProduct,
    Conv,
    MaxPool,
    Relu,
    Dropout,
}

pub const ALL_KINDS: [Kind; 5] =
    [Kind::InnerProduct, Kind::Conv, Kind::MaxPool, Kind::Relu, Kind::Dropout];

/// Margin kept between piecewise-linear branches so ±ε stays on one piece.
const MARGIN: f64 = 1e-3;

/// Tolerance on the floored relative error of each derivative.
pub const TOLERANCE: f64 = 1e-4;

struct Instance {
    net: Network,
    x: Tensor,
    label: usize,
    mode: ForwardMode,
}

fn loss_of(net: &Network, x: &Tensor, label: usize, mode: &ForwardMode) -> f64 {
    let (logits, _) = net.forward(x, mode).expect("forward");
    cross_entropy(logits.data(), label)
}

/// Checks every analytic derivative of one instance against central
/// differences; returns the largest relative error seen.
fn check_instance(inst: &mut Instance, what: &str) -> f64 {
    let (logits, tape) = inst.net.forward(&inst.x, &inst.mode).expect("forward");
    let mut d_out = softmax(logits.data());
    d_out[inst.label] -= 1.0;
    let d_out = Tensor::from_vec(logits.dims(), d_out).unwrap();
    let grads = inst.net.backward(&tape, &d_out).expect("backward");

    let mut worst: f64 = 0.0;
    let mut note = |analytic: f64, numeric: f64, at: String| {
        let err = rel_err(analytic, numeric);
        assert!(
            err <= TOLERANCE,
            "{what}: {at}: analytic {analytic:.9e} vs central difference {numeric:.9e} \
             (relative error {err:.3e})"
        );
        worst = worst.max(err);
    };

    // Input gradient.
    let x_data = inst.x.data().to_vec();
    for i in 0..x_data.len() {
        let bumped = |delta: f64| {
            let mut data = x_data.clone();
            data[i] += delta;
            let x = Tensor::from_vec(inst.x.dims(), data).unwrap();
            loss_of(&inst.net, &x, inst.label, &inst.mode)
        };
        let numeric = (bumped(FD_EPS) - bumped(-FD_EPS)) / (2.0 * FD_EPS);
        note(grads.input.data()[i], numeric, format!("input[{i}]"));
    }

    // Parameter gradients.
    for layer in inst.net.param_layers() {
        let orig = inst.net.params(layer).unwrap().clone();
        let analytic = grads.layers[layer].as_ref().expect("parameterised layer gradient");
        for weight in [true, false] {
            let (tensor, grad) =
                if weight { (&orig.weight, &analytic.weight) } else { (&orig.bias, &analytic.bias) };
            for i in 0..tensor.elem_count() {
                let mut bumped = |delta: f64| {
                    let mut data = tensor.data().to_vec();
                    data[i] += delta;
                    let bumped_tensor = Tensor::from_vec(tensor.dims(), data).unwrap();
                    let params = if weight {
                        LayerParams { weight: bumped_tensor, bias: orig.bias.clone() }
                    } else {
                        LayerParams { weight: orig.weight.clone(), bias: bumped_tensor }
                    };
                    inst.net.set_params(layer, params).unwrap();
                    loss_of(&inst.net, &inst.x, inst.label, &inst.mode)
                };
                let numeric = (bumped(FD_EPS) - bumped(-FD_EPS)) / (2.0 * FD_EPS);
                inst.net.set_params(layer, orig.clone()).unwrap();
                let name = if weight { "weight" } else { "bias" };
                note(grad.data()[i], numeric, format!("layer {layer} {name}[{i}]"));
            }
        }
    }
    worst
}

/// First-layer pre-activations of an `ip → relu → …` net, computed with
/// plain loops; used to redraw instances that sit on a relu kink.
fn ip_preacts(net: &Network, x: &[f64]) -> Vec<f64> {
    let p = net.params(0).unwrap();
    let (d_in, h) = (p.weight.dims()[0], p.weight.dims()[1]);
    (0..h)
        .map(|i| {
            p.bias.data()[i]
                + (0..d_in).map(|d| x[d] * p.weight.data()[d * h + i]).sum::<f64>()
        })
        .collect()
}

/// True when every pooling window has a clear winner: the top two values
/// in each window differ by more than the margin.
fn pool_margins_ok(x: &[f64], (h, w, c): (usize, usize, usize), window: usize, stride: usize) -> bool {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut values: Vec<f64> = Vec::with_capacity(window * window);
                for dy in 0..window {
                    for dx in 0..window {
                        values.push(x[((oy * stride + dy) * w + ox * stride + dx) * c + ch]);
                    }
                }
                values.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if values.len() > 1 && values[0] - values[1] < MARGIN {
                    return false;
                }
            }
        }
    }
    true
}

fn build(kind: Kind, rng: &mut TestRng, attempt_seed: u64) -> Option<Instance> {
    match kind {
        Kind::InnerProduct => {
            let d_in = 2 + rng.index(4);
            let h = 1 + rng.index(4);
            let mut net = Network::build(
                Shape::new(&[d_in]).unwrap(),
                vec![LayerSpec::InnerProduct { out_units: h }],
            )
            .unwrap();
            net.init_params(attempt_seed);
            let x = Tensor::from_vec(&[d_in], rng.fill(d_in, -1.0, 1.0)).unwrap();
            let label = rng.index(h);
            let mode = ForwardMode::Train(MaskSource::new(attempt_seed, 0));
            Some(Instance { net, x, label, mode })
        }
        Kind::Conv => {
            let h = 3 + rng.index(4);
            let w = 3 + rng.index(4);
            let c = 1 + rng.index(2);
            let kh = 1 + rng.index(3.min(h));
            let kw = 1 + rng.index(3.min(w));
            let stride = 1 + rng.index(2);
            let pad = rng.index(2);
            let k = 1 + rng.index(3);
            let mut net = Network::build(
                Shape::new(&[h, w, c]).unwrap(),
                vec![LayerSpec::Conv { kh, kw, out_channels: k, stride, pad }],
            )
            .unwrap();
            net.init_params(attempt_seed);
            let x = Tensor::from_vec(&[h, w, c], rng.fill(h * w * c, -1.0, 1.0)).unwrap();
            let label = rng.index(net.output_shape().elem_count());
            let mode = ForwardMode::Train(MaskSource::new(attempt_seed, 0));
            Some(Instance { net, x, label, mode })
        }
        Kind::MaxPool => {
            let window = 2 + rng.index(2);
            let h = window + 1 + rng.index(3);
            let w = window + 1 + rng.index(3);
            let c = 1 + rng.index(2);
            let stride = 1 + rng.index(window);
            let data = rng.fill(h * w * c, -1.0, 1.0);
            if !pool_margins_ok(&data, (h, w, c), window, stride) {
                return None;
            }
            let net = Network::build(
                Shape::new(&[h, w, c]).unwrap(),
                vec![LayerSpec::MaxPool { window, stride }],
            )
            .unwrap();
            let x = Tensor::from_vec(&[h, w, c], data).unwrap();
            let label = rng.index(net.output_shape().elem_count());
            let mode = ForwardMode::Train(MaskSource::new(attempt_seed, 0));
            Some(Instance { net, x, label, mode })
        }
        Kind::Relu | Kind::Dropout => {
            let d_in = 2 + rng.index(4);
            let h = 2 + rng.index(5);
            let classes = 2 + rng.index(3);
            let mut specs = vec![LayerSpec::InnerProduct { out_units: h }, LayerSpec::Relu];
            if kind == Kind::Dropout {
                specs.push(LayerSpec::Dropout { keep_prob: 0.5 });
            }
            specs.push(LayerSpec::InnerProduct { out_units: classes });
            let mut net = Network::build(Shape::new(&[d_in]).unwrap(), specs).unwrap();
            net.init_params(attempt_seed);
            let data = rng.fill(d_in, -1.0, 1.0);
            if ip_preacts(&net, &data).iter().any(|p| p.abs() < MARGIN) {
                return None;
            }
            let x = Tensor::from_vec(&[d_in], data).unwrap();
            let label = rng.index(classes);
            let mode = ForwardMode::Train(MaskSource::new(attempt_seed, rng.index(1000) as u64));
            Some(Instance { net, x, label, mode })
        }
    }
}

/// Runs `count` random finite-difference instances of one layer kind and
/// returns the worst relative error observed.  Panics on any breach of
/// [`TOLERANCE`].
pub fn check_kind(kind: Kind, count: usize, seed: u64) -> f64 {
    let mut rng = TestRng::new(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut attempt = 0u64;
    while done < count {
        attempt += 1;
        assert!(
            attempt < 20 * count as u64 + 100,
            "{kind:?}: instance generation kept hitting degenerate margins"
        );
        let Some(mut inst) = build(kind, &mut rng, seed.wrapping_add(attempt)) else {
            continue;
        };
        let what = format!("{kind:?} instance {done}");
        worst = worst.max(check_instance(&mut inst, &what));
        done += 1;
    }
    worst
}
