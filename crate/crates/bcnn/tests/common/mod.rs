//! Shared helpers for the integration suites: naive reference
//! implementations written with plain loops (independent of the library's
//! kernels), finite-difference machinery, exhaustive mask enumeration for
//! small dropout layers, synthetic idx-format datasets, and CSV parsing.

#![allow(dead_code)]

pub mod fd;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use bcnn::bayes::{objective, predict_mc};
use bcnn::nn::{ForwardMode, LayerParams, LayerSpec, MaskSource, Network};
use bcnn::rng::{Purpose, RngStream};
use bcnn::tensor::{Shape, Tensor};

// ---------------------------------------------------------------------------
// Reference convolution and pooling, direct sliding-window form.

/// Plain-loop convolution over a `[h, w, c_in]` input with the library's
/// weight layout: row `(dy·kw + dx)·c_in + c`, column `k`.  Returns the
/// `[oh, ow, k_out]` output.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    (h, w, c_in): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    k_out: usize,
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize)) {
    assert_eq!(x.len(), h * w * c_in);
    assert_eq!(weight.len(), kh * kw * c_in * k_out);
    assert_eq!(bias.len(), k_out);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * k_out];
    for oy in 0..oh {
        for ox in 0..ow {
            for k in 0..k_out {
                let mut acc = bias[k];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue; // zero padding
                        }
                        for c in 0..c_in {
                            let xv = x[(iy as usize * w + ix as usize) * c_in + c];
                            let wv = weight[((dy * kw + dx) * c_in + c) * k_out + k];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oy * ow + ox) * k_out + k] = acc;
            }
        }
    }
    (out, (oh, ow))
}

// ---------------------------------------------------------------------------
// Plain math used by the reference implementations.

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy of one logit vector against an integer label.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    log_sum - logits[label]
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let var =
        values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0);
    var.sqrt()
}

/// Least-squares slope of y against x.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

// ---------------------------------------------------------------------------
// Finite differences.

/// Central finite-difference derivative of `f` at offset `i` of a parameter
/// vector, where `f` evaluates a scalar loss under the modified vector.
pub const FD_EPS: f64 = 1e-5;

/// Relative error between an analytic and a finite-difference derivative,
/// with an absolute floor so near-zero pairs compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / scale
}

// ---------------------------------------------------------------------------
// Deterministic test randomness (kept separate from library seeds).

/// Small deterministic generator for shaping random test instances.
pub struct TestRng(RngStream);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(RngStream::new(seed, 0))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.uniform(lo, hi).expect("finite bounds")
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.0.uniform_int(n as u64).expect("nonzero range") as usize
    }

    pub fn fill(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }
}

/// Runs `cases` random convolution shapes (spatial dims ≤ 10, strides ≤ 3,
/// pads ≤ 2) through the library and the naive reference, asserting every
/// element agrees to `tolerance`; returns the worst absolute difference.
pub fn conv_oracle_worst_error(cases: usize, seed: u64, tolerance: f64) -> f64 {
    let mut rng = TestRng::new(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let h = 1 + rng.index(10);
        let w = 1 + rng.index(10);
        let c_in = 1 + rng.index(4);
        let pad = rng.index(3);
        let kh = 1 + rng.index((h + 2 * pad).min(6));
        let kw = 1 + rng.index((w + 2 * pad).min(6));
        let stride = 1 + rng.index(3);
        let k_out = 1 + rng.index(6);

        let mut net = Network::build(
            Shape::new(&[h, w, c_in]).unwrap(),
            vec![LayerSpec::Conv { kh, kw, out_channels: k_out, stride, pad }],
        )
        .unwrap();
        net.init_params(1000 + case as u64);
        let params = net.params(0).unwrap();
        let x_data = rng.fill(h * w * c_in, -2.0, 2.0);

        let (expected, (oh, ow)) = naive_conv(
            &x_data,
            (h, w, c_in),
            params.weight.data(),
            params.bias.data(),
            k_out,
            (kh, kw),
            stride,
            pad,
        );

        let x = Tensor::from_vec(&[h, w, c_in], x_data).unwrap();
        let (got, _) = net.forward(&x, &ForwardMode::Train(MaskSource::new(0, 0))).unwrap();
        assert_eq!(got.dims(), &[oh, ow, k_out], "case {case}: output shape");
        for (i, (g, e)) in got.data().iter().zip(&expected).enumerate() {
            let diff = (g - e).abs();
            assert!(
                diff <= tolerance,
                "case {case} ({h}x{w}x{c_in}, k {kh}x{kw}x{k_out}, stride {stride}, \
                 pad {pad}): element {i} differs: {g} vs {e}"
            );
            worst = worst.max(diff);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// A toy dropout network small enough to enumerate every mask pattern,
// with a reference forward pass written in plain loops.

/// `ip(h) → relu → dropout(keep) → ip(classes)` on a `d_in` input, with
/// parameter copies extracted for the reference computations.
pub struct ToyNet {
    pub net: Network,
    pub d_in: usize,
    pub hidden: usize,
    pub classes: usize,
    pub keep: f64,
    /// Layer index of the dropout layer inside `net`.
    pub dropout_layer: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ToyNet {
    pub fn build(d_in: usize, hidden: usize, classes: usize, keep: f64, seed: u64) -> Self {
        let mut net = Network::build(
            Shape::new(&[d_in]).unwrap(),
            vec![
                LayerSpec::InnerProduct { out_units: hidden },
                LayerSpec::Relu,
                LayerSpec::Dropout { keep_prob: keep },
                LayerSpec::InnerProduct { out_units: classes },
            ],
        )
        .unwrap();
        net.init_params(seed);
        let p1 = net.params(0).unwrap();
        let p2 = net.params(3).unwrap();
        ToyNet {
            d_in,
            hidden,
            classes,
            keep,
            dropout_layer: 2,
            w1: p1.weight.data().to_vec(),
            b1: p1.bias.data().to_vec(),
            w2: p2.weight.data().to_vec(),
            b2: p2.bias.data().to_vec(),
            net,
        }
    }

    /// Reference logits under an explicit 0/1 hidden mask.
    pub fn logits_under_mask(&self, x: &[f64], mask: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.d_in);
        assert_eq!(mask.len(), self.hidden);
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|i| {
                let acc = self.b1[i]
                    + x.iter()
                        .enumerate()
                        .map(|(d, &xv)| xv * self.w1[d * self.hidden + i])
                        .sum::<f64>();
                acc.max(0.0) * mask[i]
            })
            .collect();
        (0..self.classes)
            .map(|j| {
                self.b2[j]
                    + hidden
                        .iter()
                        .enumerate()
                        .map(|(i, &h)| h * self.w2[i * self.classes + j])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Reference logits of the standard (scaled) deterministic pass:
    /// every mask entry replaced by the keep probability.
    pub fn logits_standard(&self, x: &[f64]) -> Vec<f64> {
        self.logits_under_mask(x, &vec![self.keep; self.hidden])
    }

    /// The dropout pattern the library draws for `pass`, reproduced from
    /// the documented stream contract (one stream per pass, ascending
    /// flat element order).
    pub fn mask_for_pass(&self, seed: u64, purpose: Purpose, pass: u64) -> Vec<f64> {
        let mut stream =
            RngStream::for_purpose(seed, self.dropout_layer as u32, purpose, pass);
        (0..self.hidden)
            .map(|_| if stream.bernoulli(self.keep).unwrap() { 1.0 } else { 0.0 })
            .collect()
    }

    /// All `2^hidden` mask patterns with their probabilities.
    pub fn enumerate_masks(&self) -> Vec<(Vec<f64>, f64)> {
        let width = self.hidden;
        assert!(width <= 10, "enumeration is exponential in the mask width");
        (0..1usize << width)
            .map(|bits| {
                let mask: Vec<f64> =
                    (0..width).map(|i| ((bits >> i) & 1) as f64).collect();
                let ones = mask.iter().sum::<f64>();
                let prob = self.keep.powf(ones) * (1.0 - self.keep).powf(width as f64 - ones);
                (mask, prob)
            })
            .collect()
    }

    /// Exact expectation of the softmax output over all mask patterns.
    pub fn expected_probs(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.classes];
        for (mask, prob) in self.enumerate_masks() {
            let probs = softmax(&self.logits_under_mask(x, mask.as_slice()));
            for (a, p) in acc.iter_mut().zip(probs) {
                *a += prob * p;
            }
        }
        acc
    }

    /// Exact expectation of the logits over all mask patterns.
    pub fn expected_logits(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.classes];
        for (mask, prob) in self.enumerate_masks() {
            let logits = self.logits_under_mask(x, mask.as_slice());
            for (a, l) in acc.iter_mut().zip(logits) {
                *a += prob * l;
            }
        }
        acc
    }
}

/// Runs the library's sampled-mask forward pass for one input at one pass
/// index and returns the logits.
pub fn stochastic_logits(net: &Network, x: &Tensor, seed: u64, pass: u64) -> Vec<f64> {
    let (logits, _) = net
        .forward(x, &ForwardMode::StochasticTest(MaskSource::new(seed, pass)))
        .unwrap();
    logits.data().to_vec()
}

// ---------------------------------------------------------------------------
// A generic plain-loop forward pass for ip/relu/dropout networks, used to
// enumerate dropout behaviour on arbitrary small stacks.

/// Evaluates an `ip`/`relu`/`dropout` network with straight-line loops.
/// `masks` supplies one explicit 0/1 pattern per dropout layer in order;
/// `None` evaluates the standard deterministic pass instead (activations
/// scaled by each layer's keep probability).
pub fn reference_forward(net: &Network, x: &[f64], masks: Option<&[Vec<f64>]>) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut mask_ix = 0;
    for (i, spec) in net.specs().iter().enumerate() {
        match *spec {
            LayerSpec::InnerProduct { out_units } => {
                let p = net.params(i).unwrap();
                let d = cur.len();
                cur = (0..out_units)
                    .map(|j| {
                        p.bias.data()[j]
                            + (0..d)
                                .map(|k| cur[k] * p.weight.data()[k * out_units + j])
                                .sum::<f64>()
                    })
                    .collect();
            }
            LayerSpec::Relu => {
                for v in &mut cur {
                    *v = v.max(0.0);
                }
            }
            LayerSpec::Dropout { keep_prob } => match masks {
                Some(all) => {
                    let m = &all[mask_ix];
                    mask_ix += 1;
                    assert_eq!(m.len(), cur.len());
                    for (v, b) in cur.iter_mut().zip(m) {
                        *v *= b;
                    }
                }
                None => {
                    for v in &mut cur {
                        *v *= keep_prob;
                    }
                }
            },
            _ => panic!("reference_forward covers ip/relu/dropout layers only"),
        }
    }
    cur
}

/// All 0/1 patterns of the given width, each with its probability under
/// independent keeps.
pub fn enumerate_patterns(width: usize, keep: f64) -> Vec<(Vec<f64>, f64)> {
    assert!(width <= 12, "enumeration is exponential in the mask width");
    (0..1usize << width)
        .map(|bits| {
            let mask: Vec<f64> = (0..width).map(|i| ((bits >> i) & 1) as f64).collect();
            let ones = mask.iter().sum::<f64>();
            let prob = keep.powf(ones) * (1.0 - keep).powf(width as f64 - ones);
            (mask, prob)
        })
        .collect()
}

/// The mask pattern the library draws for one dropout layer at one pass,
/// reproduced from the documented stream contract.
pub fn library_mask(
    seed: u64,
    layer: usize,
    purpose: Purpose,
    pass: u64,
    width: usize,
    keep: f64,
) -> Vec<f64> {
    let mut stream = RngStream::for_purpose(seed, layer as u32, purpose, pass);
    (0..width)
        .map(|_| if stream.bernoulli(keep).unwrap() { 1.0 } else { 0.0 })
        .collect()
}

/// Largest absolute component difference between two equal-length vectors.
pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Canonical enumeration fixtures: one fixed toy network and input whose
// closed-form expectations anchor both the sampled objective and the Monte
// Carlo predictive. The focused suites and the acceptance gate run the same
// code with different draw counts.

/// Outcome of cross-checking the sampled objective against an exhaustive
/// mask enumeration.
pub struct ObjectiveEnumeration {
    /// Probability-weighted expected objective over all mask patterns,
    /// computed with the plain-loop reference.
    pub exact: f64,
    /// Mean of the sampled library objective across the draws.
    pub sampled_mean: f64,
    /// Standard error of that mean.
    pub standard_error: f64,
    /// Distinct mask patterns observed among the draws.
    pub patterns_seen: usize,
    /// Patterns a complete enumeration contains.
    pub patterns_total: usize,
    /// Worst |library − reference| over the per-pass objective values.
    pub worst_pass_mismatch: f64,
    /// The expectation re-assembled from *library* values pattern by
    /// pattern; trustworthy once `patterns_seen == patterns_total`.
    pub exact_via_library: f64,
}

/// Draws the sampled objective `draws` times on the canonical toy network,
/// checks every value against a plain-loop evaluation under the replicated
/// mask, and reports the enumerated expectation alongside the sample mean.
pub fn enumerate_objective(draws: usize) -> ObjectiveEnumeration {
    let toy = ToyNet::build(6, 8, 3, 0.5, 90);
    let mut rng = TestRng::new(7);
    let x = rng.fill(toy.d_in, -2.0, 2.0);
    let label = 1u8;
    let weight_decay = 5e-4;
    let mask_seed = 4242;
    let images = Tensor::from_vec(&[1, toy.d_in], x.clone()).unwrap();

    // The regulariser is mask-independent; compute it once from the
    // parameter copies.
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let reg = weight_decay * (sq(&toy.w1) + sq(&toy.b1) + sq(&toy.w2) + sq(&toy.b2));
    let bits_of = |mask: &[f64]| {
        mask.iter()
            .enumerate()
            .fold(0u32, |acc, (i, &b)| acc | ((b as u32) << i))
    };

    let mut samples = Vec::with_capacity(draws);
    let mut by_pattern: HashMap<u32, f64> = HashMap::new();
    let mut worst = 0.0f64;
    for pass in 0..draws as u64 {
        let (value, _grads) = objective(
            &toy.net,
            &images,
            &[label],
            weight_decay,
            MaskSource::new(mask_seed, pass),
        )
        .unwrap();
        let mask = toy.mask_for_pass(mask_seed, Purpose::TrainMask, pass);
        let ce = cross_entropy(&toy.logits_under_mask(&x, &mask), label as usize);
        worst = worst
            .max((value.data_term - ce).abs())
            .max((value.reg_term - reg).abs())
            .max((value.total - (ce + reg)).abs());
        by_pattern.entry(bits_of(&mask)).or_insert(value.total);
        samples.push(value.total);
    }

    let patterns = toy.enumerate_masks();
    let total_prob: f64 = patterns.iter().map(|(_, p)| p).sum();
    assert!((total_prob - 1.0).abs() <= 1e-12, "pattern probabilities sum to one");
    let exact: f64 = patterns
        .iter()
        .map(|(mask, prob)| {
            prob * (cross_entropy(&toy.logits_under_mask(&x, mask), label as usize) + reg)
        })
        .sum();
    let exact_via_library: f64 = patterns
        .iter()
        .filter_map(|(mask, prob)| by_pattern.get(&bits_of(mask)).map(|v| prob * v))
        .sum();

    ObjectiveEnumeration {
        exact,
        sampled_mean: mean(&samples),
        standard_error: sample_std(&samples) / (samples.len() as f64).sqrt(),
        patterns_seen: by_pattern.len(),
        patterns_total: patterns.len(),
        worst_pass_mismatch: worst,
        exact_via_library,
    }
}

/// Exact expectation, Monte Carlo estimate, and per-class standard errors
/// for a `t`-sample prediction on the canonical toy network. The standard
/// errors come from the enumerated per-class variance of a single pass.
pub struct McConvergence {
    pub exact: Vec<f64>,
    pub estimate: Vec<f64>,
    pub standard_error: Vec<f64>,
    /// Sum of the averaged probabilities (should be 1).
    pub prob_sum: f64,
}

/// Runs a `t`-sample Monte Carlo prediction on the canonical toy network
/// and pairs it with the exact enumerated expectation.
pub fn mc_convergence(t: usize) -> McConvergence {
    let (toy, x, input) = canonical_toy_prediction_setup();

    let exact = toy.expected_probs(&x);
    // Per-class variance of a single stochastic pass, exact by enumeration.
    let mut var = vec![0.0; toy.classes];
    for (mask, prob) in toy.enumerate_masks() {
        let probs = softmax(&toy.logits_under_mask(&x, &mask));
        for c in 0..toy.classes {
            var[c] += prob * (probs[c] - exact[c]).powi(2);
        }
    }

    let pred = predict_mc(&toy.net, &input, t, MaskSource::new(515151, 0)).unwrap();
    McConvergence {
        exact,
        estimate: pred.probs.data().to_vec(),
        standard_error: var.iter().map(|v| (v / t as f64).sqrt()).collect(),
        prob_sum: pred.probs.data().iter().sum(),
    }
}

/// Least-squares slope of log empirical estimator variance against log
/// sample count, over disjoint-pass repeats on the canonical toy network.
/// An exact 1/T decay gives −1.
pub fn mc_variance_slope(t_levels: &[usize], repeats: usize) -> f64 {
    let (toy, _x, input) = canonical_toy_prediction_setup();

    let mut log_t = Vec::new();
    let mut log_var = Vec::new();
    for &t in t_levels {
        // One estimate per repeat, each averaging a disjoint block of
        // passes so the repeats are independent draws.
        let mut per_class: Vec<Vec<f64>> = vec![Vec::with_capacity(repeats); toy.classes];
        for r in 0..repeats {
            let base = (r * t) as u64;
            let pred = predict_mc(&toy.net, &input, t, MaskSource::new(515151 + t as u64, base))
                .unwrap();
            for (vals, &p) in per_class.iter_mut().zip(pred.probs.data()) {
                vals.push(p);
            }
        }
        // Average the per-class variances into one spread measure per T.
        let v: f64 = per_class
            .iter()
            .map(|vals| sample_std(vals).powi(2))
            .sum::<f64>()
            / toy.classes as f64;
        assert!(v > 0.0, "estimator variance must be positive");
        log_t.push((t as f64).ln());
        log_var.push(v.ln());
    }
    ls_slope(&log_t, &log_var)
}

/// The toy network and input shared by [`mc_convergence`] and
/// [`mc_variance_slope`].
fn canonical_toy_prediction_setup() -> (ToyNet, Vec<f64>, Tensor) {
    let toy = ToyNet::build(6, 8, 3, 0.5, 90);
    let mut rng = TestRng::new(21);
    let x = rng.fill(toy.d_in, -3.0, 3.0);
    let input = Tensor::from_vec(&[toy.d_in], x.clone()).unwrap();
    (toy, x, input)
}

// ---------------------------------------------------------------------------
// Constructed "standard approximation fails" witnesses.

/// Gaps between the standard deterministic pass and the exact expectation
/// over enumerated dropout masks on two constructed stacks.
///
/// *Literal stack* `dropout → relu → linear`: the 0/1 mask commutes with
/// the relu, so the expected logits equal the standard logits exactly and
/// any discrepancy appears only after the softmax readout.
///
/// *Post-linear stack* `dropout → linear → relu → linear`: the relu sits
/// downstream of the masked matrix product, so the expected logits
/// themselves depart from the standard pass; removing that relu restores
/// exact agreement.
pub struct WitnessGaps {
    /// L∞ gap on class probabilities, literal stack.
    pub literal_probs_gap: f64,
    /// L∞ gap on logits, literal stack (commutation makes this ~0).
    pub literal_logits_gap: f64,
    /// L∞ gap on logits, post-linear stack with the relu present.
    pub post_linear_logits_gap: f64,
    /// L∞ gap on logits, post-linear stack with the relu removed.
    pub linear_control_logits_gap: f64,
}

/// Builds the witness stacks, cross-checks the library's sampled and
/// standard passes against the plain-loop enumeration, and returns the
/// measured gaps.  Instances are redrawn until the literal-stack
/// probability gap and the post-linear logits gap are clearly visible.
pub fn negative_result_witness(seed: u64) -> WitnessGaps {
    let keep = 0.5;
    let (d_in, hidden, classes) = (6, 5, 3);
    let mut rng = TestRng::new(seed);

    for attempt in 0..100u64 {
        // Literal stack: mask on the input, relu, one linear readout.
        let mut literal = Network::build(
            Shape::new(&[d_in]).unwrap(),
            vec![
                LayerSpec::Dropout { keep_prob: keep },
                LayerSpec::Relu,
                LayerSpec::InnerProduct { out_units: classes },
            ],
        )
        .unwrap();
        // Post-linear stack and its relu-free control share parameters.
        let mut post = Network::build(
            Shape::new(&[d_in]).unwrap(),
            vec![
                LayerSpec::Dropout { keep_prob: keep },
                LayerSpec::InnerProduct { out_units: hidden },
                LayerSpec::Relu,
                LayerSpec::InnerProduct { out_units: classes },
            ],
        )
        .unwrap();
        let mut control = Network::build(
            Shape::new(&[d_in]).unwrap(),
            vec![
                LayerSpec::Dropout { keep_prob: keep },
                LayerSpec::InnerProduct { out_units: hidden },
                LayerSpec::InnerProduct { out_units: classes },
            ],
        )
        .unwrap();
        let net_seed = seed.wrapping_add(attempt).wrapping_mul(2654435761);
        literal.init_params(net_seed);
        post.init_params(net_seed);
        control
            .set_params(1, post.params(1).unwrap().clone())
            .unwrap();
        control
            .set_params(2, post.params(3).unwrap().clone())
            .unwrap();

        // Large inputs push the masked sums around the relu kink and keep
        // the softmax well away from its linear regime.
        let x_data = rng.fill(d_in, -4.0, 4.0);
        let x = Tensor::from_vec(&[d_in], x_data.clone()).unwrap();

        // The enumeration must describe the library's sampling: spot-check
        // a few sampled passes against the reference under the replicated
        // mask pattern.
        for pass in 0..4u64 {
            let mask = library_mask(net_seed, 0, Purpose::EvalMask, pass, d_in, keep);
            let expect = reference_forward(&literal, &x_data, Some(std::slice::from_ref(&mask)));
            let got = stochastic_logits(&literal, &x, net_seed, pass);
            assert!(linf(&expect, &got) < 1e-12, "sampled pass disagrees with reference");
            let expect = reference_forward(&post, &x_data, Some(&[mask]));
            let got = stochastic_logits(&post, &x, net_seed, pass);
            assert!(linf(&expect, &got) < 1e-12, "sampled pass disagrees with reference");
        }

        // Exact expectations over all 2^d masks.
        let patterns = enumerate_patterns(d_in, keep);
        let expected = |net: &Network, after_softmax: bool| {
            let mut acc = vec![0.0; classes];
            for (mask, prob) in &patterns {
                let logits = reference_forward(net, &x_data, Some(std::slice::from_ref(mask)));
                let vals = if after_softmax { softmax(&logits) } else { logits };
                for (a, v) in acc.iter_mut().zip(vals) {
                    *a += prob * v;
                }
            }
            acc
        };
        let literal_expected_probs = expected(&literal, true);
        let literal_expected_logits = expected(&literal, false);
        let post_expected_logits = expected(&post, false);
        let control_expected_logits = expected(&control, false);

        // Library standard passes, checked against the scaled reference.
        let std_literal = {
            let (logits, _) = literal.forward(&x, &ForwardMode::StandardTest).unwrap();
            assert!(linf(logits.data(), &reference_forward(&literal, &x_data, None)) < 1e-12);
            logits.data().to_vec()
        };
        let std_post = {
            let (logits, _) = post.forward(&x, &ForwardMode::StandardTest).unwrap();
            logits.data().to_vec()
        };
        let std_control = {
            let (logits, _) = control.forward(&x, &ForwardMode::StandardTest).unwrap();
            logits.data().to_vec()
        };

        let gaps = WitnessGaps {
            literal_probs_gap: linf(&softmax(&std_literal), &literal_expected_probs),
            literal_logits_gap: linf(&std_literal, &literal_expected_logits),
            post_linear_logits_gap: linf(&std_post, &post_expected_logits),
            linear_control_logits_gap: linf(&std_control, &control_expected_logits),
        };
        if gaps.literal_probs_gap > 1e-3 && gaps.post_linear_logits_gap > 1e-3 {
            return gaps;
        }
    }
    panic!("no witness instance found in 100 attempts");
}

// ---------------------------------------------------------------------------
// Tiny idx-format datasets for exercising the CLI without real MNIST.

fn write_idx_images(path: &Path, images: &[Vec<u8>]) {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&28u32.to_be_bytes());
    bytes.extend_from_slice(&28u32.to_be_bytes());
    for image in images {
        assert_eq!(image.len(), 28 * 28);
        bytes.extend_from_slice(image);
    }
    let mut f = std::fs::File::create(path).unwrap();
    f.write_all(&bytes).unwrap();
}

fn write_idx_labels(path: &Path, labels: &[u8]) {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    let mut f = std::fs::File::create(path).unwrap();
    f.write_all(&bytes).unwrap();
}

/// Writes a small synthetic dataset in the four standard MNIST file names
/// under `dir`: class `k` images are dark except a bright band at rows
/// `2k..2k+2`, so even brief training can separate them.
pub fn write_synthetic_mnist(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = TestRng::new(seed);
    let mut make = |n: usize| {
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 10) as u8;
            let mut image = vec![0u8; 28 * 28];
            for (j, px) in image.iter_mut().enumerate() {
                let row = j / 28;
                let base = if row / 2 == label as usize { 200.0 } else { 20.0 };
                *px = (base + rng.uniform(0.0, 40.0)) as u8;
            }
            images.push(image);
            labels.push(label);
        }
        (images, labels)
    };
    let (train_images, train_labels) = make(n_train);
    write_idx_images(&dir.join("train-images-idx3-ubyte"), &train_images);
    write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &train_labels);
    let (test_images, test_labels) = make(n_test);
    write_idx_images(&dir.join("t10k-images-idx3-ubyte"), &test_images);
    write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &test_labels);
}

// ---------------------------------------------------------------------------
// Running the compiled binary and reading its CSV output.

/// Command for the compiled `bcnn` binary.
pub fn bcnn_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bcnn"))
}

/// Parses a CSV file produced by the harness: asserts the frozen header
/// and returns the data rows split into fields.
pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("run_id,model,mode,T,iter,train_loss,test_error,seed,wall_ms"),
        "unexpected CSV header in {}",
        path.display()
    );
    lines
        .map(|line| line.split(',').map(str::to_string).collect::<Vec<_>>())
        .inspect(|fields| assert_eq!(fields.len(), 9, "malformed row in {}", path.display()))
        .collect()
}

/// Column indices of the frozen CSV schema.
pub const COL_RUN_ID: usize = 0;
pub const COL_MODEL: usize = 1;
pub const COL_MODE: usize = 2;
pub const COL_T: usize = 3;
pub const COL_ITER: usize = 4;
pub const COL_TRAIN_LOSS: usize = 5;
pub const COL_TEST_ERROR: usize = 6;
pub const COL_SEED: usize = 7;
pub const COL_WALL_MS: usize = 8;

/// Where dataset-scale suites cache their expensive artifacts (checkpoints
/// and experiment CSVs) between runs: `BCNN_ACCEPT_CACHE` if set, else
/// `target/acceptance_runs` in the workspace.  Reruns reuse anything found
/// here; deleting the directory forces full recomputation.
pub fn artifact_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("BCNN_ACCEPT_CACHE") {
        return PathBuf::from(dir);
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance_runs")
}

/// The MNIST directory used by dataset-scale suites: `BCNN_DATA_DIR` if
/// set, else the conventional local paths.
pub fn mnist_dir() -> Option<PathBuf> {
    if let Ok(dir) = std::env::var("BCNN_DATA_DIR") {
        let dir = PathBuf::from(dir);
        if dir.join("train-images-idx3-ubyte").is_file() {
            return Some(dir);
        }
    }
    for candidate in ["/root/data/mnist", "data/mnist"] {
        let dir = PathBuf::from(candidate);
        if dir.join("train-images-idx3-ubyte").is_file() {
            return Some(dir);
        }
    }
    None
}

/// Builds a `LayerParams` pair from raw vectors.
pub fn layer_params(w_dims: &[usize], w: Vec<f64>, b_dims: &[usize], b: Vec<f64>) -> LayerParams {
    LayerParams {
        weight: Tensor::from_vec(w_dims, w).unwrap(),
        bias: Tensor::from_vec(b_dims, b).unwrap(),
    }
}
