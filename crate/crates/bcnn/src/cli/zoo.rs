//! The LeNet model zoo: one architecture, three dropout placements.
//!
//! All variants share the LeNet trunk on 28×28×1 inputs — conv 5×5×20,
//! pool 2, conv 5×5×50, pool 2, ip 500, relu, ip 10 — and differ only in
//! where multiplicative Bernoulli masks (keep 0.5) sit:
//!
//! * `lenet-none`: no dropout anywhere;
//! * `lenet-ip`: dropout after the fully connected relu only;
//! * `lenet-all`: additionally after every convolution, before its pool.
//!
//! `lenet-all-wide` is the wider variant (conv 192/192, ip 1000) with the
//! all-layers placement, sized like the configuration used on harder image
//! sets.

use crate::nn::{LayerSpec, Network};
use crate::tensor::Shape;
use clap::ValueEnum;

const KEEP: f64 = 0.5;

/// Which zoo model to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    /// LeNet without dropout.
    #[value(name = "lenet-none")]
    LenetNone,
    /// Dropout after the fully connected relu.
    #[value(name = "lenet-ip")]
    LenetIp,
    /// Dropout after every convolution and the fully connected relu.
    #[value(name = "lenet-all")]
    LenetAll,
    /// All-layers dropout at conv 192/192, ip 1000 widths.
    #[value(name = "lenet-all-wide")]
    LenetAllWide,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LenetNone => "lenet-none",
            ModelKind::LenetIp => "lenet-ip",
            ModelKind::LenetAll => "lenet-all",
            ModelKind::LenetAllWide => "lenet-all-wide",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <ModelKind as ValueEnum>::from_str(s, true)
    }
}

fn specs_for(kind: ModelKind) -> Vec<LayerSpec> {
    let (c1, c2, ip) = match kind {
        ModelKind::LenetAllWide => (192, 192, 1000),
        _ => (20, 50, 500),
    };
    let conv_dropout = matches!(kind, ModelKind::LenetAll | ModelKind::LenetAllWide);
    let ip_dropout = !matches!(kind, ModelKind::LenetNone);

    let mut specs = Vec::new();
    specs.push(LayerSpec::Conv { kh: 5, kw: 5, out_channels: c1, stride: 1, pad: 0 });
    if conv_dropout {
        specs.push(LayerSpec::Dropout { keep_prob: KEEP });
    }
    specs.push(LayerSpec::MaxPool { window: 2, stride: 2 });
    specs.push(LayerSpec::Conv { kh: 5, kw: 5, out_channels: c2, stride: 1, pad: 0 });
    if conv_dropout {
        specs.push(LayerSpec::Dropout { keep_prob: KEEP });
    }
    specs.push(LayerSpec::MaxPool { window: 2, stride: 2 });
    specs.push(LayerSpec::InnerProduct { out_units: ip });
    specs.push(LayerSpec::Relu);
    if ip_dropout {
        specs.push(LayerSpec::Dropout { keep_prob: KEEP });
    }
    specs.push(LayerSpec::InnerProduct { out_units: 10 });
    specs
}

/// Builds a zoo model with zeroed parameters.
pub fn build_model(kind: ModelKind) -> Network {
    Network::build(Shape::new(&[28, 28, 1]).expect("static shape"), specs_for(kind))
        .expect("zoo architectures are valid by construction")
}

/// Recognises a network as a zoo model by its architecture.
pub fn identify(net: &Network) -> Option<ModelKind> {
    let specs = net.specs();
    [
        ModelKind::LenetNone,
        ModelKind::LenetIp,
        ModelKind::LenetAll,
        ModelKind::LenetAllWide,
    ]
    .into_iter()
    .find(|&k| specs_for(k) == specs && net.input_shape().dims() == [28, 28, 1])
}
