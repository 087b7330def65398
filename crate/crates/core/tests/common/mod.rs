#![allow(dead_code)]

use projnet::model::{build_backbone, ArchSpec, LayerSpec, Model};
use projnet::nodes::GcnnNode;
use projnet::tensor::{Activation, ChannelStack, PadMode, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn tensor(rng: &mut impl Rng, shape: &Shape) -> Tensor {
    Tensor::new(shape.clone(), uniform(rng, shape.volume())).unwrap()
}

pub fn stack(rng: &mut impl Rng, d: usize, shape: &Shape) -> ChannelStack {
    ChannelStack::new((0..d).map(|_| tensor(rng, shape)).collect()).unwrap()
}

/// Channel shape of rank 0..=3 with extents 1..=5.
pub fn shape(rng: &mut impl Rng) -> Shape {
    let rank = rng.gen_range(0..=3);
    Shape::new((0..rank).map(|_| rng.gen_range(1..=5)).collect()).unwrap()
}

/// A kernel shape that fits inside `input` on every axis.
pub fn kernel_for(rng: &mut impl Rng, input: &Shape) -> Shape {
    Shape::new(input.dims().iter().map(|&n| rng.gen_range(1..=n.min(3))).collect()).unwrap()
}

pub fn mode(rng: &mut impl Rng) -> PadMode {
    if rng.gen() {
        PadMode::Same
    } else {
        PadMode::Valid
    }
}

pub fn hidden_activation(rng: &mut impl Rng) -> Activation {
    [Activation::Identity, Activation::Relu, Activation::Sigmoid][rng.gen_range(0..3)]
}

/// A GCNN node with random filters, bias, activation, and padding mode.
pub fn gcnn(rng: &mut impl Rng, d: usize, kernel: &Shape) -> GcnnNode {
    let filters = (0..d).map(|_| tensor(rng, kernel)).collect();
    let m = mode(rng);
    GcnnNode::new(filters, rng.gen_range(-1.0..1.0), hidden_activation(rng), m).unwrap()
}

/// A random conv backbone over 2-D inputs: one or two conv layers, an
/// optional GFFN layer, pooling, optional dropout, and a head.
pub fn random_arch(rng: &mut impl Rng) -> ArchSpec {
    let side = rng.gen_range(3..=6);
    let mut layers = Vec::new();
    for _ in 0..rng.gen_range(1..=2) {
        let k = rng.gen_range(1..=3);
        layers.push(LayerSpec::Conv {
            nodes: rng.gen_range(2..=4),
            kernel: vec![k, rng.gen_range(1..=3)],
            mode: PadMode::Same,
            activation: hidden_activation(rng),
        });
    }
    if rng.gen() {
        layers.push(LayerSpec::Gffn { nodes: rng.gen_range(2..=3), activation: hidden_activation(rng) });
    }
    layers.push(LayerSpec::GlobalAvgPool);
    if rng.gen() {
        layers.push(LayerSpec::Dropout { rate: 0.25 });
    }
    layers.push(LayerSpec::Head { classes: rng.gen_range(2..=4) });
    ArchSpec { input_channels: rng.gen_range(1..=3), input_shape: vec![side, side], layers, seed: rng.gen() }
}

pub fn random_model(rng: &mut impl Rng) -> Model {
    build_backbone(&random_arch(rng)).unwrap()
}

pub fn batch(rng: &mut impl Rng, model: &Model, n: usize) -> Vec<ChannelStack> {
    (0..n).map(|_| stack(rng, model.input_channels(), model.input_shape())).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config { cases, failure_persistence: None, ..Default::default() }
}
