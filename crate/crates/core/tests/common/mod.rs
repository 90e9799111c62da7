#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dfprune::bundle::EvalSet;
use dfprune::nn::{
    Activation, BnParams, ConvLayer, ConvWeights, InputShape, Layer, LayerNode, LinearLayer, LinearWeights, ModelGraph,
    DEFAULT_BN_EPS,
};
use dfprune::tensor::Tensor4;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/digits")
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn random_bn(rng: &mut impl Rng, n: usize) -> BnParams {
    let gamma = (0..n)
        .map(|_| {
            let g = rng.random_range(0.3f32..1.5);
            if rng.random_bool(0.2) {
                -g
            } else {
                g
            }
        })
        .collect();
    BnParams::new(
        gamma,
        (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
        (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
        (0..n).map(|_| rng.random_range(0.2f32..2.0)).collect(),
        DEFAULT_BN_EPS,
    )
    .unwrap()
}

pub fn conv(rng: &mut impl Rng, out: usize, inp: usize, k: usize, stride: usize, bn: bool) -> LayerNode {
    let weights = ConvWeights::new(out, inp, k, stride, k / 2, normal_vec(rng, out * inp * k * k)).unwrap();
    LayerNode::Conv(ConvLayer {
        weights,
        bn: bn.then(|| random_bn(rng, out)),
        activation: Activation::Relu,
    })
}

pub fn linear(rng: &mut impl Rng, out: usize, inp: usize, activation: Activation) -> LayerNode {
    LayerNode::Linear(LinearLayer {
        weights: LinearWeights::new(out, inp, normal_vec(rng, out * inp), Some(normal_vec(rng, out))).unwrap(),
        activation,
    })
}

/// A conv chain with either a pooled or a flattened two-layer head.
pub fn random_graph(rng: &mut impl Rng) -> ModelGraph {
    let input = InputShape {
        c: rng.random_range(1..=3),
        h: rng.random_range(4..=7),
        w: rng.random_range(4..=7),
    };
    let classes = rng.random_range(2..=5);
    let mut layers = Vec::new();
    let (mut c, mut h, mut w) = (input.c, input.h, input.w);
    for i in 0..rng.random_range(1..=3) {
        let out = rng.random_range(2..=8);
        let k = if rng.random_bool(0.7) { 3 } else { 1 };
        let stride = if h >= 6 && w >= 6 && rng.random_bool(0.3) { 2 } else { 1 };
        let bn = rng.random_bool(0.8);
        layers.push(Layer::new(format!("conv{i}"), conv(rng, out, c, k, stride, bn)));
        c = out;
        h = (h + 2 * (k / 2) - k) / stride + 1;
        w = (w + 2 * (k / 2) - k) / stride + 1;
    }
    if rng.random_bool(0.5) {
        layers.push(Layer::new("gap", LayerNode::GlobalAvgPool));
        layers.push(Layer::new("flatten", LayerNode::Flatten));
        layers.push(Layer::new("fc", linear(rng, classes, c, Activation::None)));
    } else {
        let hidden = rng.random_range(2..=6);
        layers.push(Layer::new("flatten", LayerNode::Flatten));
        layers.push(Layer::new("fc1", linear(rng, hidden, c * h * w, Activation::Relu)));
        layers.push(Layer::new("fc2", linear(rng, classes, hidden, Activation::None)));
    }
    ModelGraph::new(input, layers, classes).unwrap()
}

pub fn random_batch(rng: &mut impl Rng, n: usize, input: InputShape) -> Tensor4 {
    Tensor4::new(
        [n, input.c, input.h, input.w],
        normal_vec(rng, n * input.c * input.h * input.w),
    )
    .unwrap()
}

pub fn random_evalset(rng: &mut impl Rng, graph: &ModelGraph, n: usize) -> EvalSet {
    let images = random_batch(rng, n, graph.input());
    let labels = (0..n).map(|_| rng.random_range(0..graph.num_classes())).collect();
    EvalSet::new(images, labels, graph.num_classes()).unwrap()
}

/// Random strictly ascending non-empty subset of `0..n`.
pub fn random_kept(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let k = rng.random_range(1..=n);
    let mut kept = rand::seq::index::sample(rng, n, k).into_vec();
    kept.sort_unstable();
    kept
}
