//! Small seeded models and inputs shared by the CLI, benchmarks and tests.
//!
//! Weights are drawn uniformly from `±1/sqrt(fan_in)` so activations stay
//! near unit scale at every depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::graph::{GraphBuilder, ModelGraph, ModuleKind};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn kind(self) -> ModuleKind {
        match self {
            Activation::Relu => ModuleKind::Relu,
            Activation::Tanh => ModuleKind::Tanh,
            Activation::Sigmoid => ModuleKind::Sigmoid,
        }
    }
}

/// Draws every parameter of `builder` from `±1/sqrt(fan_in)`.
pub fn scaled_init(builder: GraphBuilder, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = TensorMap::new();
    let decls: Vec<(String, ModuleKind)> = builder.declarations().map(|(n, k)| (n.to_string(), k.clone())).collect();
    for (name, kind) in decls {
        let Some(ws) = kind.weight_shape() else { continue };
        let fan_in: usize = ws[1..].iter().product();
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = (0..ws.iter().product::<usize>()).map(|_| dist.sample(&mut rng)).collect();
        params.put(format!("{name}.weight").as_str(), Tensor::new(ws, w)?)?;
        if let Some(bs) = kind.bias_shape() {
            let b = (0..bs.iter().product::<usize>()).map(|_| dist.sample(&mut rng)).collect();
            params.put(format!("{name}.bias").as_str(), Tensor::new(bs, b)?)?;
        }
    }
    builder.build_with_params(&params)
}

/// `fc0, act0, fc1, act1, ..., fcL` over `widths`, reading input `x` and
/// writing output `y`. The last layer has no activation.
pub fn mlp_builder(widths: &[usize], act: Activation, bias: bool) -> GraphBuilder {
    let mut b = GraphBuilder::new().input("x");
    let layers = widths.len().saturating_sub(1);
    for i in 0..layers {
        b = b.module(&format!("fc{i}"), ModuleKind::linear(widths[i], widths[i + 1], bias));
        if i + 1 < layers {
            b = b.module(&format!("act{i}"), act.kind());
        }
    }
    b.output("y", &format!("fc{}", layers - 1))
}

pub fn mlp(widths: &[usize], act: Activation, bias: bool, seed: u64) -> Result<ModelGraph> {
    scaled_init(mlp_builder(widths, act, bias), seed)
}

/// A small CNN over `[N, channels, side, side]` images:
/// `conv0 → act0 → pool0 → conv1 → act1 → flat → fc` with `classes` logits.
/// `side` must be even.
pub fn cnn_builder(channels: usize, side: usize, classes: usize, bias: bool) -> GraphBuilder {
    let half = side / 2;
    GraphBuilder::new()
        .input("x")
        .module("conv0", ModuleKind::conv2d(channels, 4, 3, 1, 1, bias))
        .module("act0", ModuleKind::Relu)
        .module("pool0", ModuleKind::AvgPool2d { kernel: 2 })
        .module("conv1", ModuleKind::conv2d(4, 4, 3, 1, 1, bias))
        .module("act1", ModuleKind::Relu)
        .module("flat", ModuleKind::Flatten)
        .module("fc", ModuleKind::linear(4 * half * half, classes, bias))
        .output("y", "fc")
}

pub fn cnn(channels: usize, side: usize, classes: usize, bias: bool, seed: u64) -> Result<ModelGraph> {
    scaled_init(cnn_builder(channels, side, classes, bias), seed)
}

/// Shared trunk with a policy head and a value head, outputs `policy`
/// and `value`.
pub fn two_head(inputs: usize, hidden: usize, moves: usize, seed: u64) -> Result<ModelGraph> {
    let b = GraphBuilder::new()
        .input("x")
        .module("trunk", ModuleKind::linear(inputs, hidden, true))
        .module("trunk_act", ModuleKind::Tanh)
        .module_from("policy", ModuleKind::linear(hidden, moves, true), &["trunk_act"])
        .module_from("value_fc", ModuleKind::linear(hidden, 1, true), &["trunk_act"])
        .module("value_act", ModuleKind::Tanh)
        .output("policy", "policy")
        .output("value", "value_act");
    scaled_init(b, seed)
}

/// A batch of `rows` samples of shape `sample` with entries uniform in
/// `[-scale, scale]`, stored under `key`.
pub fn uniform_batch(key: &str, rows: usize, sample: &[usize], scale: f64, seed: u64) -> Result<TensorMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-scale, scale);
    let mut shape = vec![rows];
    shape.extend_from_slice(sample);
    let n: usize = shape.iter().product();
    let t = Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())?;
    TensorMap::with_batch(vec![rows]).with(key, t)
}
