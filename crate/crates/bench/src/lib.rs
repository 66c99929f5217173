//! Workloads shared by the in-process criterion benchmarks.
//!
//! The out-of-process harness with spawn and run phases lives in the CLI
//! (`hookscope bench`); these benches time the same tasks inside one
//! process for quick regression checks.

use hookscope::attribution::{
    integrated_gradients_multi, lrp, AttributionConfig, LrpRules, MultiTarget, RuleKind, Target, DEFAULT_EPSILON,
};
use hookscope::latent::cache_activations;
use hookscope::zoo::{self, Activation};
use hookscope::{HookedModel, Result, Slot, Tensor, TensorMap};

/// A ReLU MLP of `depth` hidden layers of `width` units, `targets` outputs,
/// and a uniform input batch.
pub struct Workload {
    pub model: HookedModel,
    pub inputs: TensorMap,
    pub sites: Vec<String>,
    pub width: usize,
    pub targets: usize,
}

impl Workload {
    pub fn new(width: usize, depth: usize, batch: usize, targets: usize, seed: u64) -> Result<Self> {
        let mut widths = vec![width; depth + 1];
        widths.push(targets);
        let graph = zoo::mlp(&widths, Activation::Relu, true, seed)?;
        let sites = graph.execution_order().iter().map(|&i| graph.modules()[i].name().to_string()).collect();
        Ok(Workload {
            model: HookedModel::new(graph),
            inputs: zoo::uniform_batch("x", batch, &[width], 1.0, seed + 1)?,
            sites,
            width,
            targets,
        })
    }

    pub fn batch(&self) -> usize {
        self.inputs.batch_shape()[0]
    }

    /// Integrated gradients for every output under `strategy`.
    pub fn ig(&mut self, steps: usize, strategy: MultiTarget) -> Result<f64> {
        let targets: Vec<Target> = (0..self.targets).map(|k| Target::index("y", k)).collect();
        let cfg = AttributionConfig::new(targets[0].clone()).with_steps(steps);
        let r = integrated_gradients_multi(&mut self.model, &self.inputs, &cfg, &targets, strategy)?;
        Ok(r.iter().map(|a| a.attributions.get_tensor("x").map(Tensor::sum).unwrap_or(0.0)).sum())
    }

    pub fn lrp(&mut self) -> Result<f64> {
        let cfg = AttributionConfig::new(Target::index("y", 0));
        let rules = LrpRules::uniform(RuleKind::Epsilon(DEFAULT_EPSILON));
        Ok(lrp(&mut self.model, &self.inputs, &cfg, &rules, None)?.attributions.get_tensor("x")?.sum())
    }

    pub fn cache(&mut self) -> Result<usize> {
        let sites: Vec<&str> = self.sites.iter().map(String::as_str).collect();
        Ok(cache_activations(&mut self.model, std::slice::from_ref(&self.inputs), &sites, 1)?.samples())
    }

    /// Zeroes the middle module's output and runs the rest of the model.
    pub fn intervene(&mut self) -> Result<TensorMap> {
        let site = self.sites[self.sites.len() / 2].clone();
        let width = self.model.graph().row_width(&site).unwrap_or(self.width);
        let rows = self.batch();
        let mut ctx = self.model.context()?;
        ctx.set(&site, Slot::Output, Tensor::zeros(vec![rows, width]))?;
        Ok(ctx.run(&self.inputs)?.outputs)
    }
}
