//! Ready-to-use attribution methods.
//!
//! Every method takes a [`HookedModel`](crate::HookedModel), prepares one or
//! more run contexts on it (capture hooks, seeds, backward rules) and hands
//! back an [`AttributionResult`] keyed like the model inputs, or like the
//! attributed layer for layer methods.

mod cam;
mod flipping;
mod gradient;
mod lrp;
mod maximise;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::graph::{ForwardView, ModelGraph, SeedPoint, SeedSet};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

pub use cam::grad_cam;
pub use flipping::{pixel_flipping, Fill, FlipCurve};
pub use gradient::{
    guided_backprop, integrated_gradients, integrated_gradients_multi, layer_conductance, saliency, GuidedRelu,
    MultiTarget,
};
pub(crate) use lrp::initial_relevance;
pub use lrp::{
    lrp, lrp_with, ConceptCondition, ConceptSelector, LayerRelevance, LrpOptions, LrpOutput, LrpRule, LrpRules,
    RelevanceInit, RuleKind, DEFAULT_EPSILON, DEFAULT_GAMMA,
};
pub use maximise::{activation_maximisation, MaximiseConfig, MaximiseResult, UnitRef};

/// How a target output is scalarised per batch row.
#[derive(Debug, Clone, PartialEq)]
pub enum Selector {
    /// One coordinate of each row of the output.
    Index(usize),
    /// A per-row weighting vector, one value per output coordinate.
    Seed(Tensor),
}

/// A model output and the per-row quantity to attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub output: String,
    pub selector: Selector,
}

impl Target {
    pub fn index(output: &str, index: usize) -> Self {
        Target { output: output.to_string(), selector: Selector::Index(index) }
    }

    pub fn seed(output: &str, weights: Tensor) -> Self {
        Target { output: output.to_string(), selector: Selector::Seed(weights) }
    }

    /// Per-row weights over the output's row, as a dense vector.
    pub fn row_weights(&self, row_len: usize) -> Result<Vec<f64>> {
        match &self.selector {
            Selector::Index(i) => {
                if *i >= row_len {
                    return Err(Error::InvalidArgument(format!(
                        "target index {i} out of range for output {:?} with {row_len} values per row",
                        self.output
                    )));
                }
                let mut w = vec![0.0; row_len];
                w[*i] = 1.0;
                Ok(w)
            }
            Selector::Seed(t) => {
                if t.numel() != row_len {
                    return Err(Error::Seed(format!(
                        "seed for {:?} has {} values, rows have {row_len}",
                        self.output,
                        t.numel()
                    )));
                }
                Ok(t.data().to_vec())
            }
        }
    }

    /// Seed tensor shaped like `output`, repeating the row weights.
    pub fn seed_tensor(&self, output: &Tensor) -> Result<Tensor> {
        let w = self.row_weights(output.row_len())?;
        let mut data = Vec::with_capacity(output.numel());
        for _ in 0..output.rows() {
            data.extend_from_slice(&w);
        }
        Tensor::new(output.shape().to_vec(), data)
    }

    pub(crate) fn seed_set(&self, view: &dyn ForwardView) -> Result<SeedSet> {
        let y = view
            .output(&self.output)
            .ok_or_else(|| Error::Seed(format!("output {:?} was not computed", self.output)))?;
        Ok(vec![(SeedPoint::Output(self.output.clone()), self.seed_tensor(y)?)])
    }

    /// The selected scalar for every row of `outputs`.
    pub fn values(&self, outputs: &TensorMap) -> Result<Vec<f64>> {
        let y = outputs.get_tensor(self.output.as_str())?;
        let w = self.row_weights(y.row_len())?;
        Ok((0..y.rows()).map(|r| y.row(r).iter().zip(&w).map(|(a, b)| a * b).sum()).collect())
    }

    fn digest_into(&self, h: &mut DefaultHasher) {
        self.output.hash(h);
        match &self.selector {
            Selector::Index(i) => i.hash(h),
            Selector::Seed(t) => t.data().iter().for_each(|v| v.to_bits().hash(h)),
        }
    }
}

/// Settings shared by the gradient-based methods.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionConfig {
    pub target: Target,
    /// Reference input for path methods; zeros when absent.
    pub baseline: Option<TensorMap>,
    /// Riemann steps for path methods.
    pub steps: usize,
    pub multiply_by_inputs: bool,
}

impl AttributionConfig {
    pub fn new(target: Target) -> Self {
        AttributionConfig { target, baseline: None, steps: 32, multiply_by_inputs: false }
    }

    pub fn with_baseline(mut self, baseline: TensorMap) -> Self {
        self.baseline = Some(baseline);
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn times_inputs(mut self, on: bool) -> Self {
        self.multiply_by_inputs = on;
        self
    }

    pub fn digest(&self, method: &str) -> String {
        let mut h = DefaultHasher::new();
        method.hash(&mut h);
        self.target.digest_into(&mut h);
        self.steps.hash(&mut h);
        self.multiply_by_inputs.hash(&mut h);
        if let Some(b) = &self.baseline {
            for (k, t) in b.flatten_keys() {
                k.hash(&mut h);
                t.data().iter().for_each(|v| v.to_bits().hash(&mut h));
            }
        }
        format!("{:016x}", h.finish())
    }

    pub(crate) fn baseline_for(&self, model: &ModelGraph, inputs: &TensorMap) -> Result<TensorMap> {
        let mut out = TensorMap::with_batch(inputs.batch_shape().to_vec());
        for key in model.input_keys() {
            let x = inputs.get_tensor(key.as_str())?;
            let b = match &self.baseline {
                None => Tensor::zeros(x.shape().to_vec()),
                Some(m) => {
                    let b = m
                        .get_tensor(key.as_str())
                        .map_err(|_| Error::Structure(format!("baseline has no entry for input {key:?}")))?;
                    if b.shape() != x.shape() {
                        return Err(Error::Structure(format!(
                            "baseline {key:?} has shape {:?}, input has {:?}",
                            b.shape(),
                            x.shape()
                        )));
                    }
                    b.clone()
                }
            };
            out.put(key.as_str(), b)?;
        }
        Ok(out)
    }
}

/// Attributions plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    pub attributions: TensorMap,
    pub method: String,
    pub config_digest: String,
}

/// Model inputs restricted to the graph's input keys.
pub(crate) fn model_inputs(model: &ModelGraph, inputs: &TensorMap) -> Result<TensorMap> {
    let mut batch = None;
    let mut out = TensorMap::new();
    for key in model.input_keys() {
        let t = inputs.get_tensor(key.as_str()).map_err(|_| Error::MissingInput(key.clone()))?;
        batch.get_or_insert(t.rows());
        out.put(key.as_str(), t.clone())?;
    }
    out.rebatch(vec![batch.unwrap_or(0)])
}
