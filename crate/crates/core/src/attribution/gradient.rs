//! Gradient, path-integral and guided-gradient methods.

use crate::error::{Error, Result};
use crate::graph::{BackwardRule, Module, ModuleKind};
use crate::hooking::{HookedModel, Slot};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

use super::{model_inputs, AttributionConfig, AttributionResult, Target};

/// How [`integrated_gradients_multi`] spreads work across targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiTarget {
    /// One forward pass over the path, one reverse sweep carrying every
    /// target's seed side by side.
    Vectorized,
    /// A full forward and backward per target.
    PerTarget,
}

fn scaled(grads: TensorMap, inputs: &TensorMap, times_inputs: bool) -> Result<TensorMap> {
    let n = inputs.batch_shape().to_vec();
    let g = if times_inputs { grads.zip_apply(inputs, |g, x| g.mul(x))? } else { grads };
    g.rebatch(n)
}

/// Gradient of the target with respect to each model input, optionally
/// multiplied by the input.
pub fn saliency(model: &mut HookedModel, inputs: &TensorMap, cfg: &AttributionConfig) -> Result<AttributionResult> {
    let x = model_inputs(model.graph(), inputs)?;
    let target = cfg.target.clone();
    let mut ctx = model.context()?;
    ctx.backward(move |v| Ok(vec![target.seed_set(v)?]));
    let mut out = ctx.run(&x)?;
    let g = out.grads.remove(0);
    Ok(AttributionResult {
        attributions: scaled(g, &x, cfg.multiply_by_inputs)?,
        method: "saliency".into(),
        config_digest: cfg.digest("saliency"),
    })
}

/// Rows `k * n + b` hold `base_b + alphas[k] * (x_b - base_b)`.
fn path_points(x: &TensorMap, base: &TensorMap, alphas: &[f64]) -> Result<TensorMap> {
    let n = x.batch_shape()[0];
    let mut out = TensorMap::with_batch(vec![n * alphas.len()]);
    for (key, xt) in x.flatten_keys() {
        let bt = base.get_tensor(key.as_str())?;
        let mut data = Vec::with_capacity(xt.numel() * alphas.len());
        for &a in alphas {
            data.extend(xt.data().iter().zip(bt.data()).map(|(xv, bv)| bv + a * (xv - bv)));
        }
        let mut shape = xt.shape().to_vec();
        shape[0] *= alphas.len();
        out.put(key.as_str(), Tensor::new(shape, data)?)?;
    }
    Ok(out)
}

/// Sums blocks of `n` rows weighted by `weights[k]`.
fn fold_rows(t: &Tensor, n: usize, weights: &[f64]) -> Result<Tensor> {
    let per = t.numel() / t.rows().max(1);
    let mut acc = vec![0.0; n * per];
    for (k, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let block = &t.data()[k * n * per..(k + 1) * n * per];
        for (a, v) in acc.iter_mut().zip(block) {
            *a += w * v;
        }
    }
    let mut shape = t.shape().to_vec();
    shape[0] = n;
    Tensor::new(shape, acc)
}

fn ig_core(
    model: &mut HookedModel,
    x: &TensorMap,
    base: &TensorMap,
    targets: &[Target],
    steps: usize,
) -> Result<Vec<TensorMap>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs at least one step".into()));
    }
    let n = x.batch_shape()[0];
    let alphas: Vec<f64> = (0..steps).map(|k| (k as f64 + 0.5) / steps as f64).collect();
    let points = path_points(x, base, &alphas)?;
    let targets = targets.to_vec();
    let mut ctx = model.context()?;
    ctx.backward(move |v| targets.iter().map(|t| t.seed_set(v)).collect());
    let out = ctx.run(&points)?;
    let w = vec![1.0 / steps as f64; steps];
    let delta = x.zip_apply(base, |a, b| a.sub(b))?;
    out.grads
        .into_iter()
        .map(|g| {
            let mean = g.try_apply(|t| fold_rows(t, n, &w))?.rebatch(vec![n])?;
            mean.zip_apply(&delta, |g, d| g.mul(d))
        })
        .collect()
}

/// Integrated gradients along the straight path from the baseline, using
/// the midpoint rule with `cfg.steps` points.
pub fn integrated_gradients(
    model: &mut HookedModel,
    inputs: &TensorMap,
    cfg: &AttributionConfig,
) -> Result<AttributionResult> {
    let mut v =
        integrated_gradients_multi(model, inputs, cfg, std::slice::from_ref(&cfg.target), MultiTarget::Vectorized)?;
    Ok(v.remove(0))
}

/// Integrated gradients for several targets over the same inputs and path.
/// `cfg.target` is ignored in favour of `targets`.
pub fn integrated_gradients_multi(
    model: &mut HookedModel,
    inputs: &TensorMap,
    cfg: &AttributionConfig,
    targets: &[Target],
    strategy: MultiTarget,
) -> Result<Vec<AttributionResult>> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no targets given".into()));
    }
    let x = model_inputs(model.graph(), inputs)?;
    let base = cfg.baseline_for(model.graph(), &x)?;
    let maps = match strategy {
        MultiTarget::Vectorized => ig_core(model, &x, &base, targets, cfg.steps)?,
        MultiTarget::PerTarget => {
            let mut v = Vec::with_capacity(targets.len());
            for t in targets {
                v.extend(ig_core(model, &x, &base, std::slice::from_ref(t), cfg.steps)?);
            }
            v
        }
    };
    Ok(maps
        .into_iter()
        .zip(targets)
        .map(|(m, t)| {
            let c = AttributionConfig { target: t.clone(), ..cfg.clone() };
            AttributionResult {
                attributions: m,
                method: "integrated_gradients".into(),
                config_digest: c.digest("integrated_gradients"),
            }
        })
        .collect())
}

/// Conductance of every unit at `site`: the gradient at each interval
/// midpoint of the input path times the change in the unit's activation
/// over that interval, summed along the path. The result is keyed by the
/// site name.
pub fn layer_conductance(
    model: &mut HookedModel,
    inputs: &TensorMap,
    cfg: &AttributionConfig,
    site: &str,
) -> Result<AttributionResult> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("conductance needs at least one step".into()));
    }
    let x = model_inputs(model.graph(), inputs)?;
    let base = cfg.baseline_for(model.graph(), &x)?;
    let n = x.batch_shape()[0];
    let s = cfg.steps;
    let alphas: Vec<f64> = (0..=2 * s).map(|j| j as f64 / (2 * s) as f64).collect();
    let points = path_points(&x, &base, &alphas)?;
    let target = cfg.target.clone();
    let mut ctx = model.context()?;
    ctx.backward(move |v| Ok(vec![target.seed_set(v)?]));
    let h = ctx.get(site, Slot::Output)?;
    let g = ctx.get(site, Slot::GradOutput)?;
    ctx.run(&points)?;
    let (h, g) = (h.into_value()?, g.into_value()?);
    let per = h.numel() / h.rows();
    let mut acc = vec![0.0; n * per];
    for k in 1..=s {
        let gm = &g.data()[(2 * k - 1) * n * per..2 * k * n * per];
        let hi = &h.data()[2 * k * n * per..(2 * k + 1) * n * per];
        let lo = &h.data()[(2 * k - 2) * n * per..(2 * k - 1) * n * per];
        for i in 0..n * per {
            acc[i] += gm[i] * (hi[i] - lo[i]);
        }
    }
    let mut shape = h.shape().to_vec();
    shape[0] = n;
    let attributions = TensorMap::with_batch(vec![n]).with(site, Tensor::new(shape, acc)?)?;
    Ok(AttributionResult {
        attributions,
        method: "layer_conductance".into(),
        config_digest: cfg.digest(&format!("layer_conductance:{site}")),
    })
}

/// ReLU backward that passes only positive gradient through positive
/// activations.
#[derive(Debug, Clone, Copy, Default)]
pub struct GuidedRelu;

impl BackwardRule for GuidedRelu {
    fn propagate(
        &mut self,
        module: &Module,
        inputs: &[Tensor],
        _output: &Tensor,
        grad: &Tensor,
    ) -> Result<Option<Vec<Tensor>>> {
        if !matches!(module.kind(), ModuleKind::Relu) {
            return Ok(None);
        }
        let x = &inputs[0];
        let per = x.numel();
        let xd = x.data();
        let data =
            grad.data().iter().enumerate().map(|(i, &g)| if xd[i % per] > 0.0 && g > 0.0 { g } else { 0.0 }).collect();
        Ok(Some(vec![Tensor::new(grad.shape().to_vec(), data)?]))
    }
}

/// Guided backpropagation to the model inputs.
pub fn guided_backprop(
    model: &mut HookedModel,
    inputs: &TensorMap,
    cfg: &AttributionConfig,
) -> Result<AttributionResult> {
    let x = model_inputs(model.graph(), inputs)?;
    let target = cfg.target.clone();
    let mut ctx = model.context()?;
    ctx.backward(move |v| Ok(vec![target.seed_set(v)?]));
    ctx.rule(GuidedRelu);
    let mut out = ctx.run(&x)?;
    let g = out.grads.remove(0);
    Ok(AttributionResult {
        attributions: scaled(g, &x, cfg.multiply_by_inputs)?,
        method: "guided_backprop".into(),
        config_digest: cfg.digest("guided_backprop"),
    })
}
