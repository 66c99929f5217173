use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, SeedPoint};
use crate::hooking::{HookedModel, Slot};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

use super::model_inputs;

/// One unit of a module's (or a model output's) value, indexed within a
/// flattened row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitRef {
    pub site: String,
    pub index: usize,
}

impl UnitRef {
    pub fn new(site: &str, index: usize) -> Self {
        UnitRef { site: site.to_string(), index }
    }
}

fn resolve_site(graph: &ModelGraph, name: &str) -> Result<String> {
    if graph.has_site(name) {
        return Ok(name.to_string());
    }
    graph
        .outputs()
        .iter()
        .find(|o| o.key == name)
        .map(|o| o.module.clone())
        .ok_or_else(|| Error::UnknownSite(name.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaximiseConfig {
    pub lr: f64,
    pub iters: usize,
    /// Weight of the `||x||^2` penalty.
    pub l2: f64,
    /// Seeds the random start when `init` is absent.
    pub seed: u64,
    /// Half-width of the uniform random start.
    pub init_scale: f64,
    pub init: Option<TensorMap>,
}

impl Default for MaximiseConfig {
    fn default() -> Self {
        MaximiseConfig { lr: 0.1, iters: 100, l2: 1e-2, seed: 0, init_scale: 0.1, init: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaximiseResult {
    pub preimage: TensorMap,
    /// Objective before the first step and after every step.
    pub objective: Vec<f64>,
    /// Unit activation (summed over the batch) at the same points.
    pub activation: Vec<f64>,
}

/// Gradient ascent on `unit - l2 * ||x||^2` over the model inputs.
///
/// `template` fixes the input keys and shapes; its values are only used
/// when `cfg.init` is `None` and serve as the shape for a random start.
/// Execution stops at the unit's module, so later modules never run.
pub fn activation_maximisation(
    model: &mut HookedModel,
    template: &TensorMap,
    unit: &UnitRef,
    cfg: &MaximiseConfig,
) -> Result<MaximiseResult> {
    if !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let site = resolve_site(model.graph(), &unit.site)?;
    let shapes = model_inputs(model.graph(), template)?;
    let mut x = match &cfg.init {
        Some(m) => {
            let m = model_inputs(model.graph(), m)?;
            m.zip_apply(&shapes, |a, b| {
                if a.shape() != b.shape() {
                    return Err(Error::Structure("init does not match template shapes".into()));
                }
                Ok(a.clone())
            })?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let dist = Uniform::new_inclusive(-cfg.init_scale, cfg.init_scale);
            let mut m = TensorMap::with_batch(shapes.batch_shape().to_vec());
            for (k, t) in shapes.flatten_keys() {
                let data = (0..t.numel()).map(|_| dist.sample(&mut rng)).collect();
                m.put(k.as_str(), Tensor::new(t.shape().to_vec(), data)?)?;
            }
            m
        }
    };
    let batch = x.batch_shape().to_vec();
    let mut objective = Vec::with_capacity(cfg.iters + 1);
    let mut activation = Vec::with_capacity(cfg.iters + 1);
    for t in 0..=cfg.iters {
        let site_name = site.clone();
        let index = unit.index;
        let mut ctx = model.context()?;
        ctx.stop_at(&site)?;
        ctx.backward(move |v| {
            let site = site_name;
            let h = v.site_output(&site).ok_or_else(|| Error::Seed(format!("{site:?} was not computed")))?;
            let per = h.row_len();
            if index >= per {
                return Err(Error::InvalidArgument(format!(
                    "unit {index} out of range for {site:?} with {per} units per row"
                )));
            }
            let mut s = vec![0.0; h.numel()];
            for r in 0..h.rows() {
                s[r * per + index] = 1.0;
            }
            Ok(vec![vec![(SeedPoint::Site(site.clone()), Tensor::new(h.shape().to_vec(), s)?)]])
        });
        let h = ctx.get(&site, Slot::Output)?;
        let mut out = ctx.run(&x)?;
        let h = h.into_value()?;
        let per = h.row_len();
        let act: f64 = (0..h.rows()).map(|r| h.data()[r * per + unit.index]).sum();
        let sq: f64 = x.flatten_keys().values().map(|t| t.dot(t).unwrap_or(0.0)).sum();
        activation.push(act);
        objective.push(act - cfg.l2 * sq);
        if t == cfg.iters {
            break;
        }
        let g = out.grads.remove(0);
        let (lr, l2) = (cfg.lr, cfg.l2);
        x = x.zip_apply(&g, |xv, gv| xv.zip_map(gv, |a, d| a + lr * (d - 2.0 * l2 * a)))?.rebatch(batch.clone())?;
    }
    Ok(MaximiseResult { preimage: x, objective, activation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, ModuleKind};

    #[test]
    fn linear_unit_converges_to_closed_form() {
        // maximise w.x - l2 |x|^2  ->  x* = w / (2 l2)
        let params = TensorMap::new().with("fc.weight", Tensor::matrix(&[&[1.0, -2.0], &[0.5, 0.5]]).unwrap()).unwrap();
        let g = GraphBuilder::new()
            .input("x")
            .module("fc", ModuleKind::linear(2, 2, false))
            .module("out", ModuleKind::Sigmoid)
            .output("y", "out")
            .build_with_params(&params)
            .unwrap();
        let mut m = HookedModel::new(g);
        let tpl = TensorMap::with_batch(vec![1]).with("x", Tensor::zeros(vec![1, 2])).unwrap();
        let cfg = MaximiseConfig { lr: 0.1, iters: 200, l2: 0.5, ..Default::default() };
        let r = activation_maximisation(&mut m, &tpl, &UnitRef::new("fc", 0), &cfg).unwrap();
        let x = r.preimage.get_tensor("x").unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-8);
        assert!((x.data()[1] + 2.0).abs() < 1e-8);
        assert_eq!(r.objective.len(), 201);
        assert!(r.objective.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }
}
