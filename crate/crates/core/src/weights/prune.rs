use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ModuleKind};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// Individual parameter entries; relevance keyed by parameter path.
    Weight,
    /// Whole output units or channels; relevance keyed by module name with
    /// one value per unit.
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub granularity: Granularity,
    /// `{0, 1}` values keyed like the relevance that produced them.
    pub masks: TensorMap,
    /// Requested fraction.
    pub sparsity: f64,
}

impl PruneMask {
    pub fn size(&self) -> usize {
        self.masks.flatten_keys().values().map(Tensor::numel).sum()
    }

    pub fn zeros(&self) -> usize {
        self.masks.flatten_keys().values().map(|t| t.data().iter().filter(|v| **v == 0.0).count()).sum()
    }

    pub fn realised_sparsity(&self) -> f64 {
        self.zeros() as f64 / self.size().max(1) as f64
    }
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("sparsity must lie in [0, 1], got {s}")));
    }
    Ok(())
}

/// Zeros the lowest-relevance `floor(sparsity * size)` entries of
/// `relevance` (ties by ascending flat index across keys in map order)
/// and returns the pruned model with the mask.
///
/// Under [`Granularity::Weight`] only the parameter tensors named in
/// `relevance` take part. Under [`Granularity::Unit`] each pruned unit
/// loses its incoming weights and bias as well as its outgoing weights in
/// the next linear or convolutional layer.
pub fn prune(
    model: &ModelGraph,
    relevance: &TensorMap,
    sparsity: f64,
    granularity: Granularity,
) -> Result<(ModelGraph, PruneMask)> {
    check_sparsity(sparsity)?;
    let flat = relevance.flatten_keys();
    match granularity {
        Granularity::Weight => {
            let params = model.parameters();
            for (k, t) in &flat {
                let p = params
                    .get_tensor(k.as_str())
                    .map_err(|_| Error::Structure(format!("{k:?} is not a parameter of the model")))?;
                if p.shape() != t.shape() {
                    return Err(Error::Shape(format!("relevance {k}: {:?} vs {:?}", t.shape(), p.shape())));
                }
            }
        }
        Granularity::Unit => {
            for (k, t) in &flat {
                let units = unit_count(model, k)
                    .ok_or_else(|| Error::Structure(format!("{k:?} is not a linear or convolutional module")))?;
                if t.numel() != units {
                    return Err(Error::Shape(format!("relevance {k}: {} values for {units} units", t.numel())));
                }
            }
        }
    }
    let mut all: Vec<f64> = Vec::new();
    for t in flat.values() {
        all.extend_from_slice(t.data());
    }
    let n = all.len();
    let k = (sparsity * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| all[a].total_cmp(&all[b]).then(a.cmp(&b)));
    let mut keep = vec![1.0; n];
    for &i in &order[..k] {
        keep[i] = 0.0;
    }
    let mut masks = TensorMap::new();
    let mut off = 0;
    for (key, t) in &flat {
        let len = t.numel();
        masks.put(key.as_str(), Tensor::new(t.shape().to_vec(), keep[off..off + len].to_vec())?)?;
        off += len;
    }
    let mask = PruneMask { granularity, masks, sparsity };
    Ok((apply_mask(model, &mask)?, mask))
}

fn unit_count(model: &ModelGraph, name: &str) -> Option<usize> {
    match model.module(name)?.kind() {
        ModuleKind::Linear { out_features, .. } => Some(*out_features),
        ModuleKind::Conv2d { out_channels, .. } => Some(*out_channels),
        _ => None,
    }
}

/// Layers that read `name`'s units, through elementwise modules, with the
/// number of input columns one unit occupies in each.
fn outgoing(model: &ModelGraph, name: &str, units: usize) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    let mut stack = vec![(name.to_string(), 1usize)];
    while let Some((site, per)) = stack.pop() {
        for c in model.consumers(&site) {
            match c.kind() {
                ModuleKind::Linear { in_features, .. } => {
                    let per = if per == 1 { in_features / units } else { per };
                    out.push((c.name().to_string(), per));
                }
                ModuleKind::Conv2d { .. } => out.push((c.name().to_string(), 1)),
                ModuleKind::Relu | ModuleKind::Tanh | ModuleKind::Sigmoid | ModuleKind::AvgPool2d { .. } => {
                    stack.push((c.name().to_string(), per))
                }
                ModuleKind::Flatten => stack.push((c.name().to_string(), 1)),
                ModuleKind::Softmax { .. } | ModuleKind::Add => {}
            }
        }
    }
    out
}

/// Multiplies the model's parameters by a mask produced by [`prune`].
pub fn apply_mask(model: &ModelGraph, mask: &PruneMask) -> Result<ModelGraph> {
    let mut params = model.parameters();
    match mask.granularity {
        Granularity::Weight => {
            for (k, m) in mask.masks.flatten_keys() {
                let p = params.get_tensor(k.as_str())?.mul(&m)?;
                params.put(k.as_str(), p)?;
            }
        }
        Granularity::Unit => {
            for (name, m) in mask.masks.flatten_keys() {
                let units = m.numel();
                let dead: Vec<usize> = (0..units).filter(|&j| m.data()[j] == 0.0).collect();
                if dead.is_empty() {
                    continue;
                }
                for role in ["weight", "bias"] {
                    let key = format!("{name}.{role}");
                    if let Ok(t) = params.get_tensor(key.as_str()) {
                        let per = t.numel() / units;
                        let mut t = t.clone();
                        t.update(|d| {
                            for &j in &dead {
                                d[j * per..(j + 1) * per].iter_mut().for_each(|v| *v = 0.0);
                            }
                        });
                        params.put(key.as_str(), t)?;
                    }
                }
                for (consumer, per) in outgoing(model, &name, units) {
                    let key = format!("{consumer}.weight");
                    let w = params.get_tensor(key.as_str())?.clone();
                    let rows = w.shape()[0];
                    let cols = w.numel() / rows;
                    let block = match model.module(&consumer).map(|m| m.kind()) {
                        Some(ModuleKind::Conv2d { kernel, .. }) => kernel * kernel,
                        _ => per,
                    };
                    let mut w = w;
                    w.update(|d| {
                        for r in 0..rows {
                            for &j in &dead {
                                let start = r * cols + j * block;
                                d[start..start + block].iter_mut().for_each(|v| *v = 0.0);
                            }
                        }
                    });
                    params.put(key.as_str(), w)?;
                }
            }
        }
    }
    model.with_parameters(&params)
}

/// Uniform random scores keyed like `like`, for random-mask baselines.
pub fn random_relevance(like: &TensorMap, seed: u64) -> Result<TensorMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(0.0, 1.0);
    let mut out = TensorMap::new();
    for (k, t) in like.flatten_keys() {
        let data = (0..t.numel()).map(|_| dist.sample(&mut rng)).collect();
        out.put(k.as_str(), Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}
