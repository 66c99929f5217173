use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::Tensor;
use crate::tensormap::{FlatMap, TensorMap};

/// Parameter deltas keyed by parameter path.
///
/// Each delta is carried as an unevaluated sum `deltas + residual`, where
/// `residual` holds the rounding error of the subtraction that produced
/// it. That keeps `apply(pre, task_vector(pre, fine), 1)` equal to `fine`
/// bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub deltas: TensorMap,
    pub residual: TensorMap,
}

/// `a + b` as a rounded sum and its exact error.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn check_same(a: &FlatMap, b: &FlatMap) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Structure(format!("{} vs {} parameter tensors", a.len(), b.len())));
    }
    for ((ka, ta), (kb, tb)) in a.iter().zip(b) {
        if ka != kb {
            return Err(Error::Structure(format!("parameter keys differ: {ka:?} vs {kb:?}")));
        }
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("parameter {ka}: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
    }
    Ok(())
}

fn zip3(
    a: &FlatMap,
    b: &FlatMap,
    c: &FlatMap,
    mut f: impl FnMut(f64, f64, f64) -> (f64, f64),
) -> Result<(TensorMap, TensorMap)> {
    let mut hi = TensorMap::new();
    let mut lo = TensorMap::new();
    for (((k, ta), tb), tc) in a.iter().zip(b.values()).zip(c.values()) {
        let (mut h, mut l) = (Vec::with_capacity(ta.numel()), Vec::with_capacity(ta.numel()));
        for ((x, y), z) in ta.data().iter().zip(tb.data()).zip(tc.data()) {
            let (p, q) = f(*x, *y, *z);
            h.push(p);
            l.push(q);
        }
        hi.put(k.as_str(), Tensor::new(ta.shape().to_vec(), h)?)?;
        lo.put(k.as_str(), Tensor::new(ta.shape().to_vec(), l)?)?;
    }
    Ok((hi, lo))
}

/// `fine - pre`, parameter by parameter.
pub fn task_vector(pre: &ModelGraph, fine: &ModelGraph) -> Result<TaskVector> {
    let (a, b) = (pre.parameters().flatten_keys(), fine.parameters().flatten_keys());
    check_same(&a, &b)?;
    let (deltas, residual) = zip3(&b, &a, &a, |f, p, _| two_sum(f, -p))?;
    Ok(TaskVector { deltas, residual })
}

impl TaskVector {
    pub fn negate(&self) -> TaskVector {
        let neg = |m: &TensorMap| m.apply(|t| t.map(|v| -v)).expect("same structure");
        TaskVector { deltas: neg(&self.deltas), residual: neg(&self.residual) }
    }

    pub fn add(&self, other: &TaskVector) -> Result<TaskVector> {
        let (a, b) = (self.deltas.flatten_keys(), other.deltas.flatten_keys());
        check_same(&a, &b)?;
        let (ra, rb) = (self.residual.flatten_keys(), other.residual.flatten_keys());
        let (deltas, carry) = zip3(&a, &b, &a, |x, y, _| two_sum(x, y))?;
        let (c, sa, sb) = (carry.flatten_keys(), ra, rb);
        let (residual, _) = zip3(&c, &sa, &sb, |e, p, q| (e + (p + q), 0.0))?;
        Ok(TaskVector { deltas, residual })
    }

    /// Collapses the pair into plain deltas.
    pub fn to_deltas(&self) -> Result<TensorMap> {
        self.deltas.zip_apply(&self.residual, |d, r| d.add(r))
    }

    /// Both parts under `delta.` and `residual.` prefixes, for storage.
    pub fn to_tensormap(&self) -> Result<TensorMap> {
        let mut m = TensorMap::new();
        for (k, t) in self.deltas.flatten_keys() {
            m.put(format!("delta.{k}").as_str(), t)?;
        }
        for (k, t) in self.residual.flatten_keys() {
            m.put(format!("residual.{k}").as_str(), t)?;
        }
        Ok(m)
    }

    pub fn from_tensormap(m: &TensorMap) -> Result<TaskVector> {
        let deltas = m.get_map("delta")?.clone();
        let residual = match m.get_map("residual") {
            Ok(r) => r.clone(),
            Err(_) => deltas.apply(|t| Tensor::zeros(t.shape().to_vec()))?,
        };
        check_same(&deltas.flatten_keys(), &residual.flatten_keys())?;
        Ok(TaskVector { deltas, residual })
    }
}

/// `θ + α·tv` for every parameter of `model`.
pub fn apply(model: &ModelGraph, tv: &TaskVector, alpha: f64) -> Result<ModelGraph> {
    let theta = model.parameters().flatten_keys();
    let (d, r) = (tv.deltas.flatten_keys(), tv.residual.flatten_keys());
    check_same(&theta, &d)?;
    check_same(&d, &r)?;
    if alpha == 0.0 {
        return Ok(model.clone());
    }
    let (params, _) = zip3(&theta, &d, &r, |t, hi, lo| {
        let p = alpha * hi;
        let ep = alpha.mul_add(hi, -p);
        let (s, e) = two_sum(t, p);
        (s + (e + (ep + alpha * lo)), 0.0)
    })?;
    model.with_parameters(&params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Init, ModuleKind};

    fn model(seed: u64) -> ModelGraph {
        GraphBuilder::new()
            .input("x")
            .module("fc1", ModuleKind::linear(3, 5, true))
            .module("act", ModuleKind::Tanh)
            .module("fc2", ModuleKind::linear(5, 2, true))
            .output("y", "fc2")
            .build(Init::Normal(0.0, 3.0), seed)
            .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (pre, fine) = (model(1), model(2));
        let tv = task_vector(&pre, &fine).unwrap();
        let back = apply(&pre, &tv, 1.0).unwrap();
        assert!(back.parameters().bitwise_eq(&fine.parameters()));
        assert!(apply(&pre, &tv, 0.0).unwrap().parameters().bitwise_eq(&pre.parameters()));
        let undo = apply(&fine, &tv.negate(), 1.0).unwrap();
        assert!(undo.parameters().bitwise_eq(&pre.parameters()));
    }

    #[test]
    fn group_laws() {
        let a = task_vector(&model(1), &model(2)).unwrap();
        let b = task_vector(&model(3), &model(4)).unwrap();
        assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
        assert_eq!(a.negate().negate(), a);
    }

    #[test]
    fn mismatch_rejected() {
        let other = GraphBuilder::new()
            .input("x")
            .module("fc1", ModuleKind::linear(3, 4, true))
            .output("y", "fc1")
            .build(Init::Zeros, 0)
            .unwrap();
        assert!(task_vector(&model(1), &other).is_err());
    }
}
