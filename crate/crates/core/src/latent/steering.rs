use crate::error::{Error, Result};
use crate::hooking::{HookHandle, HookedModel, Slot};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

use super::{as_matrix, capture};

fn mean_row(m: &Tensor) -> Vec<f64> {
    let mut acc = vec![0.0; m.row_len()];
    for r in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / m.rows() as f64).collect()
}

/// Mean activation of `positives` minus that of `negatives` at `site`,
/// shaped like one row of the site output.
pub fn steering_vector(
    model: &mut HookedModel,
    positives: &TensorMap,
    negatives: &TensorMap,
    site: &str,
) -> Result<Tensor> {
    let sites = [site.to_string()];
    let hp = capture(model, positives, &sites)?.1.remove(0);
    let hn = capture(model, negatives, &sites)?.1.remove(0);
    if hp.rows() == 0 || hn.rows() == 0 {
        return Err(Error::InvalidArgument("steering sets must be nonempty".into()));
    }
    let (mp, mn) = (mean_row(&as_matrix(&hp)?), mean_row(&as_matrix(&hn)?));
    Tensor::new(hp.shape()[1..].to_vec(), mp.iter().zip(&mn).map(|(a, b)| a - b).collect())
}

/// Adds `alpha * vector` to every row of the site output in all later runs,
/// through a persistent hook; deregister the handle to undo.
pub fn apply_steering(model: &mut HookedModel, site: &str, vector: &Tensor, alpha: f64) -> Result<HookHandle> {
    if let Some(w) = model.graph().row_width(site) {
        if w != vector.numel() {
            return Err(Error::Shape(format!("steering vector has {} values, {site} rows have {w}", vector.numel())));
        }
    }
    let v: Vec<f64> = vector.data().iter().map(|x| alpha * x).collect();
    let site_name = site.to_string();
    model.register_map(site, Slot::Output, move |h: &Tensor| {
        if h.row_len() != v.len() {
            return Err(Error::Shape(format!(
                "steering vector has {} values, {site_name} rows have {}",
                v.len(),
                h.row_len()
            )));
        }
        let mut out = h.clone();
        out.update(|d| {
            for row in d.chunks_mut(v.len()) {
                for (x, s) in row.iter_mut().zip(&v) {
                    *x += s;
                }
            }
        });
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, ModuleKind};
    use crate::hooking::DeregisterStatus;

    #[test]
    fn shift_is_linear_in_alpha() {
        let params = TensorMap::new()
            .with("a.weight", Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap())
            .unwrap()
            .with("b.weight", Tensor::matrix(&[&[2.0, -1.0]]).unwrap())
            .unwrap();
        let g = GraphBuilder::new()
            .input("x")
            .module("a", ModuleKind::linear(2, 2, false))
            .module("b", ModuleKind::linear(2, 1, false))
            .output("y", "b")
            .build_with_params(&params)
            .unwrap();
        let mut m = HookedModel::new(g);
        let pos =
            TensorMap::with_batch(vec![2]).with("x", Tensor::matrix(&[&[3.0, 1.0], &[3.0, 1.0]]).unwrap()).unwrap();
        let neg = TensorMap::with_batch(vec![1]).with("x", Tensor::matrix(&[&[1.0, 1.0]]).unwrap()).unwrap();
        let v = steering_vector(&mut m, &pos, &neg, "a").unwrap();
        assert_eq!(v.data(), &[2.0, 0.0]);
        let base = m.forward(&neg).unwrap();
        let h = apply_steering(&mut m, "a", &v, 0.5).unwrap();
        let shifted = m.forward(&neg).unwrap();
        let d = shifted.get_tensor("y").unwrap().data()[0] - base.get_tensor("y").unwrap().data()[0];
        assert_eq!(d, 0.5 * 2.0 * 2.0);
        assert_eq!(m.deregister(h), DeregisterStatus::Removed);
        assert!(m.forward(&neg).unwrap().bitwise_eq(&base));
        assert!(matches!(apply_steering(&mut m, "a", &Tensor::vector(&[1.0]), 1.0), Err(Error::Shape(_))));
    }
}
