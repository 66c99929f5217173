use crate::error::{Error, Result};
use crate::hooking::HookedModel;
use crate::stats::trapezoid;
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

use super::{model_inputs, AttributionResult, Target};

/// Replacement value for flipped coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Fill {
    /// Per-sample, per-input mean of the original values.
    Mean,
    Zero,
    /// The matching coordinate of a reference input.
    Baseline(TensorMap),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlipCurve {
    pub fractions: Vec<f64>,
    /// Mean target value over the batch at each fraction.
    pub values: Vec<f64>,
    pub auc: f64,
}

/// Flips the most relevant input coordinates of every sample, fraction by
/// fraction, and records the target after each step.
///
/// Coordinates are all model-input values of one sample in input-key order;
/// they are ranked by descending relevance, ties going to the lower index,
/// and `floor(f * n)` of them are replaced at fraction `f`.
pub fn pixel_flipping(
    model: &mut HookedModel,
    inputs: &TensorMap,
    attribution: &AttributionResult,
    metric: &Target,
    fractions: &[f64],
    fill: &Fill,
) -> Result<FlipCurve> {
    if fractions.is_empty()
        || fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || fractions.windows(2).any(|w| w[1] < w[0])
    {
        return Err(Error::InvalidArgument("fractions must be non-empty, ascending and within [0, 1]".into()));
    }
    let x = model_inputs(model.graph(), inputs)?;
    let keys: Vec<String> = model.graph().input_keys().to_vec();
    let n = x.batch_shape()[0];

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut relevance: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut fills: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut spans = Vec::new();
    for key in &keys {
        let t = x.get_tensor(key.as_str())?;
        let r = attribution
            .attributions
            .get_tensor(key.as_str())
            .map_err(|_| Error::Structure(format!("attribution has no entry for input {key:?}")))?;
        if r.shape() != t.shape() {
            return Err(Error::Structure(format!(
                "attribution {key:?} has shape {:?}, input has {:?}",
                r.shape(),
                t.shape()
            )));
        }
        let base = match fill {
            Fill::Baseline(b) => {
                let bt = b.get_tensor(key.as_str())?;
                if bt.shape() != t.shape() {
                    return Err(Error::Structure(format!("baseline {key:?} shape mismatch")));
                }
                Some(bt)
            }
            _ => None,
        };
        for b in 0..n {
            let row = t.row(b);
            values[b].extend_from_slice(row);
            relevance[b].extend_from_slice(r.row(b));
            match (fill, base) {
                (Fill::Mean, _) => {
                    let m = row.iter().sum::<f64>() / row.len().max(1) as f64;
                    fills[b].extend(std::iter::repeat_n(m, row.len()));
                }
                (Fill::Zero, _) => fills[b].extend(std::iter::repeat_n(0.0, row.len())),
                (Fill::Baseline(_), Some(bt)) => fills[b].extend_from_slice(bt.row(b)),
                (Fill::Baseline(_), None) => unreachable!(),
            }
        }
        spans.push((key.clone(), t.shape().to_vec(), t.row_len()));
    }
    let total = values.first().map_or(0, Vec::len);
    let orders: Vec<Vec<usize>> = relevance
        .iter()
        .map(|r| {
            let mut idx: Vec<usize> = (0..r.len()).collect();
            idx.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut curve = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let k = ((f * total as f64) + 1e-9).floor() as usize;
        let mut flipped = values.clone();
        for b in 0..n {
            for &i in &orders[b][..k.min(total)] {
                flipped[b][i] = fills[b][i];
            }
        }
        let mut batch = TensorMap::with_batch(vec![n]);
        let mut off = 0;
        for (key, shape, len) in &spans {
            let mut data = Vec::with_capacity(n * len);
            for row in &flipped {
                data.extend_from_slice(&row[off..off + len]);
            }
            batch.put(key.as_str(), Tensor::new(shape.clone(), data)?)?;
            off += len;
        }
        let y = model.forward(&batch)?;
        let v = metric.values(&y)?;
        curve.push(v.iter().sum::<f64>() / v.len().max(1) as f64);
    }
    Ok(FlipCurve { auc: trapezoid(fractions, &curve), fractions: fractions.to_vec(), values: curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, ModuleKind};

    #[test]
    fn flips_in_relevance_order() {
        // y = x0 + 2 x1 + 3 x2 + 4 x3
        let params = TensorMap::new().with("fc.weight", Tensor::matrix(&[&[1.0, 2.0, 3.0, 4.0]]).unwrap()).unwrap();
        let g = GraphBuilder::new()
            .input("x")
            .module("fc", ModuleKind::linear(4, 1, false))
            .output("y", "fc")
            .build_with_params(&params)
            .unwrap();
        let mut m = HookedModel::new(g);
        let x = TensorMap::with_batch(vec![1]).with("x", Tensor::matrix(&[&[1.0, 1.0, 1.0, 1.0]]).unwrap()).unwrap();
        let attr = AttributionResult {
            attributions: TensorMap::with_batch(vec![1])
                .with("x", Tensor::matrix(&[&[1.0, 3.0, 3.0, 0.0]]).unwrap())
                .unwrap(),
            method: "manual".into(),
            config_digest: String::new(),
        };
        let c = pixel_flipping(&mut m, &x, &attr, &Target::index("y", 0), &[0.0, 0.25, 0.5, 1.0], &Fill::Zero).unwrap();
        // tie between 1 and 2 goes to index 1 first
        assert_eq!(c.values, vec![10.0, 8.0, 5.0, 0.0]);
        let auc = 0.25 * (10.0 + 8.0) / 2.0 + 0.25 * (8.0 + 5.0) / 2.0 + 0.5 * 5.0 / 2.0;
        assert!((c.auc - auc).abs() < 1e-12);
    }
}
