use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

use super::ModelGraph;

/// Central-difference estimate of d(sum over rows of `output[row, index]`)
/// with respect to every input coordinate.
pub fn finite_difference_gradient(
    model: &ModelGraph,
    inputs: &TensorMap,
    output: &str,
    index: usize,
    h: f64,
) -> Result<TensorMap> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let eval = |m: &TensorMap| -> Result<f64> {
        let (out, _) = model.forward(m, false)?;
        let y = out.get_tensor(output)?;
        if index >= y.row_len() {
            return Err(Error::InvalidArgument(format!("output index {index} out of range for {:?}", y.shape())));
        }
        Ok((0..y.rows()).map(|r| y.row(r)[index]).sum())
    };
    let mut grads = TensorMap::new();
    for key in model.input_keys() {
        let x = inputs.get_tensor(key.as_str())?;
        let mut g = vec![0.0; x.numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let mut mp = inputs.clone();
            mp.put(key.as_str(), plus)?;
            let mut mm = inputs.clone();
            mm.put(key.as_str(), minus)?;
            *gi = (eval(&mp)? - eval(&mm)?) / (2.0 * h);
        }
        grads.put(key.as_str(), Tensor::new(x.shape().to_vec(), g)?)?;
    }
    Ok(grads)
}
