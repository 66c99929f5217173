use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::as_matrix;

pub const DEFAULT_RIDGE: f64 = 1e-6;

/// A ridge-regression probe from activations to targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub site: String,
    /// `[units, targets]`.
    pub weights: Tensor,
    /// `[targets]`.
    pub intercept: Tensor,
    /// `None` when the split's targets are constant.
    pub r2_train: Option<f64>,
    pub r2_test: Option<f64>,
    pub lambda: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl ProbeReport {
    pub fn predict(&self, h: &Tensor) -> Result<Tensor> {
        let h = as_matrix(h)?;
        let (d, m) = (self.weights.shape()[0], self.weights.shape()[1]);
        if h.row_len() != d {
            return Err(Error::Shape(format!("probe expects {d} units, got {}", h.row_len())));
        }
        let mut out = Vec::with_capacity(h.rows() * m);
        for r in 0..h.rows() {
            let row = h.row(r);
            for j in 0..m {
                let mut s = self.intercept.data()[j];
                for (i, v) in row.iter().enumerate() {
                    s += v * self.weights.data()[i * m + j];
                }
                out.push(s);
            }
        }
        Tensor::new(vec![h.rows(), m], out)
    }
}

fn r2(pred: &Tensor, y: &Tensor) -> Option<f64> {
    let (n, m) = (y.rows(), y.row_len());
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for j in 0..m {
        let mean = (0..n).map(|r| y.row(r)[j]).sum::<f64>() / n as f64;
        for r in 0..n {
            let t = y.row(r)[j];
            ss_res += (t - pred.row(r)[j]).powi(2);
            ss_tot += (t - mean).powi(2);
        }
    }
    (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot)
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let per = t.row_len();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), per], data)
}

/// Fits `y ≈ h·W + b` by ridge regression (intercept unpenalised) on a
/// seeded 80/20 shuffle split and reports R² on both parts.
pub fn fit_probe(
    site: &str,
    activations: &Tensor,
    targets: &Tensor,
    lambda: f64,
    split_seed: u64,
) -> Result<ProbeReport> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge strength must be non-negative, got {lambda}")));
    }
    let h = as_matrix(activations)?;
    let y = as_matrix(targets)?;
    let n = h.rows();
    if y.rows() != n {
        return Err(Error::Shape(format!("{n} activation rows but {} target rows", y.rows())));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_train = (n * 4) / 5;
    if n_train < 2 || n - n_train < 2 {
        return Err(Error::InvalidArgument(format!("probe needs at least two samples per split, got {n} samples")));
    }
    let (train_idx, test_idx) = order.split_at(n_train);
    let (htr, ytr) = (rows_of(&h, train_idx)?, rows_of(&y, train_idx)?);
    let (hte, yte) = (rows_of(&h, test_idx)?, rows_of(&y, test_idx)?);

    let (d, m) = (h.row_len(), y.row_len());
    let x = DMatrix::from_row_slice(n_train, d, htr.data());
    let t = DMatrix::from_row_slice(n_train, m, ytr.data());
    let xm = x.row_mean();
    let tm = t.row_mean();
    let mut xc = x.clone();
    let mut tc = t.clone();
    for mut r in xc.row_iter_mut() {
        r -= &xm;
    }
    for mut r in tc.row_iter_mut() {
        r -= &tm;
    }
    let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * lambda;
    let rhs = xc.transpose() * &tc;
    let w = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::InvalidArgument(format!("probe solve failed: {e}")))?,
    };
    let b = &tm - &xm * &w;

    let mut wdata = Vec::with_capacity(d * m);
    for i in 0..d {
        for j in 0..m {
            wdata.push(w[(i, j)]);
        }
    }
    let report = ProbeReport {
        site: site.to_string(),
        weights: Tensor::new(vec![d, m], wdata)?,
        intercept: Tensor::new(vec![m], b.iter().copied().collect())?,
        r2_train: None,
        r2_test: None,
        lambda,
        train_size: n_train,
        test_size: n - n_train,
    };
    let r2_train = r2(&report.predict(&htr)?, &ytr);
    let r2_test = r2(&report.predict(&hte)?, &yte);
    Ok(ProbeReport { r2_train, r2_test, ..report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn realisable_targets_fit_exactly() {
        let h = gaussian(50, 3, 1);
        let y: Vec<f64> = (0..50).map(|r| 2.0 * h.row(r)[0] - h.row(r)[2] + 0.5).collect();
        let y = Tensor::new(vec![50, 1], y).unwrap();
        let p = fit_probe("s", &h, &y, 0.0, 3).unwrap();
        assert!((p.r2_test.unwrap() - 1.0).abs() < 1e-10);
        assert!((p.intercept.data()[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn constant_targets_have_undefined_r2() {
        let h = gaussian(10, 2, 1);
        let p = fit_probe("s", &h, &Tensor::full(vec![10, 1], 4.0), 1e-6, 0).unwrap();
        assert_eq!(p.r2_test, None);
        assert_eq!(p.r2_train, None);
    }

    #[test]
    fn huge_ridge_kills_weights() {
        let h = gaussian(40, 3, 2);
        let y = gaussian(40, 1, 3);
        let p = fit_probe("s", &h, &y, 1e12, 0).unwrap();
        assert!(p.weights.max_abs() < 1e-9);
        assert!(p.r2_train.unwrap().abs() < 1e-6);
    }

    #[test]
    fn too_few_samples() {
        let h = gaussian(4, 1, 0);
        assert!(fit_probe("s", &h, &h, 0.0, 0).is_err());
    }
}
