use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attribution::Target;
use crate::error::{Error, Result};
use crate::hooking::{HookedModel, Slot};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

use super::as_matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CavMethod {
    MeanDifference,
    /// Full-batch gradient descent on the logistic loss.
    Logistic {
        iters: usize,
        lr: f64,
        seed: u64,
    },
}

impl CavMethod {
    pub fn logistic() -> Self {
        CavMethod::Logistic { iters: 500, lr: 0.5, seed: 0 }
    }
}

/// A unit-norm concept direction at a site.
#[derive(Debug, Clone, PartialEq)]
pub struct Cav {
    pub site: String,
    pub direction: Tensor,
    pub method: CavMethod,
}

fn unit(v: Vec<f64>) -> Result<Tensor> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidArgument("concept direction is zero (positive and negative sets coincide)".into()));
    }
    Ok(Tensor::vector(&v.iter().map(|x| x / norm).collect::<Vec<_>>()))
}

fn column_mean(m: &Tensor) -> Vec<f64> {
    let mut acc = vec![0.0; m.row_len()];
    for r in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / m.rows() as f64).collect()
}

/// Fits a concept direction separating `positives` from `negatives`
/// (activations at `site`, one row per sample).
pub fn fit_cav(positives: &Tensor, negatives: &Tensor, site: &str, method: CavMethod) -> Result<Cav> {
    let (p, n) = (as_matrix(positives)?, as_matrix(negatives)?);
    if p.rows() == 0 || n.rows() == 0 {
        return Err(Error::InvalidArgument("both concept sets must be nonempty".into()));
    }
    if p.row_len() != n.row_len() {
        return Err(Error::Shape(format!("{} vs {} units", p.row_len(), n.row_len())));
    }
    let d = p.row_len();
    let direction = match method {
        CavMethod::MeanDifference => {
            let (mp, mn) = (column_mean(&p), column_mean(&n));
            unit(mp.iter().zip(&mn).map(|(a, b)| a - b).collect())?
        }
        CavMethod::Logistic { iters, lr, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = Normal::new(0.0, 1e-3).expect("valid normal");
            let mut w: Vec<f64> = (0..d).map(|_| init.sample(&mut rng)).collect();
            let mut b = 0.0;
            let samples: Vec<(&[f64], f64)> =
                (0..p.rows()).map(|r| (p.row(r), 1.0)).chain((0..n.rows()).map(|r| (n.row(r), 0.0))).collect();
            let inv = 1.0 / samples.len() as f64;
            for _ in 0..iters {
                let mut gw = vec![0.0; d];
                let mut gb = 0.0;
                for (x, y) in &samples {
                    let z: f64 = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
                    let e = 1.0 / (1.0 + (-z).exp()) - y;
                    for (g, xi) in gw.iter_mut().zip(x.iter()) {
                        *g += e * xi;
                    }
                    gb += e;
                }
                for (wi, g) in w.iter_mut().zip(&gw) {
                    *wi -= lr * g * inv;
                }
                b -= lr * gb * inv;
            }
            unit(w)?
        }
    };
    Ok(Cav { site: site.to_string(), direction, method })
}

/// Fraction of samples whose target derivative along the CAV direction is
/// strictly positive.
pub fn tcav_score(model: &mut HookedModel, inputs: &TensorMap, cav: &Cav, target: &Target) -> Result<f64> {
    let t = target.clone();
    let mut ctx = model.context()?;
    ctx.backward(move |v| Ok(vec![t.seed_set(v)?]));
    let g = ctx.get(&cav.site, Slot::GradOutput)?;
    ctx.run(inputs)?;
    let g = as_matrix(&g.into_value()?)?;
    if g.row_len() != cav.direction.numel() {
        return Err(Error::Shape(format!("CAV has {} units, {} has {}", cav.direction.numel(), cav.site, g.row_len())));
    }
    if g.rows() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let positive = (0..g.rows())
        .filter(|&r| g.row(r).iter().zip(cav.direction.data()).map(|(a, b)| a * b).sum::<f64>() > 0.0)
        .count();
    Ok(positive as f64 / g.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clusters_on_first_axis() {
        let p = Tensor::matrix(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        let n = Tensor::matrix(&[&[-1.0, 0.0]]).unwrap();
        let c = fit_cav(&p, &n, "s", CavMethod::MeanDifference).unwrap();
        assert_eq!(c.direction.data(), &[1.0, 0.0]);
        let swapped = fit_cav(&n, &p, "s", CavMethod::MeanDifference).unwrap();
        assert_eq!(swapped.direction.data(), &[-1.0, 0.0]);
        let l = fit_cav(&p, &n, "s", CavMethod::logistic()).unwrap();
        assert!(l.direction.data()[0] > 0.99);
    }

    #[test]
    fn identical_sets_rejected() {
        let p = Tensor::matrix(&[&[1.0, 2.0]]).unwrap();
        assert!(fit_cav(&p, &p, "s", CavMethod::MeanDifference).is_err());
    }
}
