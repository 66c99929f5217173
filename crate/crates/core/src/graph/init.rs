use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Deterministic parameter initialisation scheme.
///
/// Parameters are drawn module by module in declaration order, weight
/// before bias, row-major, from a ChaCha8 stream seeded with the build seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Uniform(f64, f64),
    Normal(f64, f64),
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

impl Init {
    pub(crate) fn sample(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match *self {
            Init::Zeros => vec![0.0; n],
            Init::Uniform(lo, hi) => {
                let d = Uniform::new(lo, hi);
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Normal(mean, std) => {
                let d = Normal::new(mean, std).expect("validated std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::Zeros => write!(f, "zeros"),
            Init::Uniform(a, b) => write!(f, "uniform({a},{b})"),
            Init::Normal(m, s) => write!(f, "normal({m},{s})"),
        }
    }
}

impl FromStr for Init {
    type Err = Error;

    /// Parses `zeros`, `uniform(lo,hi)` or `normal(mean,std)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "zeros" {
            return Ok(Init::Zeros);
        }
        let bad = || Error::Format(format!("unrecognised init scheme {s:?}"));
        let open = s.find('(').ok_or_else(bad)?;
        if !s.ends_with(')') {
            return Err(bad());
        }
        let args: Vec<f64> = s[open + 1..s.len() - 1]
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if args.len() != 2 {
            return Err(bad());
        }
        match &s[..open] {
            "uniform" if args[0] < args[1] => Ok(Init::Uniform(args[0], args[1])),
            "normal" if args[1] > 0.0 => Ok(Init::Normal(args[0], args[1])),
            _ => Err(bad()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_schemes() {
        assert_eq!("uniform(-0.1,0.1)".parse::<Init>().unwrap(), Init::Uniform(-0.1, 0.1));
        assert_eq!("normal(0, 0.5)".parse::<Init>().unwrap(), Init::Normal(0.0, 0.5));
        assert!("uniform(1,0)".parse::<Init>().is_err());
        assert!("xavier".parse::<Init>().is_err());
    }

    #[test]
    fn deterministic() {
        let a = Init::Uniform(-0.1, 0.1).sample(&[3, 4], &mut rng(7));
        let b = Init::Uniform(-0.1, 0.1).sample(&[3, 4], &mut rng(7));
        assert!(a.bitwise_eq(&b));
    }
}
