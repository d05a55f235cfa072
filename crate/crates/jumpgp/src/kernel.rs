//! Covariance kernels.
//!
//! The squared-exponential family is parametrized so that
//! `c(x, x') = s^2 * exp(-||(x - x')/l||^2 / 2)` with one lengthscale per
//! dimension or a single isotropic value. A kernel written as
//! `s^2 * exp(-d^2 / (2 l^2))` therefore has `l^2` equal to half the inverse
//! of the exponent's distance coefficient; e.g. `9 exp(-d^2/200)` maps to
//! `s^2 = 9`, `l^2 = 100`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    SquaredExponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Lengthscale {
    Isotropic(f64),
    PerDimension(Vec<f64>),
}

impl Lengthscale {
    pub fn get(&self, dim: usize) -> f64 {
        match self {
            Lengthscale::Isotropic(l) => *l,
            Lengthscale::PerDimension(ls) => ls[dim],
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            Lengthscale::Isotropic(l) => {
                if !(l.is_finite() && *l > 0.0) {
                    return Err(Error::argument(format!("lengthscale must be positive, got {l}")));
                }
            }
            Lengthscale::PerDimension(ls) => {
                if ls.len() != d {
                    return Err(Error::argument(format!(
                        "expected {} lengthscales, got {}",
                        d,
                        ls.len()
                    )));
                }
                if ls.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
                    return Err(Error::argument("all lengthscales must be positive".to_string()));
                }
            }
        }
        Ok(())
    }
}

/// Covariance family plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub signal_variance: f64,
    pub lengthscale: Lengthscale,
}

impl KernelSpec {
    pub fn squared_exponential(signal_variance: f64, lengthscale: Lengthscale) -> Result<Self> {
        if !(signal_variance.is_finite() && signal_variance > 0.0) {
            return Err(Error::argument(format!(
                "signal_variance must be positive, got {signal_variance}"
            )));
        }
        if let Lengthscale::Isotropic(_) = lengthscale {
            lengthscale.validate(1)?;
        } else if let Lengthscale::PerDimension(ref ls) = lengthscale {
            lengthscale.validate(ls.len())?;
        }
        Ok(KernelSpec {
            family: KernelFamily::SquaredExponential,
            signal_variance,
            lengthscale,
        })
    }

    /// Convenience constructor for the common isotropic case.
    pub fn iso(signal_variance: f64, lengthscale: f64) -> Result<Self> {
        Self::squared_exponential(signal_variance, Lengthscale::Isotropic(lengthscale))
    }
}

/// Evaluate the kernel between two points.
pub fn se_kernel(x: &[f64], x2: &[f64], k: &KernelSpec) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(Error::argument(format!(
            "se_kernel: point dimensions differ ({} vs {})",
            x.len(),
            x2.len()
        )));
    }
    k.lengthscale.validate(x.len())?;
    Ok(se_kernel_unchecked(x, x2, k))
}

/// Hot-path kernel evaluation; preconditions checked by the caller.
#[inline]
pub fn se_kernel_unchecked(x: &[f64], x2: &[f64], k: &KernelSpec) -> f64 {
    let mut q = 0.0;
    match &k.lengthscale {
        Lengthscale::Isotropic(l) => {
            for (a, b) in x.iter().zip(x2) {
                let d = a - b;
                q += d * d;
            }
            q /= l * l;
        }
        Lengthscale::PerDimension(ls) => {
            for ((a, b), l) in x.iter().zip(x2).zip(ls) {
                let d = (a - b) / l;
                q += d * d;
            }
        }
    }
    k.signal_variance * (-0.5 * q).exp()
}

/// Covariance matrix over a point set, with `jitter` added to the diagonal.
///
/// Points are rows of a flat row-major buffer.
pub fn cov_matrix(points: &[f64], d: usize, k: &KernelSpec, jitter: f64) -> Result<SymMatrix> {
    if d == 0 || points.len() % d != 0 {
        return Err(Error::argument(format!(
            "cov_matrix: buffer of {} values is not a multiple of d={}",
            points.len(),
            d
        )));
    }
    let n = points.len() / d;
    if n == 0 {
        return Err(Error::argument("cov_matrix: need at least one point".to_string()));
    }
    k.lengthscale.validate(d)?;
    let mut m = SymMatrix::from_fn(n, |i, j| {
        se_kernel_unchecked(&points[i * d..(i + 1) * d], &points[j * d..(j + 1) * d], k)
    });
    if jitter != 0.0 {
        m.add_diagonal(jitter);
    }
    Ok(m)
}

/// Covariance vector between each row of `points` and a single point.
pub fn cov_vector(points: &[f64], d: usize, x: &[f64], k: &KernelSpec) -> nalgebra::DVector<f64> {
    let n = points.len() / d;
    nalgebra::DVector::from_fn(n, |i, _| {
        se_kernel_unchecked(&points[i * d..(i + 1) * d], x, k)
    })
}
