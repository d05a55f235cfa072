//! Dense symmetric linear algebra shared by every model in the crate.
//!
//! Covariance matrices are built symmetric by construction, factorized once,
//! and reused through [`CholFactor`]; explicit inverses are never formed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative jitter escalation ladder: start at `1e-10 * scale`, multiply by
/// 10 until `1e-4 * scale`, then give up.
pub const JITTER_START_REL: f64 = 1e-10;
pub const JITTER_MAX_REL: f64 = 1e-4;

/// A square matrix that is symmetric by construction.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Build an `order x order` symmetric matrix from a generator evaluated
    /// only on the lower triangle and mirrored.
    pub fn from_fn(order: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(order, order);
        for i in 0..order {
            for j in 0..=i {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix { m }
    }

    /// Wrap an existing matrix, symmetrizing exactly as `(A + A^T)/2`.
    pub fn symmetrize(a: DMatrix<f64>) -> Self {
        let order = a.nrows();
        assert_eq!(order, a.ncols(), "symmetrize requires a square matrix");
        let mut m = a;
        for i in 0..order {
            for j in 0..i {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix { m }
    }

    pub fn order(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.order() {
            self.m[(i, i)] += v;
        }
    }

    /// Cholesky factorization without any jitter help.
    pub fn cholesky(&self) -> Result<CholFactor> {
        nalgebra::linalg::Cholesky::new(self.m.clone())
            .map(|c| CholFactor { l: c.unpack() })
            .ok_or_else(|| {
                Error::numerical(format!(
                    "Cholesky factorization failed for order-{} matrix",
                    self.order()
                ))
            })
    }

    /// Cholesky factorization with escalating diagonal jitter.
    ///
    /// `scale` sets the jitter ladder units (typically the kernel signal
    /// variance or the largest diagonal entry). Returns the factor and the
    /// jitter that was actually added.
    pub fn cholesky_with_jitter(&self, scale: f64) -> Result<(CholFactor, f64)> {
        if let Ok(f) = self.cholesky() {
            return Ok((f, 0.0));
        }
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let mut rel = JITTER_START_REL;
        while rel <= JITTER_MAX_REL * (1.0 + 1e-12) {
            let mut bumped = self.clone();
            bumped.add_diagonal(rel * scale);
            if let Ok(f) = bumped.cholesky() {
                return Ok((f, rel * scale));
            }
            rel *= 10.0;
        }
        Err(Error::numerical(format!(
            "Cholesky failed for order-{} matrix even with jitter {:.1e} (scale {:.3e})",
            self.order(),
            JITTER_MAX_REL * scale,
            scale
        )))
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    l: DMatrix<f64>,
}

impl CholFactor {
    pub fn order(&self) -> usize {
        self.l.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solve `A x = b` by forward/backward substitution.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// Solve `A X = B` column-wise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// `log det A = 2 * sum(log L_ii)`.
    pub fn log_det(&self) -> f64 {
        (0..self.order()).map(|i| self.l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// `b^T A^{-1} b` via one triangular solve.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        x.norm_squared()
    }
}

/// Solve `A X = B` for symmetric positive definite `A`.
pub fn chol_solve(a: &SymMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.order() != b.nrows() {
        return Err(Error::argument(format!(
            "chol_solve: A is {}x{} but B has {} rows",
            a.order(),
            a.order(),
            b.nrows()
        )));
    }
    Ok(a.cholesky()?.solve_mat(b))
}

/// Draw one multivariate-normal sample `mean + L z` with `z ~ N(0, I)` from
/// the given stream. Deterministic for a fixed stream state.
pub fn mvn_sample<R: Rng>(mean: &DVector<f64>, cov: &SymMatrix, rng: &mut R) -> Result<DVector<f64>> {
    if mean.len() != cov.order() {
        return Err(Error::argument(format!(
            "mvn_sample: mean has length {} but cov order is {}",
            mean.len(),
            cov.order()
        )));
    }
    let scale = (0..cov.order())
        .map(|i| cov.as_matrix()[(i, i)])
        .fold(0.0_f64, f64::max);
    let (factor, _) = cov.cholesky_with_jitter(scale)?;
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + factor.lower() * z)
}
