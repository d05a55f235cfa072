//! Stationary GP regression: marginal likelihood, MLE fitting, prediction.
//!
//! Used standalone as the GP baseline and as the per-region machinery inside
//! the local jump model. The constant mean has a closed-form MLE conditional
//! on the kernel, so the numerical search runs over (log signal variance,
//! log lengthscale(s), log noise variance) only.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{cov_matrix, cov_vector, se_kernel_unchecked, KernelSpec, Lengthscale};
use crate::linalg::CholFactor;
use crate::optim::{nelder_mead, Bounds};

const LN_2PI: f64 = 1.8378770664093453;

/// Relative floor applied to predictive variances.
pub const VAR_CLAMP_REL: f64 = 1e-12;

/// Search box for the hyperparameter MLE, all in natural logs.
#[derive(Debug, Clone)]
pub struct HyperBounds {
    pub log_signal: (f64, f64),
    pub log_length: (f64, f64),
    pub log_noise: (f64, f64),
}

impl HyperBounds {
    /// Default box: lengthscale spans `[1e-3, 10]` domain diagonals, noise
    /// variance `[1e-8, var(y)]`, signal variance `var(y) * [e^-6, e^3]`.
    pub fn from_scales(domain_diagonal: f64, var_y: f64) -> Self {
        let var_y = var_y.max(1e-12);
        let diag = domain_diagonal.max(1e-12);
        HyperBounds {
            log_signal: (var_y.ln() - 6.0, var_y.ln() + 3.0),
            log_length: ((1e-3 * diag).ln(), (10.0 * diag).ln()),
            log_noise: ((1e-8f64).ln(), var_y.max(1e-6).ln()),
        }
    }

    pub fn from_data(data: &Dataset) -> Self {
        Self::from_scales(data.domain_diagonal(), data.response_variance())
    }

    fn to_optim(&self, d: usize, per_dim: bool) -> Bounds {
        let n_len = if per_dim { d } else { 1 };
        let mut lo = vec![self.log_signal.0];
        let mut hi = vec![self.log_signal.1];
        for _ in 0..n_len {
            lo.push(self.log_length.0);
            hi.push(self.log_length.1);
        }
        lo.push(self.log_noise.0);
        hi.push(self.log_noise.1);
        Bounds::new(lo, hi)
    }
}

/// Hyperparameter point: kernel plus noise variance.
#[derive(Debug, Clone)]
pub struct GpParams {
    pub kernel: KernelSpec,
    pub sigma2: f64,
}

impl GpParams {
    fn to_log_vec(&self, d: usize, per_dim: bool) -> Vec<f64> {
        let mut v = vec![self.kernel.signal_variance.ln()];
        if per_dim {
            for k in 0..d {
                v.push(self.kernel.lengthscale.get(k).ln());
            }
        } else {
            v.push(self.kernel.lengthscale.get(0).ln());
        }
        v.push(self.sigma2.ln());
        v
    }

    fn from_log_vec(v: &[f64], per_dim: bool) -> Self {
        let s2 = v[0].exp();
        let sigma2 = v[v.len() - 1].exp();
        let ls = &v[1..v.len() - 1];
        let lengthscale = if per_dim {
            Lengthscale::PerDimension(ls.iter().map(|l| l.exp()).collect())
        } else {
            Lengthscale::Isotropic(ls[0].exp())
        };
        GpParams {
            kernel: KernelSpec {
                family: crate::kernel::KernelFamily::SquaredExponential,
                signal_variance: s2,
                lengthscale,
            },
            sigma2,
        }
    }
}

/// Fit configuration.
#[derive(Debug, Clone)]
pub struct GpConfig {
    pub restarts: usize,
    pub per_dim_lengthscale: bool,
    pub max_evals: usize,
    pub tol: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            restarts: 5,
            per_dim_lengthscale: false,
            max_evals: 160,
            tol: 1e-8,
        }
    }
}

/// A fitted stationary GP: MLEs plus the factorization caches needed for
/// prediction. Immutable after construction.
#[derive(Debug, Clone)]
pub struct GpFit {
    pub mu_hat: f64,
    pub sigma2_hat: f64,
    pub kernel: KernelSpec,
    pub lml: f64,
    chol: CholFactor,
    /// `(sigma^2 I + C)^{-1} (y - mu 1)`
    alpha: DVector<f64>,
    n: usize,
}

impl GpFit {
    /// Build the fit at fixed hyperparameters: closed-form constant mean,
    /// factorization cache and the marginal likelihood value.
    pub fn with_hyperparams(
        points: &[f64],
        d: usize,
        y: &DVector<f64>,
        kernel: &KernelSpec,
        sigma2: f64,
    ) -> Result<Self> {
        let n = y.len();
        if points.len() != n * d {
            return Err(Error::argument("with_hyperparams: shape mismatch".to_string()));
        }
        let mut a = cov_matrix(points, d, kernel, 0.0)?;
        a.add_diagonal(sigma2);
        let (chol, _) = a.cholesky_with_jitter(kernel.signal_variance)?;
        let ones = DVector::from_element(n, 1.0);
        let u = chol.solve_vec(y);
        let v = chol.solve_vec(&ones);
        let denom = ones.dot(&v);
        let mu_hat = ones.dot(&u) / denom;
        let resid = y - DVector::from_element(n, mu_hat);
        let alpha = chol.solve_vec(&resid);
        let quad = resid.dot(&alpha);
        let lml = -0.5 * (quad + chol.log_det() + n as f64 * LN_2PI);
        Ok(GpFit {
            mu_hat,
            sigma2_hat: sigma2,
            kernel: kernel.clone(),
            lml,
            chol,
            alpha,
            n,
        })
    }

    pub fn n_train(&self) -> usize {
        self.n
    }

    pub fn chol(&self) -> &CholFactor {
        &self.chol
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }
}

/// Log marginal likelihood of `y` under `N(mu 1, C + sigma2 I)`.
pub fn log_marginal_likelihood(
    data: &Dataset,
    mu: f64,
    sigma2: f64,
    k: &KernelSpec,
) -> Result<f64> {
    if sigma2 <= 0.0 {
        return Err(Error::argument(format!("sigma2 must be positive, got {sigma2}")));
    }
    let mut a = cov_matrix(data.points_flat(), data.dim(), k, 0.0)?;
    a.add_diagonal(sigma2);
    let chol = a.cholesky()?;
    let resid = data.y_vector() - DVector::from_element(data.len(), mu);
    let quad = chol.quad_form(&resid);
    Ok(-0.5 * (quad + chol.log_det() + data.len() as f64 * LN_2PI))
}

/// Maximum-likelihood fit with bounded multi-start simplex search.
///
/// `warm` seeds the first start; otherwise a scale heuristic is used.
/// Remaining starts are drawn uniformly in the log-bounds box from `rng`.
pub fn fit_gp_raw(
    points: &[f64],
    d: usize,
    y: &DVector<f64>,
    bounds: &HyperBounds,
    cfg: &GpConfig,
    warm: Option<&GpParams>,
    rng: &mut ChaCha8Rng,
) -> Result<GpFit> {
    let n = y.len();
    if n < 2 {
        return Err(Error::argument(format!("fit_gp needs at least 2 points, got {n}")));
    }
    let optim_bounds = bounds.to_optim(d, cfg.per_dim_lengthscale);

    let objective = |p: &[f64]| -> f64 {
        let params = GpParams::from_log_vec(p, cfg.per_dim_lengthscale);
        match neg_profiled_lml(points, d, y, &params) {
            Some(v) => v,
            None => f64::INFINITY,
        }
    };

    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(cfg.restarts.max(1));
    match warm {
        Some(w) => {
            let mut v = w.to_log_vec(d, cfg.per_dim_lengthscale);
            optim_bounds.clamp(&mut v);
            starts.push(v);
        }
        None => {
            // heuristic start: mid-box signal, quarter-diagonal lengthscale,
            // modest noise
            let mut v = optim_bounds.center();
            let dim = v.len();
            v[0] = bounds.log_signal.1 - 3.0;
            for l in v.iter_mut().take(dim - 1).skip(1) {
                *l = bounds.log_length.1 - (10.0f64 / 0.25).ln();
            }
            v[dim - 1] = bounds.log_noise.1 - (10.0f64).ln();
            optim_bounds.clamp(&mut v);
            starts.push(v);
        }
    }
    for _ in 1..cfg.restarts.max(1) {
        let v: Vec<f64> = optim_bounds
            .lo
            .iter()
            .zip(&optim_bounds.hi)
            .map(|(lo, hi)| rng.gen_range(*lo..*hi))
            .collect();
        starts.push(v);
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        let r = nelder_mead(objective, s, &optim_bounds, cfg.max_evals, cfg.tol);
        if r.value.is_finite() && best.as_ref().map_or(true, |(_, v)| r.value < *v) {
            best = Some((r.x, r.value));
        }
    }

    let (x, value) = best.ok_or(Error::Fit {
        msg: "all restarts produced non-finite likelihood".to_string(),
        best_objective: f64::INFINITY,
    })?;
    let params = GpParams::from_log_vec(&x, cfg.per_dim_lengthscale);
    let fit = GpFit::with_hyperparams(points, d, y, &params.kernel, params.sigma2)?;
    debug_assert!((fit.lml + value).abs() <= 1e-6 * (1.0 + value.abs()));
    Ok(fit)
}

pub fn fit_gp(
    data: &Dataset,
    bounds: &HyperBounds,
    cfg: &GpConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GpFit> {
    fit_gp_raw(
        data.points_flat(),
        data.dim(),
        &data.y_vector(),
        bounds,
        cfg,
        None,
        rng,
    )
}

/// Negative log marginal likelihood with the constant mean profiled out.
fn neg_profiled_lml(points: &[f64], d: usize, y: &DVector<f64>, p: &GpParams) -> Option<f64> {
    let n = y.len();
    let mut a = cov_matrix(points, d, &p.kernel, 0.0).ok()?;
    a.add_diagonal(p.sigma2);
    let chol = a.cholesky().ok()?;
    let ones = DVector::from_element(n, 1.0);
    let u = chol.solve_vec(y);
    let v = chol.solve_vec(&ones);
    let denom = ones.dot(&v);
    if denom <= 0.0 || !denom.is_finite() {
        return None;
    }
    let mu = ones.dot(&u) / denom;
    let quad = y.dot(&u) - 2.0 * mu * ones.dot(&u) + mu * mu * denom;
    let lml = -0.5 * (quad + chol.log_det() + n as f64 * LN_2PI);
    lml.is_finite().then_some(-lml)
}

/// Predictive mean and variance at `xstar`; variance clamped at
/// `1e-12 * signal_variance`. Also returns the raw (unclamped) variance.
pub fn predict_gp_raw(fit: &GpFit, points: &[f64], d: usize, xstar: &[f64]) -> (f64, f64, f64) {
    let c = cov_vector(points, d, xstar, &fit.kernel);
    let mean = fit.mu_hat + c.dot(&fit.alpha);
    let prior = se_kernel_unchecked(xstar, xstar, &fit.kernel);
    let raw = prior - fit.chol.quad_form(&c);
    let var = raw.max(VAR_CLAMP_REL * fit.kernel.signal_variance);
    (mean, var, raw)
}

/// Predictive distribution of the latent function value at `xstar`.
pub fn predict_gp(fit: &GpFit, data: &Dataset, xstar: &[f64]) -> (f64, f64) {
    let (mean, var, _) = predict_gp_raw(fit, data.points_flat(), data.dim(), xstar);
    (mean, var)
}
