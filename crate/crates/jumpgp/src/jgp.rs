//! Local jump GP: neighborhood selection, latent-region classification-EM,
//! and prediction through the selected subset.
//!
//! For a test location `x*`, the `n` nearest training points are classified
//! by a latent binary label: in the same regime as `x*`, or not. Points
//! labelled out-of-regime receive a constant dummy likelihood `U`; in-regime
//! points follow a stationary GP with constant mean `m*`. A logistic score
//! on a linear boundary function supplies the label prior. Inference is a
//! hard-assignment EM: the E-step is replaced by a pointwise MAP
//! classification, and the M-step refits the GP hyperparameters (on the
//! selected subset) and the boundary weights (penalized logistic
//! regression).

use std::collections::HashMap;

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{euclidean, Dataset};
use crate::error::{Error, Result};
use crate::gp::{fit_gp_raw, predict_gp_raw, GpConfig, GpFit, GpParams, HyperBounds};
use crate::kernel::{cov_vector, KernelSpec};

/// Numerically stable logistic function.
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Prior membership probability `logistic(omega^T [1, x])`.
pub fn membership_prob(x: &[f64], omega: &[f64]) -> Result<f64> {
    if omega.len() != x.len() + 1 {
        return Err(Error::argument(format!(
            "membership_prob: omega has length {}, expected {}",
            omega.len(),
            x.len() + 1
        )));
    }
    let mut t = omega[0];
    for (w, v) in omega[1..].iter().zip(x) {
        t += w * v;
    }
    Ok(logistic(t))
}

/// The `n` nearest training points to a test location, ordered by distance
/// (ties broken by lowest index).
#[derive(Debug, Clone)]
pub struct LocalSet {
    center: Vec<f64>,
    indices: Vec<usize>,
    dists: Vec<f64>,
}

impl LocalSet {
    /// Assemble from pre-sorted members; used by the neighborhood update.
    pub(crate) fn from_sorted(center: Vec<f64>, indices: Vec<usize>, dists: Vec<f64>) -> Self {
        debug_assert!(dists.windows(2).all(|w| w[0] <= w[1]));
        LocalSet { center, indices, dists }
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn distances(&self) -> &[f64] {
        &self.dists
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Distance from the center to the farthest member.
    pub fn radius(&self) -> f64 {
        *self.dists.last().expect("local set is never empty")
    }

    /// Flat row-major buffer of the member points plus their responses.
    pub fn gather_points(&self, data: &Dataset) -> (Vec<f64>, DVector<f64>) {
        data.gather(&self.indices)
    }
}

/// Select the `n` nearest points to `xstar` by Euclidean distance.
pub fn select_neighborhood(data: &Dataset, xstar: &[f64], n: usize) -> Result<LocalSet> {
    if n == 0 || n > data.len() {
        return Err(Error::argument(format!(
            "select_neighborhood: n = {} out of range 1..={}",
            n,
            data.len()
        )));
    }
    if xstar.len() != data.dim() {
        return Err(Error::argument("select_neighborhood: dimension mismatch".to_string()));
    }
    let mut order: Vec<(f64, usize)> = (0..data.len())
        .map(|i| (euclidean(data.point(i), xstar), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(n);
    Ok(LocalSet {
        center: xstar.to_vec(),
        indices: order.iter().map(|(_, i)| *i).collect(),
        dists: order.iter().map(|(d, _)| *d).collect(),
    })
}

/// Classification-EM settings.
#[derive(Debug, Clone)]
pub struct CemConfig {
    /// Maximum CEM iterations per start.
    pub max_iter: usize,
    /// Restarts for the final full hyperparameter refit.
    pub final_restarts: usize,
    /// Restarts for the warm-started refits inside the loop.
    pub inner_restarts: usize,
    /// Re-optimize (theta*, sigma^2) every M-step; when false only the
    /// constant mean and caches are refreshed between label updates.
    pub refit_hyper_every_iter: bool,
    /// C-step density conditions on the other selected points instead of
    /// the marginal N(m*, s^2 + sigma^2) form.
    pub conditional_cstep: bool,
    /// Freeze the boundary weights at their initial value.
    pub disable_boundary_update: bool,
    /// Override the dummy likelihood constant (default: reciprocal local
    /// response range).
    pub u_override: Option<f64>,
    /// L2 penalty on the boundary weights.
    pub ridge_lambda: f64,
    pub per_dim_lengthscale: bool,
    /// Simplex budget per GP refit.
    pub gp_max_evals: usize,
    /// Extra label/refit rounds allowed after the final full refit.
    pub final_recheck_rounds: usize,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            max_iter: 50,
            final_restarts: 5,
            inner_restarts: 1,
            refit_hyper_every_iter: true,
            conditional_cstep: false,
            disable_boundary_update: false,
            u_override: None,
            ridge_lambda: 1e-4,
            per_dim_lengthscale: false,
            gp_max_evals: 160,
            final_recheck_rounds: 3,
        }
    }
}

/// Converged CEM state for one test location. Immutable after fitting.
#[derive(Debug, Clone)]
pub struct JgpModel {
    center: Vec<f64>,
    /// Boundary weights in recentered coordinates:
    /// `g(x) = omega[0] + omega[1..] . (x - center)`.
    pub omega: DVector<f64>,
    pub z_hat: Vec<bool>,
    /// `p_hat[i] = logistic(g(x_i))` for every local point.
    pub p_hat: Vec<f64>,
    /// Local indices with `z_hat = 1`, ascending.
    pub selected: Vec<usize>,
    pub m_star_hat: f64,
    pub kernel_star: KernelSpec,
    pub sigma2_hat: f64,
    /// Mean weights on the selected responses; sums to one.
    pub alpha: DVector<f64>,
    /// Covariance weights `(sigma^2 I + C)^{-1} c*` at the center.
    pub beta: DVector<f64>,
    pub u_const: f64,
    pub converged: bool,
    pub forced_selection: bool,
    pub iterations: usize,
    /// Complete-data log-likelihood after each accepted iteration.
    pub objective_trace: Vec<f64>,
    dim: usize,
    sel_points: Vec<f64>,
    sel_y: DVector<f64>,
    /// Parent-dataset index -> label, for warm starts on shifted
    /// neighborhoods.
    parent_labels: HashMap<usize, bool>,
    fit: GpFit,
}

impl JgpModel {
    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn n_selected(&self) -> usize {
        self.selected.len()
    }

    pub fn selected_points(&self) -> &[f64] {
        &self.sel_points
    }

    pub fn selected_responses(&self) -> &DVector<f64> {
        &self.sel_y
    }

    pub fn gp_fit(&self) -> &GpFit {
        &self.fit
    }

    /// Membership probability of an arbitrary point under the fitted
    /// boundary.
    pub fn membership(&self, x: &[f64]) -> f64 {
        let mut t = self.omega[0];
        for k in 0..self.dim {
            t += self.omega[k + 1] * (x[k] - self.center[k]);
        }
        logistic(t)
    }

    /// Membership probability of the test location itself.
    pub fn p_star(&self) -> f64 {
        logistic(self.omega[0])
    }

    /// Complete-data log-likelihood of the converged state.
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace never empty")
    }
}

/// Predictive mean and variance at `xstar` through the selected subset
/// (variance clamped at `1e-12 * signal_variance`).
pub fn predict_jgp(model: &JgpModel, xstar: &[f64]) -> (f64, f64) {
    let (mean, var, _) = predict_gp_raw(&model.fit, &model.sel_points, model.dim, xstar);
    (mean, var)
}

/// Mean/covariance weight vectors at an arbitrary test location:
/// `alpha = 1^T A^{-1} / (1^T A^{-1} 1)`, `beta = A^{-1} c*` with
/// `A = sigma^2 I + C**`.
pub fn weights_alpha_beta_raw(
    sel_points: &[f64],
    d: usize,
    kernel: &KernelSpec,
    sigma2: f64,
    xstar: &[f64],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = sel_points.len() / d;
    let fit = GpFit::with_hyperparams(sel_points, d, &DVector::zeros(n), kernel, sigma2)?;
    let ones = DVector::from_element(n, 1.0);
    let v = fit.chol().solve_vec(&ones);
    let alpha = &v / ones.dot(&v);
    let c = cov_vector(sel_points, d, xstar, kernel);
    let beta = fit.chol().solve_vec(&c);
    Ok((alpha, beta))
}

/// Weight vectors of a fitted model at `xstar`.
pub fn weights_alpha_beta(model: &JgpModel, xstar: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let n = model.n_selected();
    let ones = DVector::from_element(n, 1.0);
    let v = model.fit.chol().solve_vec(&ones);
    let alpha = &v / ones.dot(&v);
    let c = cov_vector(&model.sel_points, model.dim, xstar, &model.kernel_star);
    let beta = model.fit.chol().solve_vec(&c);
    (alpha, beta)
}

/// Predictive mean rewritten through the weight vectors:
/// `sum_i alpha_i y_i + sum_j sum_i alpha_i beta_j (y_j - y_i)`.
/// Cross-checks the direct predictive equation.
pub fn mean_via_weights(model: &JgpModel, xstar: &[f64]) -> f64 {
    let (alpha, beta) = weights_alpha_beta(model, xstar);
    let y = &model.sel_y;
    let n = y.len();
    let mut mean = 0.0;
    for i in 0..n {
        mean += alpha[i] * y[i];
    }
    for j in 0..n {
        for i in 0..n {
            mean += alpha[i] * beta[j] * (y[j] - y[i]);
        }
    }
    mean
}

// ---------------------------------------------------------------------------
// CEM internals
// ---------------------------------------------------------------------------

const LN_2PI: f64 = 1.8378770664093453;

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

/// Penalized logistic regression of labels on `[1, x - center]` by Newton
/// iteration with step halving. The ridge keeps separable label sets finite.
fn fit_omega(
    points: &[f64],
    d: usize,
    center: &[f64],
    z: &[bool],
    lambda: f64,
    init: Option<&DVector<f64>>,
) -> DVector<f64> {
    let n = z.len();
    let p = d + 1;
    let row = |i: usize, k: usize| -> f64 {
        if k == 0 {
            1.0
        } else {
            points[i * d + (k - 1)] - center[k - 1]
        }
    };
    let nll = |w: &DVector<f64>| -> f64 {
        let mut v = lambda * w.norm_squared();
        for i in 0..n {
            let mut t = 0.0;
            for k in 0..p {
                t += w[k] * row(i, k);
            }
            // -log Bernoulli(z_i | logit t) = softplus(t) - z_i t
            let soft = if t > 0.0 { t + (1.0 + (-t).exp()).ln() } else { (1.0 + t.exp()).ln() };
            v += soft - if z[i] { t } else { 0.0 };
        }
        v
    };

    let mut w = init.cloned().unwrap_or_else(|| DVector::zeros(p));
    let mut cur = nll(&w);
    for _ in 0..50 {
        let mut grad = &w * (2.0 * lambda);
        let mut hess = nalgebra::DMatrix::<f64>::identity(p, p) * (2.0 * lambda);
        for i in 0..n {
            let mut t = 0.0;
            for k in 0..p {
                t += w[k] * row(i, k);
            }
            let pi = logistic(t);
            let r = pi - if z[i] { 1.0 } else { 0.0 };
            let wgt = (pi * (1.0 - pi)).max(1e-12);
            for k in 0..p {
                grad[k] += r * row(i, k);
                for l in 0..=k {
                    let v = wgt * row(i, k) * row(i, l);
                    hess[(k, l)] += v;
                    if l != k {
                        hess[(l, k)] += v;
                    }
                }
            }
        }
        if grad.amax() < 1e-9 {
            break;
        }
        let step = match nalgebra::linalg::Cholesky::new(hess) {
            Some(c) => c.solve(&grad),
            None => break,
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..25 {
            let cand = &w - &step * scale;
            let v = nll(&cand);
            if v <= cur {
                w = cand;
                cur = v;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    w
}

fn membership_recentered(points: &[f64], d: usize, center: &[f64], omega: &DVector<f64>) -> Vec<f64> {
    let n = points.len() / d;
    (0..n)
        .map(|i| {
            let mut t = omega[0];
            for k in 0..d {
                t += omega[k + 1] * (points[i * d + k] - center[k]);
            }
            logistic(t)
        })
        .collect()
}

/// MAP label rule: select point `i` iff
/// `p(y_i | in-regime) * pi_i >= U * (1 - pi_i)`.
#[allow(clippy::too_many_arguments)]
fn cstep_rule(
    points: &[f64],
    d: usize,
    y: &[f64],
    params: &GpParams,
    m_star: f64,
    pis: &[f64],
    selected: &[usize],
    u: f64,
    conditional: bool,
) -> Vec<bool> {
    let n = y.len();
    let mut dens = vec![0.0; n];
    if !conditional {
        let var = params.kernel.signal_variance + params.sigma2;
        for i in 0..n {
            dens[i] = normal_logpdf(y[i], m_star, var).exp();
        }
    } else {
        // density of y_i given the other selected points
        for i in 0..n {
            let others: Vec<usize> = selected.iter().copied().filter(|&j| j != i).collect();
            if others.len() < 2 {
                let var = params.kernel.signal_variance + params.sigma2;
                dens[i] = normal_logpdf(y[i], m_star, var).exp();
                continue;
            }
            let mut pts = Vec::with_capacity(others.len() * d);
            let mut ys = Vec::with_capacity(others.len());
            for &j in &others {
                pts.extend_from_slice(&points[j * d..(j + 1) * d]);
                ys.push(y[j]);
            }
            let yv = DVector::from_vec(ys);
            match GpFit::with_hyperparams(&pts, d, &yv, &params.kernel, params.sigma2) {
                Ok(fit) => {
                    let (mean, var, _) = predict_gp_raw(&fit, &pts, d, &points[i * d..(i + 1) * d]);
                    dens[i] = normal_logpdf(y[i], mean, var + params.sigma2).exp();
                }
                Err(_) => {
                    let var = params.kernel.signal_variance + params.sigma2;
                    dens[i] = normal_logpdf(y[i], m_star, var).exp();
                }
            }
        }
    }
    (0..n).map(|i| dens[i] * pis[i] >= u * (1.0 - pis[i])).collect()
}

/// Ensure at least two selected points; the two nearest are forced in when
/// the rule deselects almost everything. Returns true when forcing applied.
fn force_min_selected(z: &mut [bool]) -> bool {
    let count = z.iter().filter(|&&b| b).count();
    if count >= 2 {
        return false;
    }
    z[0] = true;
    z[1] = true;
    true
}

fn selected_indices(z: &[bool]) -> Vec<usize> {
    z.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

/// Joint complete-data log-likelihood: GP marginal on the selected subset,
/// dummy likelihood on the excluded points, Bernoulli label prior.
fn complete_data_objective(fit_lml: f64, n_excluded: usize, u: f64, z: &[bool], pis: &[f64]) -> f64 {
    let mut obj = fit_lml;
    if n_excluded > 0 {
        obj += n_excluded as f64 * u.max(1e-300).ln();
    }
    for (zi, pi) in z.iter().zip(pis) {
        let p = pi.clamp(1e-300, 1.0);
        let q = (1.0 - pi).clamp(1e-300, 1.0);
        obj += if *zi { p.ln() } else { q.ln() };
    }
    obj
}

struct CemState {
    z: Vec<bool>,
    omega: DVector<f64>,
    fit: GpFit,
    objective: f64,
    forced: bool,
    iterations: usize,
    trace: Vec<f64>,
    converged: bool,
}

struct CemContext<'a> {
    points: Vec<f64>,
    d: usize,
    y: Vec<f64>,
    center: &'a [f64],
    bounds: HyperBounds,
    u: f64,
    cfg: &'a CemConfig,
}

impl CemContext<'_> {
    fn fit_selected(
        &self,
        sel: &[usize],
        warm: Option<&GpParams>,
        restarts: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<GpFit> {
        let (pts, yv) = self.gather(sel);
        let gp_cfg = GpConfig {
            restarts,
            per_dim_lengthscale: self.cfg.per_dim_lengthscale,
            max_evals: self.cfg.gp_max_evals,
            tol: 1e-8,
        };
        fit_gp_raw(&pts, self.d, &yv, &self.bounds, &gp_cfg, warm, rng)
    }

    fn refresh_mean(&self, sel: &[usize], params: &GpParams) -> Result<GpFit> {
        let (pts, yv) = self.gather(sel);
        GpFit::with_hyperparams(&pts, self.d, &yv, &params.kernel, params.sigma2)
    }

    fn gather(&self, sel: &[usize]) -> (Vec<f64>, DVector<f64>) {
        let mut pts = Vec::with_capacity(sel.len() * self.d);
        let mut ys = Vec::with_capacity(sel.len());
        for &i in sel {
            pts.extend_from_slice(&self.points[i * self.d..(i + 1) * self.d]);
            ys.push(self.y[i]);
        }
        (pts, DVector::from_vec(ys))
    }

    fn omega_for(&self, z: &[bool], init: Option<&DVector<f64>>) -> DVector<f64> {
        if self.cfg.disable_boundary_update {
            init.cloned().unwrap_or_else(|| DVector::zeros(self.d + 1))
        } else {
            fit_omega(&self.points, self.d, self.center, z, self.cfg.ridge_lambda, init)
        }
    }

    fn objective_of(&self, z: &[bool], fit: &GpFit, pis: &[f64]) -> f64 {
        let n_excl = z.iter().filter(|&&b| !b).count();
        complete_data_objective(fit.lml, n_excl, self.u, z, pis)
    }

    fn labels_for(&self, z: &[bool], fit: &GpFit, pis: &[f64]) -> (Vec<bool>, bool) {
        let params = GpParams { kernel: fit.kernel.clone(), sigma2: fit.sigma2_hat };
        let mut z_new = cstep_rule(
            &self.points,
            self.d,
            &self.y,
            &params,
            fit.mu_hat,
            pis,
            &selected_indices(z),
            self.u,
            self.cfg.conditional_cstep,
        );
        let forced = force_min_selected(&mut z_new);
        (z_new, forced)
    }

    fn run(
        &self,
        start_z: Vec<bool>,
        init_omega: Option<&DVector<f64>>,
        init_params: Option<&GpParams>,
        rng: &mut ChaCha8Rng,
    ) -> Result<CemState> {
        let mut z = start_z;
        let mut forced = force_min_selected(&mut z);
        let mut omega = self.omega_for(&z, init_omega);
        let first_restarts = if init_params.is_some() {
            self.cfg.inner_restarts
        } else {
            self.cfg.inner_restarts.max(2)
        };
        let mut fit = self.fit_selected(&selected_indices(&z), init_params, first_restarts, rng)?;
        let mut pis = membership_recentered(&self.points, self.d, self.center, &omega);
        let mut obj = self.objective_of(&z, &fit, &pis);
        let mut trace = vec![obj];
        let mut iterations = 0;

        for _ in 0..self.cfg.max_iter {
            let (z_new, forced_now) = self.labels_for(&z, &fit, &pis);
            if z_new == z {
                break;
            }
            iterations += 1;
            let params = GpParams { kernel: fit.kernel.clone(), sigma2: fit.sigma2_hat };
            let omega_new = self.omega_for(&z_new, Some(&omega));
            let sel_new = selected_indices(&z_new);
            let fit_new = if self.cfg.refit_hyper_every_iter {
                self.fit_selected(&sel_new, Some(&params), self.cfg.inner_restarts, rng)?
            } else {
                self.refresh_mean(&sel_new, &params)?
            };
            let pis_new = membership_recentered(&self.points, self.d, self.center, &omega_new);
            let obj_new = self.objective_of(&z_new, &fit_new, &pis_new);
            if obj_new < obj - 1e-9 * (1.0 + obj.abs()) {
                // oscillation guard: keep the better previous iterate
                break;
            }
            z = z_new;
            omega = omega_new;
            fit = fit_new;
            pis = pis_new;
            obj = obj_new;
            forced = forced_now;
            trace.push(obj);
        }

        // final polish: full-restart refit, then confirm the label rule is a
        // fixed point of the returned state; resume briefly if labels move.
        // This phase alone decides the convergence flag.
        let converged;
        let mut rounds = 0;
        loop {
            let params = GpParams { kernel: fit.kernel.clone(), sigma2: fit.sigma2_hat };
            let full =
                self.fit_selected(&selected_indices(&z), Some(&params), self.cfg.final_restarts, rng)?;
            if full.lml > fit.lml {
                fit = full;
                obj = self.objective_of(&z, &fit, &pis);
                if obj > *trace.last().unwrap() {
                    trace.push(obj);
                }
            }
            let (z_check, forced_now) = self.labels_for(&z, &fit, &pis);
            if z_check == z {
                converged = true;
                break;
            }
            rounds += 1;
            if rounds > self.cfg.final_recheck_rounds {
                converged = false;
                break;
            }
            iterations += 1;
            let params = GpParams { kernel: fit.kernel.clone(), sigma2: fit.sigma2_hat };
            let omega_new = self.omega_for(&z_check, Some(&omega));
            let fit_new =
                self.fit_selected(&selected_indices(&z_check), Some(&params), self.cfg.inner_restarts, rng)?;
            let pis_new = membership_recentered(&self.points, self.d, self.center, &omega_new);
            let obj_new = self.objective_of(&z_check, &fit_new, &pis_new);
            if obj_new < obj - 1e-9 * (1.0 + obj.abs()) {
                converged = false;
                break;
            }
            z = z_check;
            omega = omega_new;
            fit = fit_new;
            pis = pis_new;
            obj = obj_new;
            forced = forced_now;
            trace.push(obj);
        }

        Ok(CemState { z, omega, fit, objective: obj, forced, iterations, trace, converged })
    }
}

/// Split 1-d responses into two clusters; labels are true for the cluster
/// containing the first (nearest) point.
fn two_means_nearest_cluster(y: &[f64]) -> Vec<bool> {
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![true; y.len()];
    }
    let (mut c0, mut c1) = (lo, hi);
    let mut assign = vec![false; y.len()];
    for _ in 0..100 {
        let new_assign: Vec<bool> = y.iter().map(|v| (v - c0).abs() <= (v - c1).abs()).collect();
        let n0 = new_assign.iter().filter(|&&b| b).count();
        if n0 == 0 || n0 == y.len() {
            return vec![true; y.len()];
        }
        let s0: f64 = y.iter().zip(&new_assign).filter(|(_, &a)| a).map(|(v, _)| v).sum();
        let s1: f64 = y.iter().zip(&new_assign).filter(|(_, &a)| !a).map(|(v, _)| v).sum();
        let done = new_assign == assign;
        assign = new_assign;
        c0 = s0 / n0 as f64;
        c1 = s1 / (y.len() - n0) as f64;
        if done {
            break;
        }
    }
    if assign[0] {
        assign
    } else {
        assign.iter().map(|b| !b).collect()
    }
}

/// Fit the jump GP at `xstar` by multistart classification-EM.
///
/// Two starts are tried (all points selected; a two-means split on the
/// local responses keyed to the nearest neighbor) and the complete-data
/// log-likelihood picks the winner.
pub fn fit_jgp(
    local: &LocalSet,
    data: &Dataset,
    xstar: &[f64],
    cfg: &CemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<JgpModel> {
    fit_jgp_warm(local, data, xstar, cfg, None, rng)
}

/// [`fit_jgp`] with an optional warm start from a model fitted at a nearby
/// state (used by the acquisition inner loop). A warm start runs a single
/// CEM chain seeded from the warm labels and hyperparameters.
pub fn fit_jgp_warm(
    local: &LocalSet,
    data: &Dataset,
    xstar: &[f64],
    cfg: &CemConfig,
    warm: Option<&JgpModel>,
    rng: &mut ChaCha8Rng,
) -> Result<JgpModel> {
    let n = local.len();
    if n < 4 {
        return Err(Error::argument(format!("fit_jgp needs a local set of at least 4, got {n}")));
    }
    let d = data.dim();
    let (points, yv) = local.gather_points(data);
    let y: Vec<f64> = yv.iter().copied().collect();

    let var_y = {
        let m = y.iter().sum::<f64>() / n as f64;
        y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64
    };
    // Dummy likelihood for out-of-regime points: the density of a
    // two-standard-deviation outlier at the local response scale. Keeps
    // exclusion unattractive for in-regime tail noise while any point a
    // regime jump away is still excluded immediately.
    let u = cfg
        .u_override
        .unwrap_or((-2.0f64).exp() / ((2.0 * std::f64::consts::PI).sqrt() * var_y.sqrt().max(1e-6)));
    let ctx = CemContext {
        points,
        d,
        y,
        center: xstar,
        bounds: HyperBounds::from_scales(data.domain_diagonal(), var_y),
        u,
        cfg,
    };

    let st = match warm {
        Some(w) => {
            // map warm labels through parent indices; points new to the
            // neighborhood fall back to the warm boundary score
            let mut z0 = vec![false; n];
            for (slot, &parent) in local.indices().iter().enumerate() {
                z0[slot] = match w.parent_labels.get(&parent) {
                    Some(&zv) => zv,
                    None => w.membership(data.point(parent)) >= 0.5,
                };
            }
            let params = GpParams { kernel: w.kernel_star.clone(), sigma2: w.sigma2_hat };
            ctx.run(z0, Some(&w.omega), Some(&params), rng)?
        }
        None => {
            // A state that excludes points spends the boundary's d+1
            // parameters; charge it a BIC-style penalty in the multistart
            // comparison so one-off noise outliers cannot buy a split.
            let bic = |st: &CemState| {
                let uses_boundary = st.z.iter().any(|&b| !b);
                st.objective
                    - if uses_boundary { 0.5 * (d + 1) as f64 * (n as f64).ln() } else { 0.0 }
            };
            let mut best: Option<CemState> = None;
            for z0 in [vec![true; n], two_means_nearest_cluster(&ctx.y)] {
                let cand = ctx.run(z0, None, None, rng)?;
                if best.as_ref().map_or(true, |b| bic(&cand) > bic(b)) {
                    best = Some(cand);
                }
            }
            best.expect("at least one CEM start runs")
        }
    };

    let selected = selected_indices(&st.z);
    let mut sel_points = Vec::with_capacity(selected.len() * d);
    let mut sel_y = Vec::with_capacity(selected.len());
    for &i in &selected {
        sel_points.extend_from_slice(&ctx.points[i * d..(i + 1) * d]);
        sel_y.push(ctx.y[i]);
    }
    let sel_y = DVector::from_vec(sel_y);

    let p_hat = membership_recentered(&ctx.points, d, xstar, &st.omega);
    let ones = DVector::from_element(selected.len(), 1.0);
    let v = st.fit.chol().solve_vec(&ones);
    let alpha = &v / ones.dot(&v);
    let c = cov_vector(&sel_points, d, xstar, &st.fit.kernel);
    let beta = st.fit.chol().solve_vec(&c);

    let mut parent_labels = HashMap::new();
    for (slot, &parent) in local.indices().iter().enumerate() {
        parent_labels.insert(parent, st.z[slot]);
    }

    Ok(JgpModel {
        center: xstar.to_vec(),
        omega: st.omega,
        z_hat: st.z,
        p_hat,
        selected,
        m_star_hat: st.fit.mu_hat,
        kernel_star: st.fit.kernel.clone(),
        sigma2_hat: st.fit.sigma2_hat,
        alpha,
        beta,
        u_const: u,
        converged: st.converged,
        forced_selection: st.forced,
        iterations: st.iterations,
        objective_trace: st.trace,
        dim: d,
        sel_points,
        sel_y,
        parent_labels,
        fit: st.fit,
    })
}

/// Apply the converged model's label rule to its own local data. A converged
/// (unforced) fit reproduces `z_hat` exactly — the fixed-point property.
pub fn cstep_labels(
    model: &JgpModel,
    local: &LocalSet,
    data: &Dataset,
    cfg: &CemConfig,
) -> Vec<bool> {
    let (points, yv) = local.gather_points(data);
    let y: Vec<f64> = yv.iter().copied().collect();
    let params = GpParams { kernel: model.kernel_star.clone(), sigma2: model.sigma2_hat };
    let pis = membership_recentered(&points, model.dim, &model.center, &model.omega);
    cstep_rule(
        &points,
        model.dim,
        &y,
        &params,
        model.m_star_hat,
        &pis,
        &model.selected,
        model.u_const,
        cfg.conditional_cstep,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::cov_matrix;
    use crate::linalg::mvn_sample;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn neighborhood_basics() {
        let data = Dataset::new(
            vec![0.0, 0.1, 0.2, 0.9],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![(0.0, 1.0)],
        )
        .unwrap();
        let ls = select_neighborhood(&data, &[0.05], 2).unwrap();
        assert_eq!(ls.indices(), &[0, 1]);
        assert!((ls.radius() - 0.05).abs() < 1e-15);

        let all = select_neighborhood(&data, &[0.05], 4).unwrap();
        assert_eq!(all.len(), 4);
        assert!((all.radius() - 0.85).abs() < 1e-12);

        assert!(select_neighborhood(&data, &[0.05], 5).is_err());

        // query at a training point: that point first, at distance zero
        let at = select_neighborhood(&data, &[0.2], 3).unwrap();
        assert_eq!(at.indices()[0], 2);
        assert_eq!(at.distances()[0], 0.0);
    }

    #[test]
    fn membership_prob_values() {
        assert!((membership_prob(&[3.0, -1.0], &[0.0, 0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        let p = membership_prob(&[0.5, 0.3], &[0.0, 1.0, 0.0]).unwrap();
        assert!((p - 0.6224593312018546).abs() < 1e-12);
        assert!((membership_prob(&[0.0], &[50.0, 0.0]).unwrap() - 1.0).abs() < 1e-20);
        assert!(membership_prob(&[0.0], &[0.0, 0.0, 0.0]).is_err());
    }

    /// Homogeneous local data drawn from one stationary GP.
    fn single_region_dataset(seed: u64, n: usize) -> Dataset {
        let mut r = rng::stream(seed, &[rng::realm::TRUTH]);
        let d = 2;
        let mut xs = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            xs.push(r.gen_range(-0.5..0.5));
        }
        let k = KernelSpec::iso(9.0, 10.0).unwrap();
        let cov = cov_matrix(&xs, d, &k, 1e-8).unwrap();
        let f = mvn_sample(&DVector::zeros(n), &cov, &mut r).unwrap();
        let ys: Vec<f64> = f
            .iter()
            .map(|v| {
                use rand_distr::Distribution;
                let z: f64 = rand_distr::StandardNormal.sample(&mut r);
                v + 2.0 * z
            })
            .collect();
        Dataset::new(xs, ys, vec![(-0.5, 0.5), (-0.5, 0.5)]).unwrap()
    }

    /// 1-d step data: mean 0 left of zero, 27 right, noise sd 2.
    fn step_dataset(seed: u64, n: usize) -> Dataset {
        let mut r = rng::stream(seed, &[rng::realm::TRUTH]);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = r.gen_range(-0.5..0.5);
            use rand_distr::Distribution;
            let z: f64 = rand_distr::StandardNormal.sample(&mut r);
            let f = if x < 0.0 { 0.0 } else { 27.0 };
            xs.push(x);
            ys.push(f + 2.0 * z);
        }
        Dataset::new(xs, ys, vec![(-0.5, 0.5)]).unwrap()
    }

    #[test]
    fn homogeneous_data_selects_everything() {
        let trials = 100;
        let mut all_ones = 0;
        for seed in 0..trials {
            let data = single_region_dataset(1000 + seed, 15);
            let xstar = [0.0, 0.0];
            let local = select_neighborhood(&data, &xstar, 15).unwrap();
            let mut r = rng::stream(seed, &[rng::realm::FIT]);
            let model = fit_jgp(&local, &data, &xstar, &CemConfig::default(), &mut r).unwrap();
            if model.z_hat.iter().all(|&z| z) {
                all_ones += 1;
            }
        }
        assert!(all_ones * 100 >= trials * 95, "{all_ones}/{trials} all-selected");
    }

    #[test]
    fn step_data_classified_correctly() {
        let trials = 100;
        let mut acc_sum = 0.0;
        let mut pure_selected = 0;
        for seed in 0..trials {
            let data = step_dataset(2000 + seed, 30);
            let xstar = [-0.25];
            let local = select_neighborhood(&data, &xstar, 15).unwrap();
            let mut r = rng::stream(seed, &[rng::realm::FIT]);
            let model = fit_jgp(&local, &data, &xstar, &CemConfig::default(), &mut r).unwrap();
            let mut correct = 0;
            let mut sel_pure = true;
            for (slot, &parent) in local.indices().iter().enumerate() {
                let left = data.point(parent)[0] < 0.0;
                if model.z_hat[slot] == left {
                    correct += 1;
                }
                if model.z_hat[slot] && !left {
                    sel_pure = false;
                }
            }
            acc_sum += correct as f64 / local.len() as f64;
            if sel_pure {
                pure_selected += 1;
            }
        }
        let acc = acc_sum / trials as f64;
        assert!(acc >= 0.90, "mean accuracy {acc}");
        assert!(pure_selected * 100 >= trials * 90, "{pure_selected}/{trials} pure");
    }

    #[test]
    fn forced_all_selected_reduces_to_local_gp() {
        let data = step_dataset(7, 20);
        let xstar = [0.1];
        let local = select_neighborhood(&data, &xstar, 12).unwrap();
        let cfg = CemConfig {
            u_override: Some(0.0),
            disable_boundary_update: true,
            ..Default::default()
        };
        let mut r = rng::stream(3, &[rng::realm::FIT]);
        let model = fit_jgp(&local, &data, &xstar, &cfg, &mut r).unwrap();
        assert_eq!(model.n_selected(), 12);
        assert!(model.converged);

        // identical to a stationary GP on the same local data at the same
        // hyperparameters
        let (pts, y) = local.gather_points(&data);
        let fit =
            GpFit::with_hyperparams(&pts, 1, &y, &model.kernel_star, model.sigma2_hat).unwrap();
        let (gm, gv, _) = predict_gp_raw(&fit, &pts, 1, &xstar);
        let (jm, jv) = predict_jgp(&model, &xstar);
        assert!((gm - jm).abs() < 1e-12);
        assert!((gv - jv).abs() < 1e-12);
        assert!((model.m_star_hat - fit.mu_hat).abs() < 1e-12);
    }

    #[test]
    fn objective_trace_monotone_and_fixed_point() {
        for seed in 0..30 {
            let data = step_dataset(3000 + seed, 30);
            let xstar = [-0.2];
            let local = select_neighborhood(&data, &xstar, 15).unwrap();
            let cfg = CemConfig::default();
            let mut r = rng::stream(seed, &[rng::realm::FIT]);
            let model = fit_jgp(&local, &data, &xstar, &cfg, &mut r).unwrap();
            for w in model.objective_trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9 * (1.0 + w[0].abs()),
                    "trace decreased: {:?}",
                    model.objective_trace
                );
            }
            if model.converged && !model.forced_selection {
                let labels = cstep_labels(&model, &local, &data, &cfg);
                assert_eq!(labels, model.z_hat, "seed {seed} not a fixed point");
            }
        }
    }

    #[test]
    fn alpha_sums_to_one_and_mean_identity() {
        for seed in 0..20 {
            let data = step_dataset(4000 + seed, 25);
            let xstar = [0.3];
            let local = select_neighborhood(&data, &xstar, 12).unwrap();
            let mut r = rng::stream(seed, &[rng::realm::FIT]);
            let model = fit_jgp(&local, &data, &xstar, &CemConfig::default(), &mut r).unwrap();
            let sum: f64 = model.alpha.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "alpha sum {sum}");
            let (direct, _) = predict_jgp(&model, &xstar);
            let expanded = mean_via_weights(&model, &xstar);
            assert!(
                (direct - expanded).abs() <= 1e-10 * (1.0 + direct.abs()),
                "direct {direct} vs expanded {expanded}"
            );
        }
    }

    #[test]
    fn weights_edge_cases() {
        let k = KernelSpec::iso(4.0, 1.0).unwrap();
        // single selected point: alpha = [1]
        let (alpha, _) = weights_alpha_beta_raw(&[0.3], 1, &k, 0.5, &[0.0]).unwrap();
        assert_eq!(alpha.len(), 1);
        assert!((alpha[0] - 1.0).abs() < 1e-14);

        // far-apart points: diagonal system, uniform alpha
        let (alpha, _) =
            weights_alpha_beta_raw(&[0.0, 1000.0, 2000.0], 1, &k, 0.5, &[0.0]).unwrap();
        for i in 0..3 {
            assert!((alpha[i] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_match_dense_inverse() {
        let k = KernelSpec::iso(2.0, 0.4).unwrap();
        let sigma2 = 0.3;
        let pts = [0.1, 0.5, 0.8];
        let xstar = [0.4];
        let (alpha, beta) = weights_alpha_beta_raw(&pts, 1, &k, sigma2, &xstar).unwrap();

        let mut a = nalgebra::DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                a[(i, j)] = crate::kernel::se_kernel_unchecked(&pts[i..=i], &pts[j..=j], &k)
                    + if i == j { sigma2 } else { 0.0 };
            }
        }
        let inv = a.try_inverse().unwrap();
        let ones = DVector::from_element(3, 1.0);
        let v = &inv * &ones;
        let denom = ones.dot(&v);
        let c = DVector::from_fn(3, |i, _| {
            crate::kernel::se_kernel_unchecked(&pts[i..=i], &xstar, &k)
        });
        let beta_want = &inv * &c;
        for i in 0..3 {
            assert!((alpha[i] - v[i] / denom).abs() < 1e-12);
            assert!((beta[i] - beta_want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolates_when_noise_free() {
        // sigma^2 -> 0 and x* at a selected training point: mean = y, var ~ 0
        // (lengthscale kept moderate so the covariance stays well-conditioned)
        let data = single_region_dataset(99, 12);
        let xstar = data.point(0).to_vec();
        let local = select_neighborhood(&data, &xstar, 8).unwrap();
        let (pts, y) = local.gather_points(&data);
        let k = KernelSpec::iso(9.0, 0.35).unwrap();
        let fit = GpFit::with_hyperparams(&pts, 2, &y, &k, 1e-10).unwrap();
        let (mean, var, _) = predict_gp_raw(&fit, &pts, 2, &xstar);
        assert!((mean - data.response(0)).abs() < 1e-3, "mean {mean}");
        assert!(var < 1e-6, "var {var}");
    }

    #[test]
    fn permutation_of_dataset_rows_is_irrelevant() {
        let data = step_dataset(55, 24);
        let xstar = [-0.1];
        // permute rows
        let perm: Vec<usize> = (0..data.len()).rev().collect();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &i in &perm {
            xs.extend_from_slice(data.point(i));
            ys.push(data.response(i));
        }
        let permuted = Dataset::new(xs, ys, data.domain().to_vec()).unwrap();

        let cfg = CemConfig::default();
        let la = select_neighborhood(&data, &xstar, 12).unwrap();
        let lb = select_neighborhood(&permuted, &xstar, 12).unwrap();
        let ma = fit_jgp(&la, &data, &xstar, &cfg, &mut rng::stream(1, &[2])).unwrap();
        let mb = fit_jgp(&lb, &permuted, &xstar, &cfg, &mut rng::stream(1, &[2])).unwrap();
        let (mean_a, var_a) = predict_jgp(&ma, &xstar);
        let (mean_b, var_b) = predict_jgp(&mb, &xstar);
        assert!((mean_a - mean_b).abs() < 1e-10);
        assert!((var_a - var_b).abs() < 1e-10);
        let mut pa = ma.p_hat.clone();
        let mut pb = mb.p_hat.clone();
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        for (a, b) in pa.iter().zip(&pb) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn too_small_neighborhood_rejected() {
        let data = step_dataset(1, 10);
        let local = select_neighborhood(&data, &[0.0], 3).unwrap();
        let mut r = rng::stream(0, &[]);
        assert!(fit_jgp(&local, &data, &[0.0], &CemConfig::default(), &mut r).is_err());
    }
}
