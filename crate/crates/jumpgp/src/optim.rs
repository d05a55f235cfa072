//! Derivative-free bounded minimization (Nelder–Mead simplex).
//!
//! Box constraints are enforced through a sigmoid reparametrization, so the
//! simplex itself moves in an unconstrained space. Good enough for the
//! low-dimensional (<= 7 parameter) hyperparameter searches in this crate.

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(a, b)| a < b), "bounds must have lo < hi");
        Bounds { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn clamp(&self, p: &mut [f64]) {
        for (v, (lo, hi)) in p.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn to_unconstrained(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (lo, hi))| {
                let u = ((v - lo) / (hi - lo)).clamp(1e-9, 1.0 - 1e-9);
                (u / (1.0 - u)).ln()
            })
            .collect()
    }

    fn to_constrained(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (lo, hi))| {
                let s = 1.0 / (1.0 + (-v).exp());
                lo + (hi - lo) * s
            })
            .collect()
    }
}

pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimize `f` inside `bounds` starting from `start`.
///
/// Non-finite objective values are treated as +inf, so the simplex backs
/// away from regions where e.g. a Cholesky factorization fails.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    bounds: &Bounds,
    max_evals: usize,
    tol: f64,
) -> MinimizeResult {
    let n = bounds.dim();
    let mut evals = 0usize;
    let eval = |t: &[f64], f: &mut F, evals: &mut usize| -> f64 {
        let p = bounds.to_constrained(t);
        *evals += 1;
        let v = f(&p);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    // initial simplex: start plus one perturbed vertex per coordinate
    let t0 = bounds.to_unconstrained(start);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(&t0, &mut f, &mut evals);
    simplex.push((t0.clone(), v0));
    for k in 0..n {
        let mut t = t0.clone();
        t[k] += 0.7;
        let v = eval(&t, &mut f, &mut evals);
        simplex.push((t, v));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if worst.is_finite() && (worst - best).abs() <= tol * (1.0 + best.abs()) {
            converged = true;
            break;
        }

        // centroid of all but the worst vertex
        let mut centroid = vec![0.0; n];
        for (t, _) in simplex.iter().take(n) {
            for (c, v) in centroid.iter_mut().zip(t) {
                *c += v / n as f64;
            }
        }

        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&simplex[n].0)
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        let fr = eval(&reflect, &mut f, &mut evals);

        if fr < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&reflect)
                .map(|(c, r)| c + gamma * (r - c))
                .collect();
            let fe = eval(&expand, &mut f, &mut evals);
            simplex[n] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflect, fr);
        } else {
            let contract: Vec<f64> = if fr < simplex[n].1 {
                centroid
                    .iter()
                    .zip(&reflect)
                    .map(|(c, r)| c + rho * (r - c))
                    .collect()
            } else {
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + rho * (w - c))
                    .collect()
            };
            let fc = eval(&contract, &mut f, &mut evals);
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (contract, fc);
            } else {
                // shrink toward the best vertex
                let best_t = simplex[0].0.clone();
                for vert in simplex.iter_mut().skip(1) {
                    for (t, b) in vert.0.iter_mut().zip(&best_t) {
                        *t = b + sigma * (*t - *b);
                    }
                    vert.1 = eval(&vert.0, &mut f, &mut evals);
                }
            }
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    MinimizeResult {
        x: bounds.to_constrained(&simplex[0].0),
        value: simplex[0].1,
        evals,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let b = Bounds::new(vec![-5.0, -5.0], vec![5.0, 5.0]);
        let r = nelder_mead(
            |p| (p[0] - 1.0).powi(2) + 3.0 * (p[1] + 2.0).powi(2),
            &[0.0, 0.0],
            &b,
            400,
            1e-12,
        );
        assert!((r.x[0] - 1.0).abs() < 1e-4, "{:?}", r.x);
        assert!((r.x[1] + 2.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn respects_bounds() {
        let b = Bounds::new(vec![0.5], vec![2.0]);
        // unconstrained minimum at 0, outside the box
        let r = nelder_mead(|p| p[0] * p[0], &[1.0], &b, 300, 1e-12);
        assert!(r.x[0] >= 0.5 && r.x[0] <= 2.0);
        assert!((r.x[0] - 0.5).abs() < 1e-3, "{}", r.x[0]);
    }

    #[test]
    fn survives_non_finite_regions() {
        let b = Bounds::new(vec![-4.0], vec![4.0]);
        let r = nelder_mead(
            |p| if p[0] < 0.0 { f64::NAN } else { (p[0] - 2.0).powi(2) },
            &[3.5],
            &b,
            300,
            1e-12,
        );
        assert!((r.x[0] - 2.0).abs() < 1e-3);
    }
}
