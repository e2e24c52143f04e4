//! Least-squares fit of the linear model's covariance structure.

use super::{FitError, FitResult, TracePoint};
use crate::linalg::{is_positive_definite, project_to_correlation};
use crate::model::{Link, LoadingStructure, ModelKind, ModelParams};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFitConfig {
    pub max_iter: usize,
    /// Stop when the gradient max-norm falls below this.
    pub grad_tol: f64,
    pub divergence: f64,
    /// Smallest admissible unique variance.
    pub min_unique: f64,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        LinearFitConfig { max_iter: 50_000, grad_tol: 1e-10, divergence: 100.0, min_unique: 1e-6 }
    }
}

struct Problem<'a> {
    s: &'a DMatrix<f64>,
    pattern: DMatrix<bool>,
    free: Vec<(usize, usize)>,
    /// Start and size of the free latent block.
    block: (usize, usize),
}

#[derive(Clone)]
struct Point {
    a: DMatrix<f64>,
    sigma: DMatrix<f64>,
    lambda: DVector<f64>,
}

impl Problem<'_> {
    fn residual(&self, p: &Point) -> DMatrix<f64> {
        self.s - &p.a * &p.sigma * p.a.transpose() - DMatrix::from_diagonal(&p.lambda)
    }

    fn objective(&self, p: &Point) -> f64 {
        self.residual(p).norm_squared()
    }

    fn gradient(&self, p: &Point) -> Point {
        let e = self.residual(p);
        let ga = (&e * &p.a * &p.sigma * -4.0).zip_map(&self.pattern, |g, on| if on { g } else { 0.0 });
        let ate = p.a.transpose() * &e * &p.a;
        let mut gs = DMatrix::zeros(p.sigma.nrows(), p.sigma.ncols());
        for &(a, b) in &self.free {
            gs[(a, b)] = -4.0 * ate[(a, b)];
            gs[(b, a)] = gs[(a, b)];
        }
        Point { a: ga, sigma: gs, lambda: e.diagonal() * -2.0 }
    }
}

fn free_block(structure: &LoadingStructure, kind: ModelKind) -> (usize, usize) {
    match kind {
        ModelKind::Standard => (0, 0),
        ModelKind::Extended => (1, structure.n_testlets),
        ModelKind::TwoTier => (0, structure.n_primary),
    }
}

fn free_cells(structure: &LoadingStructure, kind: ModelKind) -> Vec<(usize, usize)> {
    let (lo, len) = free_block(structure, kind);
    let free: Vec<usize> = (lo..lo + len).collect();
    let mut out = Vec::new();
    for (i, &a) in free.iter().enumerate() {
        for &b in &free[i + 1..] {
            out.push((a, b));
        }
    }
    out
}

/// Minimize ‖S − AΣAᵀ − diag(λ)‖²_F over the pattern of `structure` by
/// gradient descent with Armijo backtracking. Intercepts are the sample
/// means.
pub fn linear_fit(y: &DMatrix<f64>, structure: &LoadingStructure, kind: ModelKind, cfg: &LinearFitConfig) -> Result<FitResult, FitError> {
    if y.nrows() < 2 || y.ncols() != structure.n_items() {
        return Err(FitError::Data(format!("expected N×{} responses with N ≥ 2", structure.n_items())));
    }
    let n = y.nrows() as f64;
    let means = DVector::from_fn(y.ncols(), |j, _| y.column(j).mean());
    let mut centered = y.clone();
    for j in 0..y.ncols() {
        centered.column_mut(j).add_scalar_mut(-means[j]);
    }
    let s = centered.transpose() * &centered / n;
    linear_fit_covariance(&s, &means, structure, kind, cfg)
}

/// As [`linear_fit`] from a covariance matrix and mean vector.
pub fn linear_fit_covariance(
    s: &DMatrix<f64>,
    means: &DVector<f64>,
    structure: &LoadingStructure,
    kind: ModelKind,
    cfg: &LinearFitConfig,
) -> Result<FitResult, FitError> {
    let k = structure.n_factors();
    let prob = Problem { s, pattern: structure.pattern(), free: free_cells(structure, kind), block: free_block(structure, kind) };
    let mut x = Point {
        a: DMatrix::from_fn(s.nrows(), k, |r, c| if prob.pattern[(r, c)] { 0.5 } else { 0.0 }),
        sigma: DMatrix::identity(k, k),
        lambda: s.diagonal() * 0.5,
    };
    x.lambda.apply(|l| *l = l.max(cfg.min_unique));
    let mut f = prob.objective(&x);
    let mut step = 1e-2;
    let mut trace = Vec::new();
    let mut iterations = 0;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let g = prob.gradient(&x);
        let gmax = g.a.amax().max(g.sigma.amax()).max(g.lambda.amax());
        if gmax < cfg.grad_tol {
            break;
        }
        step *= 2.0;
        let mut accepted = false;
        while step > 1e-16 {
            // Projected step: unique variances are clamped at their floor.
            let mut trial = x.clone();
            trial.a -= &g.a * step;
            trial.sigma -= &g.sigma * step;
            trial.lambda -= &g.lambda * step;
            trial.lambda.apply(|l| *l = l.max(cfg.min_unique));
            if !prob.free.is_empty() && !is_positive_definite(&trial.sigma) {
                let (lo, len) = prob.block;
                let b = project_to_correlation(&trial.sigma.view((lo, lo), (len, len)).into_owned(), 1e-6);
                trial.sigma.view_mut((lo, lo), (len, len)).copy_from(&b);
            }
            {
                let decrease = g.a.dot(&(&x.a - &trial.a))
                    + g.sigma.dot(&(&x.sigma - &trial.sigma)) / 2.0
                    + g.lambda.dot(&(&x.lambda - &trial.lambda));
                let ft = prob.objective(&trial);
                if ft <= f - 1e-4 * decrease {
                    x = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        let worst = x.a.amax().max(x.lambda.amax());
        if !worst.is_finite() || worst > cfg.divergence {
            return Err(FitError::Diverged { iteration: it, value: worst });
        }
        if (it + 1) % 1000 == 0 {
            trace.push(TracePoint {
                iteration: it + 1,
                complete_loglik: -f,
                mean_abs_loading: x.a.iter().map(|v| v.abs()).sum::<f64>() / prob.pattern.iter().filter(|&&b| b).count() as f64,
            });
        }
    }
    let est = ModelParams {
        structure: LoadingStructure { loadings: x.a.clone(), ..structure.clone() },
        intercepts: means.clone(),
        latent_cov: x.sigma.clone(),
        unique_vars: Some(x.lambda.clone()),
        kind,
        link: Link::Linear,
    };
    let est = est.normalize_signs().unwrap_or(est);
    Ok(FitResult {
        sd_loadings: DMatrix::zeros(x.a.nrows(), k),
        sd_intercepts: DVector::zeros(means.len()),
        sd_latent_cov: DMatrix::zeros(k, k),
        estimates: est,
        iterations,
        kept: 1,
        trace,
    })
}
