//! Stochastic EM for probit bifactor models.
//!
//! Each iteration draws the augmented responses Z given the data and the
//! current traits, then the traits η from their exact Gaussian conditional,
//! and then takes a few gradient steps on the complete-data log-likelihood
//! of (A, d). Extended models also refresh Σ_G from the trait draws. The
//! estimate is the mean of the sign-normalized iterates after burn-in.

use super::{FitError, FitResult, TracePoint};
use crate::linalg::project_to_correlation;
use crate::model::{Link, LoadingStructure, ModelKind, ModelParams};
use crate::moments::{norm_cdf, norm_quantile};
use crate::simulate::stream_rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::rngs::SmallRng;
use rand::SeedableRng;
use rand_distr::{Exp1, StandardNormal};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StemConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    /// Gradient step as a fraction of the inverse curvature bound.
    pub step_size: f64,
    /// Gradient steps per iteration.
    pub m_steps: usize,
    /// Inner gradient loop stops early below this max-norm.
    pub grad_tol: f64,
    /// Abort when any parameter exceeds this in absolute value.
    pub divergence: f64,
    pub seed: u64,
    /// Record a trace point every this many iterations.
    pub trace_every: usize,
    /// Extended models keep Σ_G at its starting value for this fraction of
    /// the burn-in, so the loadings settle before the correlations move.
    pub sigma_hold: f64,
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig {
            n_iter: 3000,
            burn_in: 1500,
            step_size: 1.0,
            m_steps: 5,
            grad_tol: 1e-10,
            divergence: 100.0,
            seed: 1,
            trace_every: 100,
            sigma_hold: 0.2,
        }
    }
}

impl StemConfig {
    /// The full protocol: 10,000 iterations with 5,000 burn-in.
    pub fn full_scale() -> StemConfig {
        StemConfig { n_iter: 10_000, burn_in: 5_000, ..StemConfig::default() }
    }

    pub fn check(&self) -> Result<(), FitError> {
        if self.burn_in >= self.n_iter {
            return Err(FitError::Config("burn_in must be below n_iter".into()));
        }
        if !(0.0..=1.0).contains(&self.sigma_hold) {
            return Err(FitError::Config("sigma_hold must lie in [0, 1]".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(FitError::Config("step size must be positive".into()));
        }
        Ok(())
    }
}

/// Truncation points at or above this use the inverse-CDF tail draw.
pub const TAIL_START: f64 = 2.0;

/// X ~ N(0, 1) conditioned on X > a.
///
/// Below zero plain rejection accepts at least half the time. Between zero
/// and [`TAIL_START`] an exponential proposal with the optimal rate accepts
/// at least three times in four. In the tail the draw inverts the upper
/// tail probability, x = −Φ⁻¹(u·Φ(−a)), which stays accurate far out
/// because it never forms 1 − Φ(a).
pub fn sample_tail<R: Rng + ?Sized>(rng: &mut R, a: f64) -> f64 {
    if a < 0.0 {
        loop {
            let x: f64 = rng.sample(StandardNormal);
            if x > a {
                return x;
            }
        }
    }
    if a >= TAIL_START {
        let q = norm_cdf(-a);
        if q > 1e-300 {
            let u: f64 = 1.0 - rng.random::<f64>();
            let x = -norm_quantile(u * q);
            if x > a {
                return x;
            }
        }
    }
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = rng.sample(Exp1);
        let x = a + e / rate;
        let u: f64 = rng.random();
        if u <= (-0.5 * (x - rate) * (x - rate)).exp() {
            return x;
        }
    }
}

/// Sufficient statistics of one complete-data draw (Z, η).
#[derive(Debug, Clone, PartialEq)]
pub struct CompleteData {
    pub n: f64,
    pub s_eta: DVector<f64>,
    pub s_etaeta: DMatrix<f64>,
    pub s_z: DVector<f64>,
    pub s_zz: DVector<f64>,
    /// K×J, column j is Σ_i η_i Z_ij.
    pub s_etaz: DMatrix<f64>,
}

impl CompleteData {
    pub fn from_draws(z: &DMatrix<f64>, eta: &DMatrix<f64>) -> CompleteData {
        let ones = DVector::from_element(z.nrows(), 1.0);
        CompleteData {
            n: z.nrows() as f64,
            s_eta: eta.transpose() * &ones,
            s_etaeta: eta.transpose() * eta,
            s_z: z.transpose() * &ones,
            s_zz: DVector::from_fn(z.ncols(), |j, _| z.column(j).norm_squared()),
            s_etaz: eta.transpose() * z,
        }
    }

    /// Σ_ij −½ (Z_ij − d_j − a_jᵀη_i)², up to a constant.
    pub fn loglik(&self, a: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
        let mut ll = 0.0;
        for j in 0..a.nrows() {
            let aj = a.row(j).transpose();
            let quad = (&self.s_etaeta * &aj).dot(&aj);
            ll += self.s_zz[j] - 2.0 * d[j] * self.s_z[j] - 2.0 * aj.dot(&self.s_etaz.column(j))
                + self.n * d[j] * d[j]
                + 2.0 * d[j] * aj.dot(&self.s_eta)
                + quad;
        }
        -0.5 * ll
    }

    /// Gradient of [`Self::loglik`] in A (zero off the pattern) and d.
    pub fn gradient(&self, a: &DMatrix<f64>, d: &DVector<f64>, pattern: &DMatrix<bool>) -> (DMatrix<f64>, DVector<f64>) {
        let mut ga = DMatrix::zeros(a.nrows(), a.ncols());
        let mut gd = DVector::zeros(a.nrows());
        for j in 0..a.nrows() {
            let aj = a.row(j).transpose();
            gd[j] = self.s_z[j] - self.n * d[j] - aj.dot(&self.s_eta);
            let g = self.s_etaz.column(j) - &self.s_eta * d[j] - &self.s_etaeta * &aj;
            for k in 0..a.ncols() {
                if pattern[(j, k)] {
                    ga[(j, k)] = g[k];
                }
            }
        }
        (ga, gd)
    }

    /// Gradient ascent on (A, d), item by item. The step for item j is
    /// `step_size` over the trace of its curvature, which bounds the
    /// largest eigenvalue.
    pub fn m_step(&self, a: &mut DMatrix<f64>, d: &mut DVector<f64>, pattern: &DMatrix<bool>, cfg: &StemConfig) {
        for j in 0..a.nrows() {
            let cols: Vec<usize> = (0..a.ncols()).filter(|&k| pattern[(j, k)]).collect();
            let trace = self.n + cols.iter().map(|&k| self.s_etaeta[(k, k)]).sum::<f64>();
            let lr = cfg.step_size / trace;
            for _ in 0..cfg.m_steps {
                let mut gd = self.s_z[j] - self.n * d[j];
                let mut ga = vec![0.0; cols.len()];
                for (q, &k) in cols.iter().enumerate() {
                    gd -= a[(j, k)] * self.s_eta[k];
                    let mut g = self.s_etaz[(k, j)] - d[j] * self.s_eta[k];
                    for &l in &cols {
                        g -= self.s_etaeta[(k, l)] * a[(j, l)];
                    }
                    ga[q] = g;
                }
                let gmax = ga.iter().fold(gd.abs(), |m, g| m.max(g.abs()));
                if gmax < cfg.grad_tol * self.n {
                    break;
                }
                d[j] += lr * gd;
                for (q, &k) in cols.iter().enumerate() {
                    a[(j, k)] += lr * ga[q];
                }
            }
        }
    }
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Draw Z given Y and the linear predictor.
pub fn draw_z<R: Rng + ?Sized>(rng: &mut R, y: &DMatrix<f64>, eta: &DMatrix<f64>, a: &DMatrix<f64>, d: &DVector<f64>, z: &mut DMatrix<f64>) {
    let lin = eta * a.transpose();
    for j in 0..y.ncols() {
        let dj = d[j];
        for i in 0..y.nrows() {
            let mu = lin[(i, j)] + dj;
            z[(i, j)] = if y[(i, j)] > 0.5 { mu + sample_tail(rng, -mu) } else { mu - sample_tail(rng, mu) };
        }
    }
}

/// Conditional of each η_i given Z_i: mean V Aᵀ(Z_i − d) and covariance
/// V = (Σ⁻¹ + AᵀA)⁻¹, shared by all respondents.
pub fn eta_conditional(a: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sinv = sigma.clone().cholesky()?.inverse();
    Some((sinv + a.transpose() * a).cholesky()?.inverse())
}

/// Draw η given Z.
pub fn draw_eta<R: Rng + ?Sized>(
    rng: &mut R,
    z: &DMatrix<f64>,
    a: &DMatrix<f64>,
    d: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>, FitError> {
    let v = eta_conditional(a, sigma).ok_or(FitError::NotPositiveDefinite)?;
    let lv = v.clone().cholesky().ok_or(FitError::NotPositiveDefinite)?.l();
    let mut zc = z.clone();
    for j in 0..z.ncols() {
        zc.column_mut(j).add_scalar_mut(-d[j]);
    }
    Ok(zc * (a * v) + normal_matrix(rng, z.nrows(), a.ncols()) * lv.transpose())
}

/// Unit-diagonal testlet correlations from the trait draws.
fn sigma_update(eta: &DMatrix<f64>) -> DMatrix<f64> {
    let k = eta.ncols();
    let g = k - 1;
    let tl = eta.columns(1, g);
    let m = tl.transpose() * tl;
    let raw = DMatrix::from_fn(g, g, |a, b| m[(a, b)] / (m[(a, a)] * m[(b, b)]).sqrt());
    let proj = project_to_correlation(&raw, 1e-6);
    let mut sigma = DMatrix::identity(k, k);
    sigma.view_mut((1, 1), (g, g)).copy_from(&proj);
    sigma
}

fn initial_intercepts(y: &DMatrix<f64>) -> DVector<f64> {
    let n = y.nrows() as f64;
    DVector::from_fn(y.ncols(), |j, _| {
        let p = (y.column(j).sum() / n).clamp(0.5 / n, 1.0 - 0.5 / n);
        norm_quantile(p)
    })
}

/// Fit a probit model with the sparsity pattern of `structure` to 0/1 data.
/// Only standard and extended kinds are supported.
pub fn stem_fit(y: &DMatrix<f64>, structure: &LoadingStructure, kind: ModelKind, cfg: &StemConfig) -> Result<FitResult, FitError> {
    stem_fit_stream(y, structure, kind, cfg, 0)
}

/// As [`stem_fit`] with the chain on RNG stream `stream` of `cfg.seed`.
pub fn stem_fit_stream(
    y: &DMatrix<f64>,
    structure: &LoadingStructure,
    kind: ModelKind,
    cfg: &StemConfig,
    stream: u64,
) -> Result<FitResult, FitError> {
    check_input(y, structure, kind)?;
    let pattern = structure.pattern();
    let (j, k) = (structure.n_items(), structure.n_factors());
    let start = ModelParams {
        structure: LoadingStructure {
            loadings: DMatrix::from_fn(j, k, |r, c| if pattern[(r, c)] { 0.5 } else { 0.0 }),
            ..structure.clone()
        },
        intercepts: initial_intercepts(y),
        latent_cov: DMatrix::identity(k, k),
        unique_vars: None,
        kind,
        link: Link::Probit,
    };
    stem_fit_from(y, &start, cfg, stream)
}

fn check_input(y: &DMatrix<f64>, structure: &LoadingStructure, kind: ModelKind) -> Result<(), FitError> {
    if kind == ModelKind::TwoTier || structure.n_primary != 1 {
        return Err(FitError::Config("StEM supports standard and extended models only".into()));
    }
    if y.nrows() == 0 || y.ncols() != structure.n_items() {
        return Err(FitError::Data(format!("expected N×{} responses, got {}×{}", structure.n_items(), y.nrows(), y.ncols())));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(FitError::Data("probit responses must be 0 or 1".into()));
    }
    Ok(())
}

/// Run the chain from `start`, whose structure also gives the pattern.
pub fn stem_fit_from(y: &DMatrix<f64>, start: &ModelParams, cfg: &StemConfig, stream: u64) -> Result<FitResult, FitError> {
    cfg.check()?;
    let structure = &start.structure;
    let kind = start.kind;
    check_input(y, structure, kind)?;
    let (n, j, k) = (y.nrows(), y.ncols(), structure.n_factors());
    let pattern = structure.pattern();
    // The chain runs on a fast generator seeded from the (seed, stream) key.
    let mut rng = SmallRng::from_rng(&mut stream_rng(cfg.seed, stream));
    let mut a = start.loadings().clone();
    let mut d = start.intercepts.clone();
    let mut sigma = start.latent_cov.clone();
    let mut eta = DMatrix::zeros(n, k);
    let mut z = DMatrix::zeros(n, j);

    let kept = (cfg.n_iter - cfg.burn_in) as f64;
    let hold = (cfg.sigma_hold * cfg.burn_in as f64) as usize;
    let mut sum_a = DMatrix::zeros(j, k);
    let mut sq_a = DMatrix::zeros(j, k);
    let mut sum_d = DVector::zeros(j);
    let mut sq_d = DVector::zeros(j);
    let mut sum_s = DMatrix::zeros(k, k);
    let mut sq_s = DMatrix::zeros(k, k);
    let mut trace = Vec::new();
    let template = ModelParams {
        structure: structure.clone(),
        intercepts: d.clone(),
        latent_cov: sigma.clone(),
        unique_vars: None,
        kind,
        link: Link::Probit,
    };

    for it in 0..cfg.n_iter {
        draw_z(&mut rng, y, &eta, &a, &d, &mut z);
        eta = draw_eta(&mut rng, &z, &a, &d, &sigma)?;
        if kind == ModelKind::Extended && k > 2 && it >= hold {
            sigma = sigma_update(&eta);
        }
        let stats = CompleteData::from_draws(&z, &eta);
        stats.m_step(&mut a, &mut d, &pattern, cfg);
        let worst = a.amax().max(d.amax());
        if !worst.is_finite() || worst > cfg.divergence {
            return Err(FitError::Diverged { iteration: it, value: worst });
        }
        if cfg.trace_every > 0 && (it + 1) % cfg.trace_every == 0 {
            trace.push(TracePoint {
                iteration: it + 1,
                complete_loglik: stats.loglik(&a, &d) / (n * j) as f64,
                mean_abs_loading: a.iter().map(|x| x.abs()).sum::<f64>() / pattern.iter().filter(|&&b| b).count() as f64,
            });
        }
        if it >= cfg.burn_in {
            let mut cur = template.clone();
            cur.structure.loadings = a.clone();
            cur.intercepts = d.clone();
            cur.latent_cov = sigma.clone();
            let cur = cur.normalize_signs().unwrap_or(cur);
            sum_a += &cur.structure.loadings;
            sq_a += cur.structure.loadings.component_mul(&cur.structure.loadings);
            sum_d += &cur.intercepts;
            sq_d += cur.intercepts.component_mul(&cur.intercepts);
            sum_s += &cur.latent_cov;
            sq_s += cur.latent_cov.component_mul(&cur.latent_cov);
        }
    }
    let sd = |sum: f64, sq: f64| ((sq / kept - (sum / kept).powi(2)).max(0.0)).sqrt();
    let mut est = template;
    est.structure.loadings = &sum_a / kept;
    est.intercepts = &sum_d / kept;
    let mut s = &sum_s / kept;
    if kind == ModelKind::Extended && k > 2 {
        let g = k - 1;
        let block = project_to_correlation(&s.view((1, 1), (g, g)).into_owned(), 1e-6);
        s.view_mut((1, 1), (g, g)).copy_from(&block);
    }
    est.latent_cov = s;
    let est = est.normalize_signs().unwrap_or(est);
    Ok(FitResult {
        sd_loadings: sum_a.zip_map(&sq_a, sd),
        sd_intercepts: sum_d.zip_map(&sq_d, sd),
        sd_latent_cov: sum_s.zip_map(&sq_s, sd),
        estimates: est,
        iterations: cfg.n_iter,
        kept: cfg.n_iter - cfg.burn_in,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::simulate::simulate;

    #[test]
    fn tail_sampler_moments() {
        // E[X | X > a] = φ(a)/Φ(−a).
        let mut rng = stream_rng(4, 0);
        for a in [-1.0, 0.0, 0.7, 2.2, 5.0] {
            let n = 40_000;
            let xs: Vec<f64> = (0..n).map(|_| sample_tail(&mut rng, a)).collect();
            assert!(xs.iter().all(|&x| x > a));
            let mean = xs.iter().sum::<f64>() / n as f64;
            let want = crate::moments::norm_pdf(a) / norm_cdf(-a);
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((mean - want).abs() < 4.0 * (var / n as f64).sqrt(), "a={a}");
        }
        assert!(sample_tail(&mut rng, 45.0) > 45.0);
    }

    #[test]
    fn gibbs_eta_conditional_on_toy() {
        // Two items in one testlet, fixed Z: the η draws must match the
        // Gaussian conditional.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.8, -0.4]);
        let d = DVector::from_row_slice(&[0.2, -0.1]);
        let sigma = DMatrix::identity(2, 2);
        let z = DMatrix::from_row_slice(1, 2, &[0.9, -0.3]);
        let v = eta_conditional(&a, &sigma).unwrap();
        let mean = &v * a.transpose() * (z.row(0).transpose() - &d);
        let mut rng = stream_rng(8, 0);
        let n = 50_000;
        let draws: Vec<DMatrix<f64>> = (0..n).map(|_| draw_eta(&mut rng, &z, &a, &d, &sigma).unwrap()).collect();
        for c in 0..2 {
            let m = draws.iter().map(|e| e[(0, c)]).sum::<f64>() / n as f64;
            assert!((m - mean[c]).abs() < 4.0 * (v[(c, c)] / n as f64).sqrt());
            let var = draws.iter().map(|e| (e[(0, c)] - mean[c]).powi(2)).sum::<f64>() / n as f64;
            assert!((var - v[(c, c)]).abs() < 4.0 * v[(c, c)] * (2.0 / n as f64).sqrt());
        }
        let cov = draws.iter().map(|e| (e[(0, 0)] - mean[0]) * (e[(0, 1)] - mean[1])).sum::<f64>() / n as f64;
        assert!((cov - v[(0, 1)]).abs() < 4.0 * (v[(0, 0)] * v[(1, 1)] / n as f64).sqrt());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = stream_rng(2, 0);
        let z = normal_matrix(&mut rng, 50, 4);
        let eta = normal_matrix(&mut rng, 50, 3);
        let cd = CompleteData::from_draws(&z, &eta);
        let pattern = DMatrix::from_fn(4, 3, |r, c| c == 0 || c == 1 + r / 2);
        let a = DMatrix::from_fn(4, 3, |r, c| if pattern[(r, c)] { 0.3 + 0.1 * (r + c) as f64 } else { 0.0 });
        let d = DVector::from_row_slice(&[0.1, -0.2, 0.3, 0.0]);
        let (ga, gd) = cd.gradient(&a, &d, &pattern);
        let h = 1e-5;
        for j in 0..4 {
            let mut up = d.clone();
            up[j] += h;
            let mut dn = d.clone();
            dn[j] -= h;
            let fd = (cd.loglik(&a, &up) - cd.loglik(&a, &dn)) / (2.0 * h);
            assert!((fd - gd[j]).abs() <= 1e-6 * gd[j].abs().max(1.0));
        }
        let mut up = a.clone();
        up[(2, 2)] += h;
        let mut dn = a.clone();
        dn[(2, 2)] -= h;
        let fd = (cd.loglik(&up, &d) - cd.loglik(&dn, &d)) / (2.0 * h);
        assert!((fd - ga[(2, 2)]).abs() <= 1e-6 * ga[(2, 2)].abs().max(1.0));
        assert_eq!(ga[(0, 2)], 0.0);
    }

    #[test]
    fn null_model_intercepts() {
        let mut p = fixtures::case(4, Link::Probit).unwrap();
        p.intercepts.fill(0.0);
        p.structure.loadings.scale_mut(1e-3);
        let ds = simulate(&p, 2000, 3).unwrap();
        let cfg = StemConfig { n_iter: 200, burn_in: 100, ..Default::default() };
        let fit = stem_fit(&ds.values, &p.structure, p.kind, &cfg).unwrap();
        assert!(fit.estimates.intercepts.amax() < 0.15);
    }

    #[test]
    fn bad_config_and_data() {
        let p = fixtures::case(4, Link::Probit).unwrap();
        let y = DMatrix::from_element(3, 13, 1.0);
        let cfg = StemConfig { n_iter: 10, burn_in: 10, ..Default::default() };
        assert!(matches!(stem_fit(&y, &p.structure, p.kind, &cfg), Err(FitError::Config(_))));
        let y = DMatrix::from_element(3, 13, 0.5);
        assert!(matches!(stem_fit(&y, &p.structure, p.kind, &Default::default()), Err(FitError::Data(_))));
    }
}
