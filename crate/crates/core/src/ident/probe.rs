//! Numerical search for observationally equivalent parameters.
//!
//! The free parameters are the nonzero loadings of the covariance form and
//! the free latent correlations. Their off-diagonal second moments define a
//! smooth map; a nontrivial null space of its Jacobian at the truth points
//! along directions where equivalent parameters may live. We step along
//! random null directions and pull back onto the equivalence set with
//! Gauss-Newton.

use super::certificate::{any_param_distance, finish, moment_distance, Certificate, Construction, CovForm};
use crate::io::AnyParams;
use crate::model::{ModelKind, ModelParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub restarts: usize,
    pub seed: u64,
    /// Singular values below this fraction of the largest count as null.
    pub null_tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { restarts: 16, seed: 0x9e37, null_tol: 1e-8, max_iter: 60 }
    }
}

const STEPS: [f64; 4] = [0.3, 0.1, 0.03, 0.01];

/// Parameter layout: nonzero loading cells, then free covariance cells.
pub(crate) struct Layout {
    load: Vec<(usize, usize)>,
    cov: Vec<(usize, usize)>,
    base: CovForm,
    target: DVector<f64>,
}

impl Layout {
    pub fn new(p: &ModelParams) -> Layout {
        let s = &p.structure;
        let base = CovForm::of(p);
        let mut load = Vec::new();
        for j in 0..s.n_items() {
            for c in 0..s.n_factors() {
                if s.is_nonzero(s.loadings[(j, c)]) {
                    load.push((j, c));
                }
            }
        }
        let free: Vec<usize> = match p.kind {
            ModelKind::Standard => vec![],
            ModelKind::Extended => (1..s.n_factors()).collect(),
            ModelKind::TwoTier => (0..s.n_primary).collect(),
        };
        let mut cov = Vec::new();
        for (i, &a) in free.iter().enumerate() {
            for &b in &free[i + 1..] {
                cov.push((a, b));
            }
        }
        let mut l = Layout { load, cov, target: DVector::zeros(0), base };
        l.target = l.offdiag(&l.base.at, &l.base.sigma);
        l
    }

    pub fn len(&self) -> usize {
        self.load.len() + self.cov.len()
    }

    pub fn theta(&self) -> DVector<f64> {
        let mut t = DVector::zeros(self.len());
        for (i, &(j, c)) in self.load.iter().enumerate() {
            t[i] = self.base.at[(j, c)];
        }
        for (i, &(a, b)) in self.cov.iter().enumerate() {
            t[self.load.len() + i] = self.base.sigma[(a, b)];
        }
        t
    }

    pub fn unpack(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut at = self.base.at.clone();
        let mut sigma = self.base.sigma.clone();
        for (i, &(j, c)) in self.load.iter().enumerate() {
            at[(j, c)] = theta[i];
        }
        for (i, &(a, b)) in self.cov.iter().enumerate() {
            sigma[(a, b)] = theta[self.load.len() + i];
            sigma[(b, a)] = theta[self.load.len() + i];
        }
        (at, sigma)
    }

    fn offdiag(&self, at: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DVector<f64> {
        let c = at * sigma * at.transpose();
        let n = c.nrows();
        let mut out = DVector::zeros(n * (n - 1) / 2);
        let mut r = 0;
        for k in 0..n {
            for l in k + 1..n {
                out[r] = c[(k, l)];
                r += 1;
            }
        }
        out
    }

    pub fn residual(&self, theta: &DVector<f64>) -> DVector<f64> {
        let (at, sigma) = self.unpack(theta);
        self.offdiag(&at, &sigma) - &self.target
    }

    pub fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let (at, sigma) = self.unpack(theta);
        let m = &at * &sigma;
        let n = at.nrows();
        let mut jac = DMatrix::zeros(n * (n - 1) / 2, self.len());
        let mut r = 0;
        for k in 0..n {
            for l in k + 1..n {
                for (i, &(j, a)) in self.load.iter().enumerate() {
                    if j == k {
                        jac[(r, i)] += m[(l, a)];
                    }
                    if j == l {
                        jac[(r, i)] += m[(k, a)];
                    }
                }
                for (i, &(a, b)) in self.cov.iter().enumerate() {
                    jac[(r, self.load.len() + i)] = at[(k, a)] * at[(l, b)] + at[(k, b)] * at[(l, a)];
                }
                r += 1;
            }
        }
        jac
    }

    /// Orthonormal basis of the Jacobian's null space at `theta`.
    pub fn null_space(&self, theta: &DVector<f64>, tol: f64) -> Vec<DVector<f64>> {
        let jac = self.jacobian(theta);
        let n = jac.ncols();
        let square = if jac.nrows() < n { jac.clone().resize_vertically(n, 0.0) } else { jac };
        let svd = square.svd(false, true);
        let vt = svd.v_t.unwrap();
        let smax = svd.singular_values.max();
        (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] <= tol * smax)
            .map(|i| vt.row(i).transpose())
            .collect()
    }

    /// Gauss-Newton toward a zero residual. Returns the final point and
    /// residual max-norm.
    pub fn project(&self, mut theta: DVector<f64>, max_iter: usize) -> (DVector<f64>, f64) {
        let mut res = self.residual(&theta).amax();
        for _ in 0..max_iter {
            if res < 1e-14 {
                break;
            }
            let r = self.residual(&theta);
            let svd = self.jacobian(&theta).svd(true, true);
            let Ok(step) = svd.solve(&r, 1e-12 * svd.singular_values.max()) else { break };
            let next = &theta - step;
            let nres = self.residual(&next).amax();
            if !(nres < res) {
                break;
            }
            theta = next;
            res = nres;
        }
        (theta, res)
    }

    /// Parameter set at `theta`, sign-normalized, if the uniquenesses stay
    /// positive.
    pub fn params_at(&self, p: &ModelParams, theta: &DVector<f64>) -> Option<ModelParams> {
        let (at, sigma) = self.unpack(theta);
        self.base.rebuild(p, at, sigma, 0.0).ok()?.normalize_signs().ok()
    }
}

fn random_unit(rng: &mut ChaCha8Rng, basis: &[DVector<f64>]) -> DVector<f64> {
    let mut v = DVector::zeros(basis[0].len());
    for b in basis {
        let w: f64 = rng.sample(StandardNormal);
        v += b * w;
    }
    let n = v.amax();
    v / n
}

/// Look for a second parameter set with the same moments. Deterministic
/// given the seed; restarts run in parallel and the first success in
/// restart order wins.
pub fn probe_equivalence(p: &ModelParams, cfg: &ProbeConfig) -> Option<Certificate> {
    let layout = Layout::new(p);
    let theta = layout.theta();
    let basis = layout.null_space(&theta, cfg.null_tol);
    if basis.is_empty() {
        return None;
    }
    (0..cfg.restarts).into_par_iter().find_map_first(|r| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
        let dir = random_unit(&mut rng, &basis);
        STEPS.iter().find_map(|&t| {
            let (th, res) = layout.project(&theta + &dir * t, cfg.max_iter);
            if res > 1e-12 {
                return None;
            }
            let alt = layout.params_at(p, &th)?;
            finish(AnyParams::Restricted(p.clone()), AnyParams::Restricted(alt), Construction::Probe, t).ok()
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub attempts: usize,
    /// Attempts that landed on an admissible parameter set.
    pub admissible: usize,
    /// Admissible sets with moment distance below 1e-6 and parameter
    /// distance above 1e-3.
    pub spurious: usize,
    /// Smallest moment distance among admissible sets farther than 1e-3.
    pub closest_moment_distance: f64,
}

/// Randomly perturb the parameters (free directions, testlet-block
/// rotations and column scalings), pull back toward the original moments,
/// and count distinct parameter sets that match them.
pub fn perturbation_search(p: &ModelParams, attempts: usize, seed: u64) -> PerturbationReport {
    let layout = Layout::new(p);
    let theta = layout.theta();
    let orig = AnyParams::Restricted(p.clone());
    let s = &p.structure;
    let outcomes: Vec<Option<(f64, f64)>> = (0..attempts)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let start = if i % 2 == 0 {
                let eps = rng.random_range(0.02..0.3);
                let v = DVector::from_fn(theta.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                {
                    let n = v.amax();
                    &theta + v / n * eps
                }
            } else {
                let (mut at, mut sigma) = layout.unpack(&theta);
                let g = rng.random_range(0..s.n_testlets);
                let t = s.testlet_col(g);
                let m = rng.random_range(0..s.n_primary);
                let (sn, cs) = rng.random_range(-0.5f64..0.5).sin_cos();
                for j in s.testlet_items(g) {
                    let (x, y) = (at[(j, m)], at[(j, t)]);
                    at[(j, m)] = cs * x + sn * y;
                    at[(j, t)] = -sn * x + cs * y;
                }
                let c = rng.random_range(0..s.n_factors());
                let f = rng.random_range(0.8..1.25);
                at.column_mut(c).scale_mut(f);
                for k in 0..sigma.nrows() {
                    if k != c {
                        sigma[(c, k)] /= f;
                        sigma[(k, c)] /= f;
                    }
                }
                let mut th = DVector::zeros(theta.len());
                for (q, &(j, c)) in layout.load.iter().enumerate() {
                    th[q] = at[(j, c)];
                }
                for (q, &(a, b)) in layout.cov.iter().enumerate() {
                    th[layout.load.len() + q] = sigma[(a, b)].clamp(-0.99, 0.99);
                }
                th
            };
            let (th, _) = layout.project(start, 60);
            let alt = layout.params_at(p, &th)?;
            alt.validate().ok()?;
            let alt = AnyParams::Restricted(alt);
            Some((moment_distance(&orig, &alt), any_param_distance(&orig, &alt)))
        })
        .collect();
    let mut rep = PerturbationReport { attempts, admissible: 0, spurious: 0, closest_moment_distance: f64::INFINITY };
    for (md, pd) in outcomes.into_iter().flatten() {
        rep.admissible += 1;
        if pd > 1e-3 {
            rep.closest_moment_distance = rep.closest_moment_distance.min(md);
            if md < 1e-6 {
                rep.spurious += 1;
            }
        }
    }
    rep
}
