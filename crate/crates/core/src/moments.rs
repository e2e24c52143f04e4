//! Observable moments: linear mean and covariance, probit thresholds and
//! tetrachoric correlations, and orthant probabilities.

use crate::model::{Link, ModelParams, UnrestrictedRhoParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MomentError {
    #[error("correlation {0} is outside (-1, 1)")]
    BadCorrelation(f64),
    #[error("this operation needs the {0:?} link")]
    WrongLink(Link),
    #[error("reduced loading of item {0} has norm at least 1")]
    NotReduced(usize),
    #[error("{0} items requested; at most {1} are supported")]
    TooManyItems(usize, usize),
    #[error("item index {0} out of range")]
    BadItem(usize),
    #[error("latent covariance is not positive definite")]
    NotPositiveDefinite,
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * p)
}

// Gauss-Legendre half-rules (weight, abscissa) with 6, 12 and 20 points.
#[allow(clippy::excessive_precision)]
const GL6: [(f64, f64); 3] = [
    (0.1713244923791705, -0.9324695142031522),
    (0.3607615730481384, -0.6612093864662647),
    (0.4679139345726904, -0.2386191860831970),
];
#[allow(clippy::excessive_precision)]
const GL12: [(f64, f64); 6] = [
    (0.04717533638651177, -0.9815606342467191),
    (0.1069393259953183, -0.9041172563704750),
    (0.1600783285433464, -0.7699026741943050),
    (0.2031674267230659, -0.5873179542866171),
    (0.2334925365383547, -0.3678314989981802),
    (0.2491470458134029, -0.1252334085114692),
];
#[allow(clippy::excessive_precision)]
const GL20: [(f64, f64); 10] = [
    (0.01761400713915212, -0.9931285991850949),
    (0.04060142980038694, -0.9639719272779138),
    (0.06267204833410906, -0.9122344282513259),
    (0.08327674157670475, -0.8391169718222188),
    (0.1019301198172404, -0.7463319064601508),
    (0.1181945319615184, -0.6360536807265150),
    (0.1316886384491766, -0.5108670019508271),
    (0.1420961093183821, -0.3737060887154196),
    (0.1491729864726037, -0.2277858511416451),
    (0.1527533871307259, -0.07652652113349733),
];

/// P(X₁ ≥ a, X₂ ≥ b) for a standard bivariate normal with correlation `rho`.
///
/// Drezner-Wesolowsky reduction with Genz's refinements: Gauss-Legendre
/// quadrature in arcsin(ρ) for |ρ| ≤ 0.925 and an expansion around the
/// singular limit beyond that. Absolute error is near 1e-15.
pub fn phi2(a: f64, b: f64, rho: f64) -> Result<f64, MomentError> {
    if !(rho.abs() < 1.0) {
        return Err(MomentError::BadCorrelation(rho));
    }
    Ok(bvn_upper(a, b, rho))
}

fn bvn_upper(dh: f64, dk: f64, r: f64) -> f64 {
    let rule: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let two_pi = 2.0 * PI;
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    if r.abs() < 0.925 {
        let mut bvn = 0.0;
        if r != 0.0 {
            let hs = (h * h + k * k) / 2.0;
            let asr = r.asin();
            for &(w, x) in rule {
                for sgn in [-1.0, 1.0] {
                    let sn = (asr * (sgn * x + 1.0) / 2.0).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr / (2.0 * two_pi);
        }
        return bvn + norm_cdf(-h) * norm_cdf(-k);
    }
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    let mut bvn = 0.0;
    if r.abs() < 1.0 {
        let a_s = (1.0 - r) * (1.0 + r);
        let mut a = a_s.sqrt();
        let b_s = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * (-(b_s / a_s + hk) / 2.0).exp()
            * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        if hk > -160.0 {
            let b = b_s.sqrt();
            bvn -= (-hk / 2.0).exp()
                * two_pi.sqrt()
                * norm_cdf(-b / a)
                * b
                * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
        }
        a /= 2.0;
        for &(w, x) in rule {
            for sgn in [-1.0, 1.0] {
                let xs = (a * (sgn * x + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                let asr = -(b_s / xs + hk) / 2.0;
                if asr > -100.0 {
                    bvn += a
                        * w
                        * asr.exp()
                        * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        bvn = -bvn / two_pi;
    }
    if r > 0.0 {
        bvn + norm_cdf(-h.max(k))
    } else {
        bvn = -bvn;
        if k > h {
            if h < 0.0 {
                bvn += norm_cdf(k) - norm_cdf(h);
            } else {
                bvn += norm_cdf(-h) - norm_cdf(-k);
            }
        }
        bvn
    }
}

/// Linear model mean `d` and covariance `AΣAᵀ + diag(λ)`.
pub fn implied_covariance_linear(p: &ModelParams) -> Result<(DVector<f64>, DMatrix<f64>), MomentError> {
    linear_from_parts(p, &p.latent_cov)
}

/// Same as [`implied_covariance_linear`] with ρ in the latent covariance.
pub fn implied_covariance_linear_rho(p: &UnrestrictedRhoParams) -> Result<(DVector<f64>, DMatrix<f64>), MomentError> {
    linear_from_parts(&p.base, &p.full_latent_cov())
}

fn linear_from_parts(p: &ModelParams, sigma: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>), MomentError> {
    let Some(lam) = &p.unique_vars else {
        return Err(MomentError::WrongLink(Link::Linear));
    };
    let a = p.loadings();
    let mut cov = a * sigma * a.transpose();
    for j in 0..cov.nrows() {
        cov[(j, j)] += lam[j];
    }
    Ok((p.intercepts.clone(), cov))
}

/// Reduced loadings `a_j / sqrt(a_jᵀ Σ a_j + 1)`, one row per item.
pub fn reduce_loadings(p: &ModelParams) -> DMatrix<f64> {
    reduce_with(p.loadings(), &p.latent_cov)
}

pub fn reduce_with(a: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for j in 0..a.nrows() {
        let row = a.row(j);
        let q = (row * sigma * row.transpose())[(0, 0)];
        out.row_mut(j).scale_mut(1.0 / (q + 1.0).sqrt());
    }
    out
}

/// Inverse of [`reduce_with`]: `ã_j / sqrt(1 - ã_jᵀ Σ ã_j)`.
pub fn recover_loadings(reduced: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>, MomentError> {
    let mut out = reduced.clone();
    for j in 0..reduced.nrows() {
        let row = reduced.row(j);
        let q = (row * sigma * row.transpose())[(0, 0)];
        if !(q < 1.0) {
            return Err(MomentError::NotReduced(j));
        }
        out.row_mut(j).scale_mut(1.0 / (1.0 - q).sqrt());
    }
    Ok(out)
}

/// Thresholds and tetrachoric correlations of a probit model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbitMoments {
    pub thresholds: Vec<f64>,
    pub tetrachoric: Vec<Vec<f64>>,
}

impl ProbitMoments {
    pub fn tetrachoric_matrix(&self) -> DMatrix<f64> {
        let n = self.thresholds.len();
        DMatrix::from_fn(n, n, |i, j| self.tetrachoric[i][j])
    }

    /// P(Y_j = 1) for each item.
    pub fn marginals(&self) -> Vec<f64> {
        self.thresholds.iter().map(|&t| norm_cdf(-t)).collect()
    }
}

pub fn probit_moments(p: &ModelParams) -> Result<ProbitMoments, MomentError> {
    if p.link != Link::Probit {
        return Err(MomentError::WrongLink(Link::Probit));
    }
    Ok(probit_from_parts(p.loadings(), &p.latent_cov, &p.intercepts))
}

pub fn probit_moments_rho(p: &UnrestrictedRhoParams) -> Result<ProbitMoments, MomentError> {
    if p.base.link != Link::Probit {
        return Err(MomentError::WrongLink(Link::Probit));
    }
    Ok(probit_from_parts(p.base.loadings(), &p.full_latent_cov(), &p.base.intercepts))
}

fn probit_from_parts(a: &DMatrix<f64>, sigma: &DMatrix<f64>, d: &DVector<f64>) -> ProbitMoments {
    let j = a.nrows();
    let thresholds = (0..j)
        .map(|i| {
            let row = a.row(i);
            let q = (row * sigma * row.transpose())[(0, 0)];
            -d[i] / (q + 1.0).sqrt()
        })
        .collect();
    let red = reduce_with(a, sigma);
    let mut c = &red * sigma * red.transpose();
    for i in 0..j {
        c[(i, i)] = 1.0;
    }
    let tetrachoric = (0..j).map(|i| c.row(i).iter().copied().collect()).collect();
    ProbitMoments { thresholds, tetrachoric }
}

/// First and second observable moments for either link, as one vector and
/// one matrix: (mean, covariance) or (thresholds, tetrachorics).
#[derive(Debug, Clone, PartialEq)]
pub struct Observables {
    pub first: DVector<f64>,
    pub second: DMatrix<f64>,
}

impl Observables {
    /// Max-norm distance over both parts.
    pub fn distance(&self, other: &Observables) -> f64 {
        if self.first.len() != other.first.len() {
            return f64::INFINITY;
        }
        (&self.first - &other.first).amax().max((&self.second - &other.second).amax())
    }
}

pub fn observables(p: &ModelParams) -> Result<Observables, MomentError> {
    match p.link {
        Link::Linear => {
            let (first, second) = implied_covariance_linear(p)?;
            Ok(Observables { first, second })
        }
        Link::Probit => Ok(to_obs(probit_moments(p)?)),
    }
}

pub fn observables_rho(p: &UnrestrictedRhoParams) -> Result<Observables, MomentError> {
    match p.base.link {
        Link::Linear => {
            let (first, second) = implied_covariance_linear_rho(p)?;
            Ok(Observables { first, second })
        }
        Link::Probit => Ok(to_obs(probit_moments_rho(p)?)),
    }
}

fn to_obs(m: ProbitMoments) -> Observables {
    Observables { first: DVector::from_vec(m.thresholds.clone()), second: m.tetrachoric_matrix() }
}

/// Accuracy controls for [`joint_prob`].
#[derive(Debug, Clone, Copy)]
pub struct QmcConfig {
    pub target_se: f64,
    pub shifts: usize,
    pub initial_points: usize,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for QmcConfig {
    fn default() -> Self {
        QmcConfig { target_se: 2e-5, shifts: 16, initial_points: 256, max_points: 1 << 20, seed: 17 }
    }
}

/// Largest number of items [`joint_prob`] accepts.
pub const MAX_JOINT_ITEMS: usize = 8;

/// Probability estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// P(Y_j = pattern_j for every listed item) under a probit model.
///
/// Integrates the orthant probability of the standardized latent responses
/// by separation of variables with randomly shifted rank-1 lattice rules.
pub fn joint_prob(p: &ModelParams, items: &[usize], pattern: &[bool], cfg: &QmcConfig) -> Result<Estimate, MomentError> {
    let m = probit_moments(p)?;
    let k = items.len();
    if k > MAX_JOINT_ITEMS {
        return Err(MomentError::TooManyItems(k, MAX_JOINT_ITEMS));
    }
    if let Some(&bad) = items.iter().find(|&&j| j >= p.n_items()) {
        return Err(MomentError::BadItem(bad));
    }
    assert_eq!(items.len(), pattern.len(), "one response per item");
    // ξ_j ≥ τ_j means a response of 1.
    let lower: Vec<f64> = items
        .iter()
        .zip(pattern)
        .map(|(&j, &y)| if y { m.thresholds[j] } else { f64::NEG_INFINITY })
        .collect();
    let upper: Vec<f64> = items
        .iter()
        .zip(pattern)
        .map(|(&j, &y)| if y { f64::INFINITY } else { m.thresholds[j] })
        .collect();
    let corr = DMatrix::from_fn(k, k, |a, b| m.tetrachoric[items[a]][items[b]]);
    orthant_prob(&corr, &lower, &upper, cfg)
}

/// P(lower < X < upper) for X ~ N(0, corr).
pub fn orthant_prob(corr: &DMatrix<f64>, lower: &[f64], upper: &[f64], cfg: &QmcConfig) -> Result<Estimate, MomentError> {
    let k = corr.nrows();
    if k == 0 {
        return Ok(Estimate { value: 1.0, se: 0.0 });
    }
    let chol = corr.clone().cholesky().ok_or(MomentError::NotPositiveDefinite)?.l();
    let primes = [2.0f64, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0];
    let gen: Vec<f64> = primes.iter().map(|p| p.sqrt().fract()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut n = cfg.initial_points;
    loop {
        let mut means = Vec::with_capacity(cfg.shifts);
        for _ in 0..cfg.shifts {
            let shift: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let mut acc = 0.0;
            let mut w = vec![0.0; k];
            let mut y = vec![0.0; k];
            for i in 1..=n {
                for t in 0..k.saturating_sub(1) {
                    let u = (i as f64 * gen[t] + shift[t]).fract();
                    // Tent transform periodizes the integrand.
                    w[t] = (2.0 * u - 1.0).abs();
                }
                acc += sov_integrand(&chol, lower, upper, &w, &mut y);
            }
            means.push(acc / n as f64);
        }
        let m = means.iter().sum::<f64>() / means.len() as f64;
        let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (means.len() as f64 - 1.0);
        let se = (var / means.len() as f64).sqrt();
        if se <= cfg.target_se || n >= cfg.max_points {
            return Ok(Estimate { value: m, se });
        }
        n *= 2;
    }
}

fn sov_integrand(l: &DMatrix<f64>, lower: &[f64], upper: &[f64], w: &[f64], y: &mut [f64]) -> f64 {
    let k = l.nrows();
    let mut f = 1.0;
    for i in 0..k {
        let s: f64 = (0..i).map(|j| l[(i, j)] * y[j]).sum();
        let lii = l[(i, i)];
        let d = norm_cdf((lower[i] - s) / lii);
        let e = norm_cdf((upper[i] - s) / lii);
        f *= e - d;
        if f <= 0.0 {
            return 0.0;
        }
        if i + 1 < k {
            let u = (d + w[i] * (e - d)).clamp(1e-16, 1.0 - 1e-16);
            y[i] = norm_quantile(u);
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    /// Plackett's identity: dΦ₂/dρ is the bivariate density, so integrate it
    /// from 0 with composite Simpson.
    fn phi2_oracle(a: f64, b: f64, rho: f64) -> f64 {
        let dens = |r: f64| {
            let q = (a * a - 2.0 * r * a * b + b * b) / (1.0 - r * r);
            (-q / 2.0).exp() / (2.0 * PI * (1.0 - r * r).sqrt())
        };
        let n = 20_000;
        let h = rho / n as f64;
        let mut s = dens(0.0) + dens(rho);
        for i in 1..n {
            s += dens(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        (1.0 - norm_cdf(a)) * (1.0 - norm_cdf(b)) + s * h / 3.0
    }

    #[test]
    fn phi2_closed_forms() {
        assert!((phi2(0.0, 0.0, 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((phi2(0.0, 0.0, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let (a, b) = (0.3, -1.1);
        assert!((phi2(a, b, 0.0).unwrap() - (1.0 - norm_cdf(a)) * (1.0 - norm_cdf(b))).abs() < 1e-15);
        assert!(phi2(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn phi2_matches_plackett_integral() {
        for &(a, b) in &[(0.0, 0.0), (0.5, -0.7), (-1.5, -0.2), (1.2, 2.0), (-2.0, 1.0)] {
            for i in -19..=19 {
                let rho = i as f64 * 0.05;
                let got = phi2(a, b, rho).unwrap();
                let want = phi2_oracle(a, b, rho);
                assert!((got - want).abs() < 1e-9, "a={a} b={b} rho={rho}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn phi2_is_monotone_in_rho() {
        for &(a, b) in &[(0.0, 0.0), (0.5, -0.7), (1.2, 2.0)] {
            let mut last = 0.0;
            for i in -99..=99 {
                let v = phi2(a, b, i as f64 / 100.0).unwrap();
                assert!(v >= last - 1e-15);
                last = v;
            }
        }
    }

    #[test]
    fn covariance_examples() {
        let p = fixtures::case(1, Link::Linear).unwrap();
        let (_, cov) = implied_covariance_linear(&p).unwrap();
        assert!((cov[(0, 1)] - 5.0).abs() < 1e-12);
        // Items 1 and 11 sit in different testlets.
        assert!((cov[(0, 10)] - 2.0).abs() < 1e-12);
        let mut z = p.clone();
        z.structure.loadings.fill(0.0);
        let (_, cov) = implied_covariance_linear(&z).unwrap();
        assert_eq!(cov, DMatrix::from_diagonal(z.unique_vars.as_ref().unwrap()));
        let min_eig = implied_covariance_linear(&p).unwrap().1.symmetric_eigenvalues().min();
        assert!(min_eig >= 1.0 - 1e-10);
    }

    #[test]
    fn reduce_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 2.0]);
        let r = reduce_with(&a, &DMatrix::identity(2, 2));
        assert_eq!(r.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert!((r[(1, 0)] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((r[(1, 1)] - 2.0 / 6f64.sqrt()).abs() < 1e-15);
        let bad = DMatrix::from_row_slice(1, 2, &[0.8, 0.6]);
        assert_eq!(recover_loadings(&bad, &DMatrix::identity(2, 2)), Err(MomentError::NotReduced(0)));
    }

    #[test]
    fn probit_examples() {
        let p = fixtures::case(1, Link::Probit).unwrap();
        let m = probit_moments(&p).unwrap();
        let want = 1.0 - norm_cdf(-1.51 / 6f64.sqrt());
        assert!((m.marginals()[0] - want).abs() < 1e-15);
        // Item 1 (testlet 1) and item 21 (testlet 3), main loading 1 each.
        let s21 = (1.0f64 + 0.63 * 0.63 + 1.0).sqrt();
        assert!((m.tetrachoric[0][20] - 1.0 / (6f64.sqrt() * s21)).abs() < 1e-15);
        let mut z = p.clone();
        z.intercepts.fill(0.0);
        assert!(probit_moments(&z).unwrap().thresholds.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn joint_prob_low_dimensions() {
        let p = fixtures::case(1, Link::Probit).unwrap();
        let cfg = QmcConfig::default();
        let m = probit_moments(&p).unwrap();
        let one = joint_prob(&p, &[3], &[true], &cfg).unwrap();
        assert!((one.value - m.marginals()[3]).abs() < 1e-14);
        let two = joint_prob(&p, &[0, 12], &[true, true], &cfg).unwrap();
        let exact = phi2(m.thresholds[0], m.thresholds[12], m.tetrachoric[0][12]).unwrap();
        assert!(two.se <= 1e-4);
        assert!((two.value - exact).abs() < 3.0 * two.se.max(1e-9) + 1e-6);
        assert!(joint_prob(&p, &[0; 9], &[true; 9], &cfg).is_err());
    }

    #[test]
    fn joint_prob_three_items_against_grid() {
        let p = fixtures::case(1, Link::Probit).unwrap();
        let m = probit_moments(&p).unwrap();
        let items = [0usize, 12, 25];
        let t: Vec<f64> = items.iter().map(|&j| m.thresholds[j]).collect();
        let c = |a: usize, b: usize| m.tetrachoric[items[a]][items[b]];
        // Condition on the first variable on a dense grid; the remaining pair
        // is bivariate normal.
        let n = 4000;
        let (lo, hi) = (t[0], 9.0);
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let s1 = (1.0 - c(0, 1) * c(0, 1)).sqrt();
            let s2 = (1.0 - c(0, 2) * c(0, 2)).sqrt();
            let r = (c(1, 2) - c(0, 1) * c(0, 2)) / (s1 * s2);
            let inner = phi2((t[1] - c(0, 1) * x) / s1, (t[2] - c(0, 2) * x) / s2, r).unwrap();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * norm_pdf(x) * inner;
        }
        let grid = acc * h;
        let qmc = joint_prob(&p, &items, &[true; 3], &QmcConfig::default()).unwrap();
        assert!((qmc.value - grid).abs() < 1e-3, "{} vs {}", qmc.value, grid);
        let mixed = joint_prob(&p, &items, &[true, false, true], &QmcConfig::default()).unwrap();
        assert!(mixed.value > 0.0 && mixed.value < 1.0);
    }
}
