//! Explicit second parameter sets with the same observable moments.
//!
//! Most constructions work on the covariance form of a model: loadings Ã,
//! latent covariance Σ and uniquenesses ψ with second moments ÃΣÃᵀ + diag(ψ).
//! For the linear link Ã = A and ψ = λ. For the probit link Ã holds the
//! reduced loadings and ψ_j = 1 − ã_jᵀΣã_j, and the tetrachoric matrix is
//! exactly ÃΣÃᵀ off the diagonal. A construction changes Ã and Σ so the
//! off-diagonal part is kept, recomputes ψ from the diagonal, and maps back.

use crate::io::AnyParams;
use crate::linalg::is_positive_definite;
use crate::model::{Link, LoadingStructure, ModelKind, ModelParams, UnrestrictedRhoParams};
use crate::moments::{observables, observables_rho, recover_loadings, reduce_with};
use crate::structure::{compute_h1, compute_h2, compute_h3, compute_h6, compute_q, compute_q0};
use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};
use thiserror::Error;

/// A certificate must move the parameters at least this far.
pub const MIN_PARAM_DISTANCE: f64 = 1e-3;
/// And keep the moments within this.
pub const MAX_MOMENT_DISTANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Construction {
    /// Trade a testlet loading between its two (or one) nonzero items.
    Scaling,
    /// Trade the two lone main loadings of two testlets.
    MainScaling,
    /// Rescale the main factor on one testlet and refit the testlet loadings.
    Case2c,
    /// Rotate a main column and a testlet column confined to one testlet.
    Rotation,
    /// Rotate one testlet and re-solve the testlet correlations.
    RhoPerturbation,
    /// Primary-testlet correlations, primary loadings outside the testlet span.
    Theorem10Case1,
    /// Primary-testlet correlations, primary loadings inside the testlet span.
    Theorem10Case2,
    /// Numerical walk along the set of equivalent parameters.
    Probe,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertError {
    #[error("precondition not met: {0}")]
    Precondition(String),
    #[error("knob value {0} is not admissible: {1}")]
    Inadmissible(f64, String),
    #[error("knob value {0} leaves the parameters unchanged")]
    Degenerate(f64),
    #[error("no admissible knob value found")]
    NoKnob,
    #[error("moment check failed: distance {0:e}")]
    MomentMismatch(f64),
}

/// Two parameter sets with (numerically) identical observable moments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    #[serde(serialize_with = "as_spec")]
    pub original: AnyParams,
    #[serde(serialize_with = "as_spec")]
    pub alternate: AnyParams,
    pub construction: Construction,
    /// The c, θ, δ or t value used.
    pub knob: f64,
    pub moment_distance: f64,
    pub param_distance: f64,
}

fn as_spec<S: Serializer>(p: &AnyParams, s: S) -> Result<S::Ok, S::Error> {
    p.to_spec().serialize(s)
}

/// Max-norm distance between the observable moments of the two sets.
pub fn verify_certificate(cert: &Certificate) -> f64 {
    moment_distance(&cert.original, &cert.alternate)
}

pub fn moment_distance(a: &AnyParams, b: &AnyParams) -> f64 {
    let obs = |p: &AnyParams| match p {
        AnyParams::Restricted(p) => observables(p),
        AnyParams::Unrestricted(u) => observables_rho(u),
    };
    match (obs(a), obs(b)) {
        (Ok(x), Ok(y)) => x.distance(&y),
        _ => f64::INFINITY,
    }
}

/// Max-norm parameter distance after sign normalization of both sets.
pub fn any_param_distance(a: &AnyParams, b: &AnyParams) -> f64 {
    let (Ok(a), Ok(b)) = (a.normalize_signs(), b.normalize_signs()) else {
        return f64::INFINITY;
    };
    let mut d = crate::model::param_distance(a.base(), b.base());
    match (&a, &b) {
        (AnyParams::Unrestricted(x), AnyParams::Unrestricted(y)) => d = d.max((&x.rho - &y.rho).amax()),
        (AnyParams::Restricted(_), AnyParams::Restricted(_)) => {}
        _ => d = f64::INFINITY,
    }
    d
}

/// Validate the alternate, measure both distances and package the result.
pub(crate) fn finish(
    original: AnyParams,
    alternate: AnyParams,
    construction: Construction,
    knob: f64,
) -> Result<Certificate, CertError> {
    alternate
        .validate()
        .map_err(|e| CertError::Inadmissible(knob, e.to_string()))?;
    if original.base().kind == ModelKind::TwoTier
        && original.base().structure.pattern() != alternate.base().structure.pattern()
    {
        return Err(CertError::Inadmissible(knob, "loading pattern changed".into()));
    }
    let param_distance = any_param_distance(&original, &alternate);
    if !(param_distance > MIN_PARAM_DISTANCE) {
        return Err(CertError::Degenerate(knob));
    }
    let moment_distance = moment_distance(&original, &alternate);
    if !(moment_distance < MAX_MOMENT_DISTANCE) {
        return Err(CertError::MomentMismatch(moment_distance));
    }
    Ok(Certificate { original, alternate, construction, knob, moment_distance, param_distance })
}

/// Candidate knob offsets for automatic selection: start well inside the
/// admissible region and halve toward the base point, in both directions.
fn offsets() -> impl Iterator<Item = f64> {
    (0..14).flat_map(|i| {
        let s = 0.2 * 0.5f64.powi(i);
        [s, -s]
    })
}

/// Try `build` at `base + offset` for shrinking offsets until one is valid.
fn auto_knob(base: f64, build: impl Fn(f64) -> Result<Certificate, CertError>) -> Result<Certificate, CertError> {
    for off in offsets() {
        match build(base + off) {
            Ok(c) => return Ok(c),
            Err(CertError::MomentMismatch(d)) => return Err(CertError::MomentMismatch(d)),
            Err(_) => continue,
        }
    }
    Err(CertError::NoKnob)
}

fn with_knob(
    knob: Option<f64>,
    base: f64,
    build: impl Fn(f64) -> Result<Certificate, CertError>,
) -> Result<Certificate, CertError> {
    match knob {
        Some(k) => build(k),
        None => auto_knob(base, build),
    }
}

/// Covariance form of a restricted model.
#[derive(Debug, Clone)]
pub(crate) struct CovForm {
    pub at: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// Diagonal of the observable second-moment matrix.
    pub total: DVector<f64>,
}

impl CovForm {
    pub fn of(p: &ModelParams) -> CovForm {
        let sigma = p.latent_cov.clone();
        match p.link {
            Link::Linear => {
                let at = p.loadings().clone();
                let common = diag_quad(&at, &sigma);
                let total = common + p.unique_vars.as_ref().expect("linear model has unique variances");
                CovForm { at, sigma, total }
            }
            Link::Probit => {
                let at = reduce_with(p.loadings(), &sigma);
                CovForm { at, sigma, total: DVector::from_element(p.n_items(), 1.0) }
            }
        }
    }

    pub fn psi(&self, at: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DVector<f64> {
        &self.total - diag_quad(at, sigma)
    }

    /// Map a new (Ã, Σ) back to a parameter set of the original's shape.
    pub fn rebuild(&self, orig: &ModelParams, at: DMatrix<f64>, sigma: DMatrix<f64>, knob: f64) -> Result<ModelParams, CertError> {
        let psi = self.psi(&at, &sigma);
        if let Some(j) = psi.iter().position(|&x| !(x > 0.0)) {
            return Err(CertError::Inadmissible(knob, format!("uniqueness of item {} would be nonpositive", j + 1)));
        }
        let mut out = orig.clone();
        out.latent_cov = sigma;
        match orig.link {
            Link::Linear => {
                out.structure.loadings = at;
                out.unique_vars = Some(psi);
            }
            Link::Probit => {
                let psi0 = self.psi(&self.at, &self.sigma);
                out.structure.loadings = recover_loadings(&at, &out.latent_cov)
                    .map_err(|e| CertError::Inadmissible(knob, e.to_string()))?;
                for j in 0..out.n_items() {
                    out.intercepts[j] = orig.intercepts[j] * (psi0[j] / psi[j]).sqrt();
                }
            }
        }
        // Entries that should be zero stay exactly zero.
        clean_zeros(&mut out.structure, &orig.structure);
        Ok(out)
    }
}

fn clean_zeros(s: &mut LoadingStructure, orig: &LoadingStructure) {
    for j in 0..s.n_items() {
        for g in 0..s.n_testlets {
            if g != orig.assignment[j] {
                let c = s.testlet_col(g);
                s.loadings[(j, c)] = 0.0;
            }
        }
    }
}

fn diag_quad(a: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DVector<f64> {
    let m = a * sigma;
    DVector::from_fn(a.nrows(), |j, _| m.row(j).dot(&a.row(j)))
}

fn require(cond: bool, msg: impl Into<String>) -> Result<(), CertError> {
    if cond {
        Ok(())
    } else {
        Err(CertError::Precondition(msg.into()))
    }
}

fn single_primary(p: &ModelParams) -> Result<(), CertError> {
    require(p.structure.n_primary == 1, "needs a single primary factor")?;
    require(p.kind != ModelKind::TwoTier, "not defined for two-tier models")
}

/// True when testlet `g` is correlated with some other testlet.
fn testlet_correlated(p: &ModelParams, g: usize) -> bool {
    let sg = p.sigma_g();
    (0..sg.nrows()).any(|h| h != g && sg[(g, h)] != 0.0)
}

/// Scale the testlet loadings of the nonzero items of testlet `g` by `c`
/// and `1/c`. With a single nonzero item the loading is scaled by `c` and
/// the testlet's correlations by `1/c`.
pub fn construct_scaling_certificate(p: &ModelParams, g: usize, c: Option<f64>) -> Result<Certificate, CertError> {
    single_primary(p)?;
    require(g < p.structure.n_testlets, "no such testlet")?;
    let q = compute_q(&p.structure, g);
    require(q.len() <= 2, format!("testlet {} has {} nonzero loadings; at most 2 allowed", g + 1, q.len()))?;
    require(
        q.len() == 1 || p.kind == ModelKind::Standard || !testlet_correlated(p, g),
        "a correlated testlet with two nonzero loadings is not covered by scaling",
    )?;
    let cf = CovForm::of(p);
    let col = p.structure.testlet_col(g);
    let build = |c: f64| -> Result<Certificate, CertError> {
        if !(c > 0.0) {
            return Err(CertError::Inadmissible(c, "c must be positive".into()));
        }
        let mut at = cf.at.clone();
        let mut sigma = cf.sigma.clone();
        at[(q[0], col)] *= c;
        if q.len() == 2 {
            at[(q[1], col)] /= c;
        } else {
            for h in 0..sigma.nrows() {
                if h != col {
                    sigma[(col, h)] /= c;
                    sigma[(h, col)] /= c;
                }
            }
            if !is_positive_definite(&sigma) {
                return Err(CertError::Inadmissible(c, "Σ would lose positive definiteness".into()));
            }
        }
        let alt = cf.rebuild(p, at, sigma, c)?;
        finish(AnyParams::Restricted(p.clone()), AnyParams::Restricted(alt), Construction::Scaling, c)
    };
    with_knob(c, 1.0, build)
}

/// Scale the only nonzero main loading of each of the two main-factor
/// testlets by `c` and `1/c`.
pub fn construct_main_scaling_certificate(p: &ModelParams, c: Option<f64>) -> Result<Certificate, CertError> {
    single_primary(p)?;
    let s = &p.structure;
    let h1 = compute_h1(s).unwrap();
    require(h1.len() == 2, format!("|H1| = {}, need 2", h1.len()))?;
    require(compute_h6(s).unwrap().is_empty(), "H6 must be empty")?;
    let j1 = compute_q0(s, h1[0]).unwrap()[0];
    let j2 = compute_q0(s, h1[1]).unwrap()[0];
    let cf = CovForm::of(p);
    let build = |c: f64| -> Result<Certificate, CertError> {
        if !(c > 0.0) {
            return Err(CertError::Inadmissible(c, "c must be positive".into()));
        }
        let mut at = cf.at.clone();
        at[(j1, 0)] *= c;
        at[(j2, 0)] /= c;
        let alt = cf.rebuild(p, at, cf.sigma.clone(), c)?;
        finish(AnyParams::Restricted(p.clone()), AnyParams::Restricted(alt), Construction::MainScaling, c)
    };
    with_knob(c, 1.0, build)
}

/// Rank-one `u` with `u_k u_l = m[k, l]` for every k ≠ l, if one exists.
/// The sign is chosen to agree with `reference`.
pub(crate) fn rank_one_offdiag(m: &DMatrix<f64>, reference: &DVector<f64>) -> Option<DVector<f64>> {
    let n = m.nrows();
    if n < 3 {
        return None;
    }
    let scale = m.amax().max(1e-300);
    for p in 0..n {
        let mut best: Option<(usize, usize)> = None;
        for q in 0..n {
            for r in q + 1..n {
                if q == p || r == p {
                    continue;
                }
                if best.is_none_or(|(bq, br)| m[(q, r)].abs() > m[(bq, br)].abs()) {
                    best = Some((q, r));
                }
            }
        }
        let (q, r) = best?;
        if m[(q, r)].abs() < 1e-9 * scale {
            continue;
        }
        let up2 = m[(p, q)] * m[(p, r)] / m[(q, r)];
        if !(up2 > 1e-14 * scale) {
            continue;
        }
        let up = up2.sqrt();
        let mut u = DVector::from_fn(n, |k, _| if k == p { up } else { m[(p, k)] / up });
        let ok = (0..n).all(|k| (0..k).all(|l| (u[k] * u[l] - m[(k, l)]).abs() <= 1e-11 * scale));
        if ok {
            if u.dot(reference) < 0.0 {
                u.neg_mut();
            }
            return Some(u);
        }
    }
    None
}

/// Rescale the main factor by `c` on testlet `g` and by `1/c` on the other
/// main-factor testlet, then refit both testlets' own loadings so every
/// within-testlet covariance is kept.
pub fn construct_case2c_certificate(p: &ModelParams, g: usize, c: Option<f64>) -> Result<Certificate, CertError> {
    single_primary(p)?;
    let s = &p.structure;
    let h1 = compute_h1(s).unwrap();
    require(h1.len() == 2, format!("|H1| = {}, need 2", h1.len()))?;
    require(h1.contains(&g), format!("testlet {} has no main loadings", g + 1))?;
    require((0..s.n_testlets).all(|t| compute_q(s, t).len() >= 3), "every |Q_g| must be at least 3")?;
    require(!compute_h6(s).unwrap().is_empty(), "H6 must be nonempty")?;
    require(compute_h2(s).unwrap().is_empty(), "H2 must be empty")?;
    let other = if h1[0] == g { h1[1] } else { h1[0] };
    let cf = CovForm::of(p);
    let build = |c: f64| -> Result<Certificate, CertError> {
        if !(c > 0.0) {
            return Err(CertError::Inadmissible(c, "c must be positive".into()));
        }
        let mut at = cf.at.clone();
        for (t, f) in [(g, c), (other, 1.0 / c)] {
            let items = s.testlet_items(t);
            let col = s.testlet_col(t);
            let n = items.len();
            let a0 = DVector::from_fn(n, |i, _| cf.at[(items[i], 0)]);
            let at_t = DVector::from_fn(n, |i, _| cf.at[(items[i], col)]);
            let m = &a0 * a0.transpose() * (1.0 - f * f) + &at_t * at_t.transpose();
            let u = rank_one_offdiag(&m, &at_t)
                .ok_or_else(|| CertError::Inadmissible(c, format!("no rank-one refit for testlet {}", t + 1)))?;
            for (i, &j) in items.iter().enumerate() {
                at[(j, 0)] = f * a0[i];
                at[(j, col)] = u[i];
            }
        }
        let alt = cf.rebuild(p, at, cf.sigma.clone(), c)?;
        finish(AnyParams::Restricted(p.clone()), AnyParams::Restricted(alt), Construction::Case2c, c)
    };
    with_knob(c, 1.0, build)
}

/// A main column confined to one testlet and uncorrelated with every other
/// factor, as (main column, testlet).
pub fn rotatable_pair(p: &ModelParams) -> Option<(usize, usize)> {
    let s = &p.structure;
    if p.kind == ModelKind::Extended {
        return None;
    }
    (0..s.n_primary).find_map(|m| {
        let items: Vec<usize> = (0..s.n_items()).filter(|&j| s.is_nonzero(s.loadings[(j, m)])).collect();
        let g = s.assignment[*items.first()?];
        let confined = items.iter().all(|&j| s.assignment[j] == g);
        let uncorrelated = (0..s.n_factors()).all(|f| f == m || p.latent_cov[(m, f)] == 0.0);
        (confined && uncorrelated).then_some((m, g))
    })
}

/// Rotate the main column and testlet column of the only testlet that
/// carries that main factor by angle `theta`.
pub fn construct_rotation_certificate(p: &ModelParams, theta: Option<f64>) -> Result<Certificate, CertError> {
    let s = &p.structure;
    if p.structure.n_primary == 1 {
        require(p.kind == ModelKind::Standard, "rotation applies to standard and two-tier models")?;
        let h1 = compute_h1(s).unwrap();
        require(h1.len() <= 1, format!("|H1| = {}, need at most 1", h1.len()))?;
    }
    let (m, g) = rotatable_pair(p).ok_or_else(|| CertError::Precondition("no main factor is confined to one testlet".into()))?;
    let t = s.testlet_col(g);
    let build = |th: f64| -> Result<Certificate, CertError> {
        let (sn, cs) = th.sin_cos();
        let mut alt = p.clone();
        for j in s.testlet_items(g) {
            let (x, y) = (s.loadings[(j, m)], s.loadings[(j, t)]);
            alt.structure.loadings[(j, m)] = cs * x + sn * y;
            alt.structure.loadings[(j, t)] = -sn * x + cs * y;
        }
        finish(AnyParams::Restricted(p.clone()), AnyParams::Restricted(alt), Construction::Rotation, th)
    };
    with_knob(theta, 0.0, build)
}

/// Rank-one testlet block as (scores, unit direction) with the direction's
/// testlet component positive.
fn rank_one_parts(block: &DMatrix<f64>) -> (DVector<f64>, [f64; 2]) {
    let best = (0..block.nrows())
        .max_by(|&a, &b| block.row(a).norm().total_cmp(&block.row(b).norm()))
        .unwrap();
    let n = block.row(best).norm();
    let mut c = [block[(best, 0)] / n, block[(best, 1)] / n];
    if c[1] < 0.0 {
        c = [-c[0], -c[1]];
    }
    let scores = DVector::from_fn(block.nrows(), |j, _| block[(j, 0)] * c[0] + block[(j, 1)] * c[1]);
    (scores, c)
}

/// Rotate the one full-rank testlet (or any testlet, if none is full rank)
/// by `delta` and solve the testlet correlations and rank-one testlet
/// directions in closed form so every covariance is kept.
pub fn construct_extended_rho_perturbation(p: &ModelParams, delta: Option<f64>) -> Result<Certificate, CertError> {
    require(p.kind == ModelKind::Extended, "needs an extended model")?;
    let s = &p.structure;
    let h3 = compute_h3(s);
    require(h3.len() <= 1, format!("|H3| = {}, need at most 1", h3.len()))?;
    let gcount = s.n_testlets;
    require(gcount >= 2, "needs at least two testlets")?;
    let cf = CovForm::of(p);
    let block = |g: usize| -> DMatrix<f64> {
        let items = s.testlet_items(g);
        DMatrix::from_fn(items.len(), 2, |r, c| cf.at[(items[r], if c == 0 { 0 } else { s.testlet_col(g) })])
    };
    let pivot = h3.first().copied();
    let parts: Vec<Option<(DVector<f64>, [f64; 2])>> =
        (0..gcount).map(|g| if Some(g) == pivot { None } else { Some(rank_one_parts(&block(g))) }).collect();
    let sg = p.sigma_g();
    let build = |d: f64| -> Result<Certificate, CertError> {
        let (sn, cs) = d.sin_cos();
        // R = [[cs, -sn], [sn, cs]]; Rᵀx = (cs x0 + sn x1, -sn x0 + cs x1).
        let rt = |x: [f64; 2]| [cs * x[0] + sn * x[1], -sn * x[0] + cs * x[1]];
        let mut v: Vec<[f64; 2]> = vec![[0.0; 2]; gcount];
        let mut new_sg = sg.clone();
        match pivot {
            Some(pv) => {
                for g in 0..gcount {
                    if g == pv {
                        continue;
                    }
                    let c = parts[g].as_ref().unwrap().1;
                    let u = rt([c[0], sg[(pv, g)] * c[1]]);
                    if !(u[0].abs() < 1.0) {
                        return Err(CertError::Inadmissible(d, "rotation too large".into()));
                    }
                    v[g] = [u[0], c[1].signum() * (1.0 - u[0] * u[0]).sqrt()];
                    let r = u[1] / v[g][1];
                    new_sg[(pv, g)] = r;
                    new_sg[(g, pv)] = r;
                }
            }
            None => {
                for g in 0..gcount {
                    v[g] = parts[g].as_ref().unwrap().1;
                }
                v[0] = rt(v[0]);
            }
        }
        for g in 0..gcount {
            for h in 0..g {
                if Some(g) == pivot || Some(h) == pivot || (pivot.is_none() && h != 0) {
                    continue;
                }
                let cg = parts[g].as_ref().unwrap().1;
                let ch = parts[h].as_ref().unwrap().1;
                let r = (cg[0] * ch[0] + sg[(g, h)] * cg[1] * ch[1] - v[g][0] * v[h][0]) / (v[g][1] * v[h][1]);
                new_sg[(g, h)] = r;
                new_sg[(h, g)] = r;
            }
        }
        let mut sigma = cf.sigma.clone();
        sigma.view_mut((1, 1), (gcount, gcount)).copy_from(&new_sg);
        if !is_positive_definite(&sigma) {
            return Err(CertError::Inadmissible(d, "Σ_G would lose positive definiteness".into()));
        }
        let mut at = cf.at.clone();
        for g in 0..gcount {
            let items = s.testlet_items(g);
            let col = s.testlet_col(g);
            for (i, &j) in items.iter().enumerate() {
                let (x, y) = (cf.at[(j, 0)], cf.at[(j, col)]);
                let (nx, ny) = if Some(g) == pivot {
                    (cs * x + sn * y, -sn * x + cs * y)
                } else {
                    let sc = parts[g].as_ref().unwrap().0[i];
                    (sc * v[g][0], sc * v[g][1])
                };
                at[(j, 0)] = nx;
                at[(j, col)] = ny;
            }
        }
        let alt = cf.rebuild(p, at, sigma, d)?;
        finish(AnyParams::Restricted(p.clone()), AnyParams::Restricted(alt), Construction::RhoPerturbation, d)
    };
    with_knob(delta, 0.0, build)
}

/// Least-squares coefficients of the main column on the testlet columns and
/// the relative residual.
pub fn main_in_testlet_span(s: &LoadingStructure) -> (DVector<f64>, f64) {
    let a0 = s.loadings.column(0);
    let mut b = DVector::zeros(s.n_testlets);
    let mut fit = DVector::zeros(s.n_items());
    for g in 0..s.n_testlets {
        let col = s.loadings.column(s.testlet_col(g));
        let nn = col.norm_squared();
        if nn > 0.0 {
            b[g] = a0.dot(&col) / nn;
            fit += col * b[g];
        }
    }
    let rel = (a0 - fit).norm() / a0.norm().max(1e-300);
    (b, rel)
}

/// Relative residual below which the main column counts as inside the
/// testlet span.
pub const RANGE_TOL: f64 = 1e-8;

/// Equivalent parameters for a model with unrestricted primary-testlet
/// correlations ρ. The knob is t (ρ̃ = ρ + t) when the main column lies
/// outside the testlet span and c otherwise.
pub fn construct_theorem10_certificate(p: &UnrestrictedRhoParams, knob: Option<f64>) -> Result<Certificate, CertError> {
    p.validate().map_err(|e| CertError::Precondition(e.to_string()))?;
    let s = &p.base.structure;
    let g = s.n_testlets;
    let (b0, rel) = main_in_testlet_span(s);
    let orig = AnyParams::Unrestricted(p.clone());
    let sg = p.base.sigma_g();
    if rel >= RANGE_TOL {
        let build = |t: f64| -> Result<Certificate, CertError> {
            let rho = &p.rho;
            let rt = rho.add_scalar(t);
            let lam = DVector::from_fn(g, |i, _| (1.0 + rt[i] * rt[i] - rho[i] * rho[i]).sqrt());
            if lam.iter().any(|&x| !(x > 0.0)) {
                return Err(CertError::Inadmissible(t, "Λ would be singular".into()));
            }
            let inner = &sg + &rt * rt.transpose() - rho * rho.transpose();
            let new_sg = DMatrix::from_fn(g, g, |a, b| if a == b { 1.0 } else { inner[(a, b)] / (lam[a] * lam[b]) });
            let new_rho = rt.component_div(&lam);
            let mut alt = p.clone();
            let shift = rho - &rt;
            for j in 0..s.n_items() {
                let tg = s.assignment[j];
                let col = s.testlet_col(tg);
                alt.base.structure.loadings[(j, 0)] += s.loadings[(j, col)] * shift[tg];
                alt.base.structure.loadings[(j, col)] *= lam[tg];
            }
            alt.base.latent_cov.view_mut((1, 1), (g, g)).copy_from(&new_sg);
            alt.rho = new_rho;
            finish(orig.clone(), AnyParams::Unrestricted(alt), Construction::Theorem10Case1, t)
        };
        with_knob(knob, 0.0, build)
    } else {
        let build = |c: f64| -> Result<Certificate, CertError> {
            let r = (1.0 + c * c).sqrt();
            let mut alt = p.clone();
            alt.base.structure.loadings.column_mut(0).scale_mut(r - c);
            alt.rho = &b0 * c + &p.rho * (c + r);
            finish(orig.clone(), AnyParams::Unrestricted(alt), Construction::Theorem10Case2, c)
        };
        with_knob(knob, 0.0, build)
    }
}
