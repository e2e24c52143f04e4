//! Parameter estimation and recovery summaries.

mod linear;
mod stem;

pub use linear::{linear_fit, linear_fit_covariance, LinearFitConfig};
pub use stem::{
    draw_eta, draw_z, eta_conditional, sample_tail, stem_fit, stem_fit_from, stem_fit_stream, CompleteData, StemConfig,
};

use crate::io::ModelSpec;
use crate::model::{ModelKind, ModelParams};
use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("diverged at iteration {iteration}: |parameter| reached {value}")]
    Diverged { iteration: usize, value: f64 },
    #[error("a covariance matrix lost positive definiteness")]
    NotPositiveDefinite,
    #[error("no fits to summarize")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePoint {
    pub iteration: usize,
    /// Complete-data log-likelihood per observation for StEM, minus the
    /// objective for the linear fit.
    pub complete_loglik: f64,
    pub mean_abs_loading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    #[serde(serialize_with = "as_spec")]
    pub estimates: ModelParams,
    /// Standard deviations of the kept iterates.
    #[serde(serialize_with = "rows")]
    pub sd_loadings: DMatrix<f64>,
    #[serde(serialize_with = "vector")]
    pub sd_intercepts: DVector<f64>,
    #[serde(serialize_with = "rows")]
    pub sd_latent_cov: DMatrix<f64>,
    pub iterations: usize,
    pub kept: usize,
    pub trace: Vec<TracePoint>,
}

fn as_spec<S: Serializer>(p: &ModelParams, s: S) -> Result<S::Ok, S::Error> {
    ModelSpec::from_params(p).serialize(s)
}

fn rows<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let v: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    v.serialize(s)
}

fn vector<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
    v.as_slice().serialize(s)
}

/// Per-entry RMSE across replications and group averages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmseTable {
    #[serde(serialize_with = "rows")]
    pub loadings: DMatrix<f64>,
    #[serde(serialize_with = "vector")]
    pub intercepts: DVector<f64>,
    #[serde(serialize_with = "rows")]
    pub latent_cov: DMatrix<f64>,
    /// ("a", "d", "sigma" and "a[g]" per testlet, 1-based) with the mean
    /// entry RMSE of that group.
    pub groups: Vec<(String, f64)>,
}

impl RmseTable {
    pub fn group(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|(g, _)| g == name).map(|&(_, v)| v)
    }
}

/// RMSE of `fits` around `truth`. Both sides are compared after sign
/// normalization. The "sigma" group covers the free latent correlations.
pub fn rmse(fits: &[ModelParams], truth: &ModelParams) -> Result<RmseTable, FitError> {
    if fits.is_empty() {
        return Err(FitError::Empty);
    }
    let truth = truth.normalize_signs().unwrap_or_else(|_| truth.clone());
    let r = fits.len() as f64;
    let s = &truth.structure;
    let (j, k) = (s.n_items(), s.n_factors());
    let mut la = DMatrix::zeros(j, k);
    let mut ld = DVector::zeros(j);
    let mut ls = DMatrix::zeros(k, k);
    for f in fits {
        let f = f.normalize_signs().unwrap_or_else(|_| f.clone());
        la += (f.loadings() - truth.loadings()).map(|x| x * x);
        ld += (&f.intercepts - &truth.intercepts).map(|x| x * x);
        ls += (&f.latent_cov - &truth.latent_cov).map(|x| x * x);
    }
    let la = la.map(|x| (x / r).sqrt());
    let ld = ld.map(|x| (x / r).sqrt());
    let ls = ls.map(|x| (x / r).sqrt());
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let on = |jj: usize, c: usize| s.is_nonzero(s.loadings[(jj, c)]);
    let mut groups = Vec::new();
    let all_a: Vec<f64> = (0..j).flat_map(|jj| (0..k).map(move |c| (jj, c))).filter(|&(jj, c)| on(jj, c)).map(|(jj, c)| la[(jj, c)]).collect();
    groups.push(("a".to_string(), mean(&all_a)));
    groups.push(("d".to_string(), ld.mean()));
    let free: Vec<usize> = match truth.kind {
        ModelKind::Standard => vec![],
        ModelKind::Extended => (1..k).collect(),
        ModelKind::TwoTier => (0..s.n_primary).collect(),
    };
    let mut sig = Vec::new();
    for (i, &a) in free.iter().enumerate() {
        for &b in &free[i + 1..] {
            sig.push(ls[(a, b)]);
        }
    }
    if !sig.is_empty() {
        groups.push(("sigma".to_string(), mean(&sig)));
    }
    for g in 0..s.n_testlets {
        let v: Vec<f64> = s
            .testlet_items(g)
            .into_iter()
            .flat_map(|jj| (0..k).map(move |c| (jj, c)))
            .filter(|&(jj, c)| on(jj, c))
            .map(|(jj, c)| la[(jj, c)])
            .collect();
        groups.push((format!("a[{}]", g + 1), mean(&v)));
    }
    Ok(RmseTable { loadings: la, intercepts: ld, latent_cov: ls, groups })
}
