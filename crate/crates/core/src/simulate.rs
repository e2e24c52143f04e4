//! Synthetic respondent data.
//!
//! Every draw comes from a ChaCha8 stream keyed by (seed, stream), so a
//! replication's data depend only on its own counter and never on thread
//! scheduling.

use crate::io::{matrix_to_csv, write_string, IoError, ModelSpec};
use crate::model::{Link, ModelError, ModelParams, UnrestrictedRhoParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("latent covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Generator for stream `stream` under master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn fill_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Row-major draw order so a row's values do not depend on N.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for k in 0..cols {
            m[(i, k)] = rng.sample(StandardNormal);
        }
    }
    m
}

fn latent_from(rng: &mut ChaCha8Rng, sigma: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>, SimError> {
    let chol = sigma.clone().cholesky().ok_or(SimError::NotPositiveDefinite)?;
    Ok(fill_normal(rng, n, sigma.nrows()) * chol.l().transpose())
}

/// N draws of η ~ MVN(0, Σ), one per row.
pub fn sample_latent(sigma: &DMatrix<f64>, n: usize, seed: u64) -> Result<DMatrix<f64>, SimError> {
    latent_from(&mut stream_rng(seed, 0), sigma, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N×J responses: reals for the linear link, 0/1 for probit.
    pub values: DMatrix<f64>,
    pub seed: u64,
    pub stream: u64,
    pub truth: ModelParams,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    seed: u64,
    stream: u64,
    n: usize,
    truth: &'a ModelSpec,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn link(&self) -> Link {
        self.truth.link
    }

    /// Write `values` as CSV and a JSON sidecar holding the seed and truth.
    pub fn write(&self, csv_path: &Path, sidecar_path: &Path) -> Result<(), SimError> {
        let header: Vec<String> = (1..=self.values.ncols()).map(|j| format!("item{j}")).collect();
        write_string(csv_path, &matrix_to_csv(&self.values, Some(&header))?)?;
        let spec = ModelSpec::from_params(&self.truth);
        let side = Sidecar { seed: self.seed, stream: self.stream, n: self.n(), truth: &spec };
        let text = serde_json::to_string_pretty(&side).map_err(IoError::Json)?;
        write_string(sidecar_path, &text)?;
        Ok(())
    }
}

fn respond(
    rng: &mut ChaCha8Rng,
    a: &DMatrix<f64>,
    d: &DVector<f64>,
    eta: &DMatrix<f64>,
    lambda: Option<&DVector<f64>>,
    link: Link,
) -> DMatrix<f64> {
    let n = eta.nrows();
    let eps = fill_normal(rng, n, a.nrows());
    let mut lin = eta * a.transpose();
    for j in 0..a.nrows() {
        for i in 0..n {
            lin[(i, j)] += d[j];
        }
    }
    match link {
        Link::Linear => {
            let sd = lambda.expect("linear model has unique variances").map(f64::sqrt);
            DMatrix::from_fn(n, a.nrows(), |i, j| lin[(i, j)] + sd[j] * eps[(i, j)])
        }
        Link::Probit => DMatrix::from_fn(n, a.nrows(), |i, j| if eps[(i, j)] <= lin[(i, j)] { 1.0 } else { 0.0 }),
    }
}

/// Draw a dataset from stream `stream` of `seed`.
pub fn simulate_stream(p: &ModelParams, n: usize, seed: u64, stream: u64) -> Result<Dataset, SimError> {
    if n == 0 {
        return Err(SimError::EmptySample);
    }
    p.validate()?;
    let mut rng = stream_rng(seed, stream);
    let eta = latent_from(&mut rng, &p.latent_cov, n)?;
    let values = respond(&mut rng, p.loadings(), &p.intercepts, &eta, p.unique_vars.as_ref(), p.link);
    Ok(Dataset { values, seed, stream, truth: p.clone() })
}

pub fn simulate(p: &ModelParams, n: usize, seed: u64) -> Result<Dataset, SimError> {
    simulate_stream(p, n, seed, 0)
}

/// Data from a model with primary-testlet correlations. The returned
/// dataset's truth is the base model.
pub fn simulate_rho(p: &UnrestrictedRhoParams, n: usize, seed: u64) -> Result<Dataset, SimError> {
    if n == 0 {
        return Err(SimError::EmptySample);
    }
    p.validate()?;
    let b = &p.base;
    let mut rng = stream_rng(seed, 0);
    let eta = latent_from(&mut rng, &p.full_latent_cov(), n)?;
    let values = respond(&mut rng, b.loadings(), &b.intercepts, &eta, b.unique_vars.as_ref(), b.link);
    Ok(Dataset { values, seed, stream: 0, truth: b.clone() })
}

/// `reps` datasets on streams 0..reps, generated in parallel.
pub fn simulate_replications(p: &ModelParams, n: usize, seed: u64, reps: usize) -> Result<Vec<Dataset>, SimError> {
    (0..reps as u64).into_par_iter().map(|r| simulate_stream(p, n, seed, r)).collect()
}
