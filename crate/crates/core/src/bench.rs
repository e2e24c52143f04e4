//! Simulation-and-fit grid over sample sizes, summarized as RMSE tables.
//!
//! Cell (N, r) simulates on stream `(N << 24) | r` of the master seed and
//! fits on the same stream, so every cell is reproducible on its own and
//! the report does not depend on thread scheduling.

use crate::estimate::{linear_fit, rmse, stem_fit_stream, FitError, LinearFitConfig, RmseTable, StemConfig};
use crate::fixtures;
use crate::ident::{check, CheckOptions, Construction, Status, Verdict};
use crate::io::AnyParams;
use crate::model::{Link, ModelParams};
use crate::simulate::simulate_stream;
use rayon::prelude::*;
use serde::Serialize;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown case {0}; expected 1 to 6")]
    UnknownCase(usize),
    #[error("bad bench configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("verdict failed: {0}")]
    Check(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    pub case: usize,
    pub link: Link,
    pub ns: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub stem: StemConfig,
    /// Stop starting new cells after this many minutes.
    pub max_minutes: Option<f64>,
}

impl BenchConfig {
    /// Desk-scale defaults: N ∈ {1000, 2000, 4000}, 100 replications and
    /// 3000/1500 StEM iterations.
    pub fn new(case: usize) -> BenchConfig {
        BenchConfig {
            case,
            link: Link::Probit,
            ns: vec![1000, 2000, 4000],
            reps: 100,
            seed: 1,
            stem: StemConfig::default(),
            max_minutes: None,
        }
    }
}

/// Summary of the certificate behind a non-identifiable verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateRef {
    pub construction: Construction,
    pub moment_distance: f64,
    pub param_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub completed: usize,
    /// Fits that diverged or lost positive definiteness.
    pub failed: usize,
    pub rmse: Option<RmseTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub case: usize,
    pub link: Link,
    #[serde(rename = "N")]
    pub ns: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub stem: StemConfig,
    pub rows: Vec<BenchRow>,
    /// True when the time budget stopped the grid early.
    pub partial: bool,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateRef>,
    /// Kept apart so that everything else is identical across runs.
    pub timing: Timing,
}

impl BenchReport {
    pub fn row(&self, n: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.n == n)
    }

    /// RMSE of `group` across the N grid, NaN where nothing completed.
    pub fn series(&self, group: &str) -> Vec<f64> {
        self.rows.iter().map(|r| r.rmse.as_ref().and_then(|t| t.group(group)).unwrap_or(f64::NAN)).collect()
    }

    /// Long-format CSV with columns case,link,N,group,rmse.
    pub fn to_csv(&self) -> String {
        let link = match self.link {
            Link::Linear => "linear",
            Link::Probit => "probit",
        };
        let mut out = String::from("case,link,N,group,rmse\n");
        for r in &self.rows {
            if let Some(t) = &r.rmse {
                for (g, v) in &t.groups {
                    out.push_str(&format!("{},{},{},{},{}\n", self.case, link, r.n, g, v));
                }
            }
        }
        out
    }

    /// One line per group with the N columns side by side, as in
    /// "a & .16 & .10 & .07".
    pub fn table(&self) -> String {
        let Some(first) = self.rows.iter().find_map(|r| r.rmse.as_ref()) else {
            return String::new();
        };
        let mut out = format!("N & {}\n", self.ns.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" & "));
        for (g, _) in &first.groups {
            let cells: Vec<String> = self
                .series(g)
                .iter()
                .map(|v| if v.is_nan() { "-".into() } else { format!("{v:.2}").trim_start_matches('0').to_string() })
                .collect();
            out.push_str(&format!("{g} & {}\n", cells.join(" & ")));
        }
        out
    }
}

/// Stream key of cell (N, r).
pub fn cell_stream(n: usize, rep: usize) -> u64 {
    ((n as u64) << 24) | rep as u64
}

fn fit_cell(truth: &ModelParams, n: usize, rep: usize, cfg: &BenchConfig) -> Result<ModelParams, FitError> {
    let stream = cell_stream(n, rep);
    let data = simulate_stream(truth, n, cfg.seed, stream).map_err(|e| FitError::Data(e.to_string()))?;
    let fit = match truth.link {
        Link::Probit => {
            let stem = StemConfig { seed: cfg.seed, ..cfg.stem };
            stem_fit_stream(&data.values, &truth.structure, truth.kind, &stem, stream)?
        }
        Link::Linear => linear_fit(&data.values, &truth.structure, truth.kind, &LinearFitConfig::default())?,
    };
    Ok(fit.estimates)
}

/// Run the grid for one of the six recovery cases.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let truth = fixtures::case(cfg.case, cfg.link).ok_or(BenchError::UnknownCase(cfg.case))?;
    run_bench_model(&truth, cfg)
}

/// Run the grid for an arbitrary standard or extended model.
pub fn run_bench_model(truth: &ModelParams, cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.ns.is_empty() || cfg.ns.contains(&0) || cfg.reps == 0 {
        return Err(BenchError::Config("need at least one positive N and one replication".into()));
    }
    if cfg.ns.iter().any(|&n| n >= 1 << 40) || cfg.reps >= 1 << 24 {
        return Err(BenchError::Config("N or reps too large for the stream key".into()));
    }
    cfg.stem.check()?;
    let start = Instant::now();
    let verdict = check(&AnyParams::Restricted(truth.clone()), &CheckOptions::default()).map_err(|e| BenchError::Check(e.to_string()))?;
    let certificate = verdict.certificate.as_ref().map(|c| CertificateRef {
        construction: c.construction,
        moment_distance: c.moment_distance,
        param_distance: c.param_distance,
    });
    if verdict.status == Status::NonIdentifiable && certificate.is_none() {
        return Err(BenchError::Check("non-identifiable verdict without a certificate".into()));
    }
    let deadline = cfg.max_minutes.map(|m| start + Duration::from_secs_f64(m.max(0.0) * 60.0));
    let cells: Vec<(usize, usize)> = cfg.ns.iter().flat_map(|&n| (0..cfg.reps).map(move |r| (n, r))).collect();
    let results: Vec<Option<Result<ModelParams, FitError>>> = cells
        .par_iter()
        .map(|&(n, r)| {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return None;
            }
            Some(fit_cell(truth, n, r, cfg))
        })
        .collect();
    let partial = results.iter().any(Option::is_none);
    let mut rows = Vec::new();
    for (i, &n) in cfg.ns.iter().enumerate() {
        let chunk = &results[i * cfg.reps..(i + 1) * cfg.reps];
        let fits: Vec<ModelParams> = chunk.iter().filter_map(|c| c.as_ref()?.as_ref().ok().cloned()).collect();
        let failed = chunk.iter().filter(|c| matches!(c, Some(Err(_)))).count();
        let table = if fits.is_empty() { None } else { Some(rmse(&fits, truth)?) };
        rows.push(BenchRow { n, completed: fits.len(), failed, rmse: table });
    }
    Ok(BenchReport {
        case: cfg.case,
        link: truth.link,
        ns: cfg.ns.clone(),
        reps: cfg.reps,
        seed: cfg.seed,
        stem: cfg.stem,
        rows,
        partial,
        verdict,
        certificate,
        timing: Timing { wall_seconds: start.elapsed().as_secs_f64() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(case: usize) -> BenchConfig {
        BenchConfig {
            ns: vec![300],
            reps: 2,
            stem: StemConfig { n_iter: 40, burn_in: 20, ..StemConfig::default() },
            ..BenchConfig::new(case)
        }
    }

    #[test]
    fn smoke_run_is_deterministic() {
        let a = run_bench(&small(1)).unwrap();
        let b = run_bench(&small(1)).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows[0].completed, 2);
        assert!(!a.partial);
        let csv = a.to_csv();
        assert!(csv.starts_with("case,link,N,group,rmse\n1,probit,300,a,"));
        assert!(a.table().contains("a & ."));
    }

    #[test]
    fn non_identifiable_case_carries_certificate() {
        let r = run_bench(&small(5)).unwrap();
        assert_eq!(r.verdict.status, Status::NonIdentifiable);
        assert!(r.certificate.as_ref().unwrap().moment_distance < 1e-8);
        assert!(r.row(300).unwrap().rmse.as_ref().unwrap().group("sigma").is_some());
    }

    #[test]
    fn zero_budget_gives_partial_report() {
        let r = run_bench(&BenchConfig { max_minutes: Some(0.0), ..small(1) }).unwrap();
        assert!(r.partial);
        assert_eq!(r.rows[0].completed, 0);
        assert!(r.rows[0].rmse.is_none());
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(run_bench(&BenchConfig::new(7)), Err(BenchError::UnknownCase(7))));
        assert!(run_bench(&BenchConfig { reps: 0, ..small(1) }).is_err());
    }
}
