//! JSON model specs and CSV matrices.
//!
//! A model spec looks like
//!
//! ```json
//! {"kind": "standard", "link": "linear", "L": 1, "G": 2,
//!  "assignment": [1, 1, 1, 2, 2, 2],
//!  "A": [[1, 0.5, 0], [1, 0.6, 0], [1, 0.7, 0], [1, 0, 0.5], [1, 0, 0.6], [1, 0, 0.7]],
//!  "d": [0, 0, 0, 0, 0, 0], "lambda": [1, 1, 1, 1, 1, 1]}
//! ```
//!
//! Testlet labels in `assignment` are 1-based. `Sigma` may be omitted (identity),
//! given in full, or given as just its free block (G×G for extended models,
//! L×L for two-tier ones). An optional `rho` turns the spec into an extended
//! model with primary-testlet correlations.

use crate::model::{Link, LoadingStructure, ModelError, ModelKind, ModelParams, UnrestrictedRhoParams, DEFAULT_ZERO_TOL};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed model spec: {0}")]
    Shape(String),
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub link: Link,
    #[serde(rename = "L", default = "one")]
    pub n_primary: usize,
    #[serde(rename = "G")]
    pub n_testlets: usize,
    pub assignment: Vec<usize>,
    #[serde(rename = "A", default)]
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub d: Vec<f64>,
    #[serde(rename = "Sigma", default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_tol: Option<f64>,
}

fn one() -> usize {
    1
}

/// Parameters read from a spec, with or without ρ.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyParams {
    Restricted(ModelParams),
    Unrestricted(UnrestrictedRhoParams),
}

impl AnyParams {
    pub fn base(&self) -> &ModelParams {
        match self {
            AnyParams::Restricted(p) => p,
            AnyParams::Unrestricted(u) => &u.base,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            AnyParams::Restricted(p) => p.validate(),
            AnyParams::Unrestricted(u) => u.validate(),
        }
    }

    pub fn normalize_signs(&self) -> Result<AnyParams, ModelError> {
        Ok(match self {
            AnyParams::Restricted(p) => AnyParams::Restricted(p.normalize_signs()?),
            AnyParams::Unrestricted(u) => AnyParams::Unrestricted(u.normalize_signs()?),
        })
    }

    pub fn to_spec(&self) -> ModelSpec {
        match self {
            AnyParams::Restricted(p) => ModelSpec::from_params(p),
            AnyParams::Unrestricted(u) => {
                let mut s = ModelSpec::from_params(&u.base);
                s.rho = Some(u.rho.iter().copied().collect());
                s
            }
        }
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix(name: &str, v: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>, IoError> {
    if v.len() != nrows || v.iter().any(|r| r.len() != ncols) {
        return Err(IoError::Shape(format!("{name} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| v[r][c]))
}

impl ModelSpec {
    pub fn from_params(p: &ModelParams) -> ModelSpec {
        let s = &p.structure;
        ModelSpec {
            kind: p.kind,
            link: p.link,
            n_primary: s.n_primary,
            n_testlets: s.n_testlets,
            assignment: s.assignment.iter().map(|g| g + 1).collect(),
            a: rows(&s.loadings),
            d: p.intercepts.iter().copied().collect(),
            sigma: Some(rows(&p.latent_cov)),
            lambda: p.unique_vars.as_ref().map(|l| l.iter().copied().collect()),
            rho: None,
            zero_tol: (s.zero_tol != DEFAULT_ZERO_TOL).then_some(s.zero_tol),
        }
    }

    /// Convert to parameters without validating them.
    pub fn to_params_unchecked(&self) -> Result<AnyParams, IoError> {
        let l = self.n_primary;
        let g = self.n_testlets;
        let k = l + g;
        let j = self.assignment.len();
        if self.assignment.iter().any(|&t| t == 0 || t > g) {
            return Err(IoError::Shape(format!("assignment labels must lie in 1..={g}")));
        }
        let a = matrix("A", &self.a, j, k)?;
        if self.d.len() != j {
            return Err(IoError::Shape(format!("d must have {j} entries")));
        }
        let mut cov = DMatrix::identity(k, k);
        if let Some(s) = &self.sigma {
            let n = s.len();
            if n == k {
                cov = matrix("Sigma", s, k, k)?;
            } else if self.kind == ModelKind::Extended && n == g {
                cov.view_mut((l, l), (g, g)).copy_from(&matrix("Sigma", s, g, g)?);
            } else if self.kind == ModelKind::TwoTier && n == l {
                cov.view_mut((0, 0), (l, l)).copy_from(&matrix("Sigma", s, l, l)?);
            } else {
                return Err(IoError::Shape(format!("Sigma must be {k}x{k} or its free block")));
            }
        }
        let mut structure = LoadingStructure::new(l, g, self.assignment.iter().map(|t| t - 1).collect(), a);
        if let Some(t) = self.zero_tol {
            structure.zero_tol = t;
        }
        let base = ModelParams {
            structure,
            intercepts: DVector::from_vec(self.d.clone()),
            latent_cov: cov,
            unique_vars: self.lambda.as_ref().map(|v| DVector::from_vec(v.clone())),
            kind: self.kind,
            link: self.link,
        };
        Ok(match &self.rho {
            None => AnyParams::Restricted(base),
            Some(r) => AnyParams::Unrestricted(UnrestrictedRhoParams { base, rho: DVector::from_vec(r.clone()) }),
        })
    }

    /// Convert and validate.
    pub fn to_params(&self) -> Result<AnyParams, IoError> {
        let p = self.to_params_unchecked()?;
        p.validate()?;
        Ok(p)
    }
}

pub fn parse_model_json(text: &str) -> Result<ModelSpec, IoError> {
    Ok(serde_json::from_str(text)?)
}

pub fn read_to_string(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Read { path: path.display().to_string(), source })
}

pub fn write_string(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|source| IoError::Write { path: path.display().to_string(), source })
}

/// Numeric matrix from headerless CSV text.
pub fn parse_matrix_csv(text: &str) -> Result<Vec<Vec<f64>>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| IoError::Shape(format!("bad number {f:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(row);
    }
    Ok(out)
}

/// Response matrix from CSV text. A first line that does not parse as
/// numbers is taken as a header.
pub fn parse_data_csv(text: &str) -> Result<DMatrix<f64>, IoError> {
    let first = text.lines().next().unwrap_or("");
    let has_header = first.split(',').any(|f| f.trim().parse::<f64>().is_err());
    let body = if has_header { text.split_once('\n').map_or("", |(_, rest)| rest) } else { text };
    let rows = parse_matrix_csv(body)?;
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != ncols) {
        return Err(IoError::Shape("data must be a non-empty rectangular table".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

/// Load a model from a JSON spec, or from a loading-matrix CSV plus a JSON
/// sidecar holding everything except `A`.
pub fn load_model(path: &Path, sidecar: Option<&Path>) -> Result<ModelSpec, IoError> {
    let text = read_to_string(path)?;
    match sidecar {
        None => parse_model_json(&text),
        Some(side) => {
            let mut spec = parse_model_json(&read_to_string(side)?)?;
            spec.a = parse_matrix_csv(&text)?;
            Ok(spec)
        }
    }
}

pub fn matrix_to_csv(m: &DMatrix<f64>, header: Option<&[String]>) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|x| format!("{x}")))?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::Shape(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
