//! Parameter types for standard, extended and two-tier bifactor models.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Loadings with absolute value at or below this are treated as zero.
pub const DEFAULT_ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// One primary factor, orthogonal testlet factors.
    Standard,
    /// One primary factor, correlated testlet factors.
    Extended,
    /// Several correlated primary factors, orthogonal testlet factors.
    TwoTier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Linear,
    Probit,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("item {item} is assigned to testlet {testlet}, which does not exist")]
    BadAssignment { item: usize, testlet: usize },
    #[error("testlet {0} has no items")]
    EmptyTestlet(usize),
    #[error("item {item} loads on testlet {testlet} but belongs to testlet {own}")]
    OffTestletLoading { item: usize, testlet: usize, own: usize },
    #[error("column {0} of the loading matrix is zero")]
    ZeroColumn(usize),
    #[error("column {column} starts with a negative loading at item {item}")]
    NegativeLeadingLoading { column: usize, item: usize },
    #[error("latent covariance: {0}")]
    LatentCov(String),
    #[error("latent covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("unique variance of item {0} is not positive")]
    NonPositiveUniqueVar(usize),
    #[error("unique variances must be present for the linear link and absent for probit")]
    UniqueVarPresence,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Loading matrix plus the item-to-testlet map.
///
/// Indices are 0-based throughout the Rust API. The JSON format in [`crate::io`]
/// uses 1-based testlet labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingStructure {
    pub n_primary: usize,
    pub n_testlets: usize,
    pub assignment: Vec<usize>,
    /// J × (L + G). Column `L + g` holds the loadings on testlet `g`.
    pub loadings: DMatrix<f64>,
    pub zero_tol: f64,
}

impl LoadingStructure {
    pub fn new(
        n_primary: usize,
        n_testlets: usize,
        assignment: Vec<usize>,
        loadings: DMatrix<f64>,
    ) -> Self {
        LoadingStructure { n_primary, n_testlets, assignment, loadings, zero_tol: DEFAULT_ZERO_TOL }
    }

    pub fn n_items(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_factors(&self) -> usize {
        self.n_primary + self.n_testlets
    }

    pub fn testlet_col(&self, g: usize) -> usize {
        self.n_primary + g
    }

    pub fn is_nonzero(&self, x: f64) -> bool {
        x.abs() > self.zero_tol
    }

    /// Items assigned to testlet `g`, in item order.
    pub fn testlet_items(&self, g: usize) -> Vec<usize> {
        (0..self.n_items()).filter(|&j| self.assignment[j] == g).collect()
    }

    /// Rows of `items` restricted to the given columns.
    pub fn submatrix(&self, items: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(items.len(), cols.len(), |r, c| self.loadings[(items[r], cols[c])])
    }

    /// Primary columns plus the testlet's own column, over the testlet's items.
    pub fn testlet_block(&self, g: usize) -> DMatrix<f64> {
        let mut cols: Vec<usize> = (0..self.n_primary).collect();
        cols.push(self.testlet_col(g));
        self.submatrix(&self.testlet_items(g), &cols)
    }

    /// Boolean sparsity pattern of the loadings.
    pub fn pattern(&self) -> DMatrix<bool> {
        self.loadings.map(|x| self.is_nonzero(x))
    }

    /// Structural checks that do not involve signs or values.
    pub fn check_shape(&self) -> Result<(), ModelError> {
        let j = self.n_items();
        if self.n_primary == 0 || self.n_testlets == 0 || j == 0 {
            return Err(ModelError::Dimension("need at least one item, primary factor and testlet".into()));
        }
        if self.loadings.nrows() != j || self.loadings.ncols() != self.n_factors() {
            return Err(ModelError::Dimension(format!(
                "loadings are {}x{}, expected {}x{}",
                self.loadings.nrows(),
                self.loadings.ncols(),
                j,
                self.n_factors()
            )));
        }
        if self.loadings.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite("loadings"));
        }
        for (item, &g) in self.assignment.iter().enumerate() {
            if g >= self.n_testlets {
                return Err(ModelError::BadAssignment { item, testlet: g });
            }
        }
        for g in 0..self.n_testlets {
            if !self.assignment.contains(&g) {
                return Err(ModelError::EmptyTestlet(g));
            }
        }
        for item in 0..j {
            for g in 0..self.n_testlets {
                if g != self.assignment[item] && self.loadings[(item, self.testlet_col(g))] != 0.0 {
                    return Err(ModelError::OffTestletLoading { item, testlet: g, own: self.assignment[item] });
                }
            }
        }
        Ok(())
    }

    /// Zero-column and leading-sign checks.
    pub fn check_signs(&self) -> Result<(), ModelError> {
        for c in 0..self.n_factors() {
            match self.leading_item(c) {
                None => return Err(ModelError::ZeroColumn(c)),
                Some(item) if self.loadings[(item, c)] < 0.0 => {
                    return Err(ModelError::NegativeLeadingLoading { column: c, item })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// First item with a nonzero loading in column `c`.
    pub fn leading_item(&self, c: usize) -> Option<usize> {
        (0..self.n_items()).find(|&j| self.is_nonzero(self.loadings[(j, c)]))
    }
}

/// A full parameter set. `latent_cov` is the (L+G)×(L+G) factor covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub structure: LoadingStructure,
    pub intercepts: DVector<f64>,
    pub latent_cov: DMatrix<f64>,
    pub unique_vars: Option<DVector<f64>>,
    pub kind: ModelKind,
    pub link: Link,
}

/// Extended model whose primary factor may correlate with the testlet factors.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrestrictedRhoParams {
    /// Base parameters with an exactly zero primary-testlet cross block.
    pub base: ModelParams,
    pub rho: DVector<f64>,
}

impl ModelParams {
    pub fn n_items(&self) -> usize {
        self.structure.n_items()
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.structure.loadings
    }

    /// Testlet block of the latent covariance.
    pub fn sigma_g(&self) -> DMatrix<f64> {
        let l = self.structure.n_primary;
        let g = self.structure.n_testlets;
        self.latent_cov.view((l, l), (g, g)).into_owned()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        validate_parts(self, None)
    }

    pub fn normalize_signs(&self) -> Result<ModelParams, ModelError> {
        let mut p = self.clone();
        flip_columns(&mut p.structure, &mut p.latent_cov)?;
        Ok(p)
    }
}

impl UnrestrictedRhoParams {
    /// Latent covariance with ρ placed in the primary-testlet cross block.
    pub fn full_latent_cov(&self) -> DMatrix<f64> {
        let mut s = self.base.latent_cov.clone();
        for (g, &r) in self.rho.iter().enumerate() {
            s[(0, 1 + g)] = r;
            s[(1 + g, 0)] = r;
        }
        s
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.base.structure.n_primary != 1 {
            return Err(ModelError::Dimension("unrestricted ρ needs exactly one primary factor".into()));
        }
        if self.rho.len() != self.base.structure.n_testlets {
            return Err(ModelError::Dimension("ρ must have one entry per testlet".into()));
        }
        if self.rho.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite("rho"));
        }
        validate_parts(&self.base, Some(&self.rho))
    }

    pub fn normalize_signs(&self) -> Result<UnrestrictedRhoParams, ModelError> {
        let mut base = self.base.clone();
        let mut full = self.full_latent_cov();
        flip_columns(&mut base.structure, &mut full)?;
        let g = base.structure.n_testlets;
        let rho = DVector::from_fn(g, |i, _| full[(0, 1 + i)]);
        for i in 0..g {
            full[(0, 1 + i)] = 0.0;
            full[(1 + i, 0)] = 0.0;
        }
        base.latent_cov = full;
        Ok(UnrestrictedRhoParams { base, rho })
    }
}

fn validate_parts(p: &ModelParams, rho: Option<&DVector<f64>>) -> Result<(), ModelError> {
    let s = &p.structure;
    s.check_shape()?;
    let j = s.n_items();
    let k = s.n_factors();
    if p.intercepts.len() != j {
        return Err(ModelError::Dimension("intercepts must have one entry per item".into()));
    }
    if p.intercepts.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::NonFinite("intercepts"));
    }
    s.check_signs()?;
    let cov = &p.latent_cov;
    if cov.nrows() != k || cov.ncols() != k {
        return Err(ModelError::Dimension(format!("latent covariance must be {k}x{k}")));
    }
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::NonFinite("latent covariance"));
    }
    for a in 0..k {
        if (cov[(a, a)] - 1.0).abs() > 1e-12 {
            return Err(ModelError::LatentCov(format!("diagonal entry {a} is {}, not 1", cov[(a, a)])));
        }
        for b in 0..a {
            if (cov[(a, b)] - cov[(b, a)]).abs() > 1e-12 {
                return Err(ModelError::LatentCov("not symmetric".into()));
            }
        }
    }
    let l = s.n_primary;
    let free = |a: usize, b: usize| -> bool {
        match p.kind {
            ModelKind::Standard => false,
            ModelKind::Extended => a >= l && b >= l,
            ModelKind::TwoTier => a < l && b < l,
        }
    };
    if p.kind == ModelKind::Extended && l != 1 {
        return Err(ModelError::Dimension("the extended model has exactly one primary factor".into()));
    }
    if p.kind == ModelKind::Standard && l != 1 {
        return Err(ModelError::Dimension("the standard model has exactly one primary factor".into()));
    }
    for a in 0..k {
        for b in 0..k {
            if a != b && !free(a, b) && cov[(a, b)] != 0.0 {
                return Err(ModelError::LatentCov(format!(
                    "entry ({a}, {b}) must be zero for the {:?} model",
                    p.kind
                )));
            }
        }
    }
    let full = match rho {
        None => cov.clone(),
        Some(r) => {
            let mut f = cov.clone();
            for (g, &x) in r.iter().enumerate() {
                f[(0, 1 + g)] = x;
                f[(1 + g, 0)] = x;
            }
            f
        }
    };
    if !crate::linalg::is_positive_definite(&full) {
        return Err(ModelError::NotPositiveDefinite);
    }
    match (p.link, &p.unique_vars) {
        (Link::Linear, Some(lam)) => {
            if lam.len() != j {
                return Err(ModelError::Dimension("unique variances must have one entry per item".into()));
            }
            if let Some(i) = lam.iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(ModelError::NonPositiveUniqueVar(i));
            }
        }
        (Link::Probit, None) => {}
        _ => return Err(ModelError::UniqueVarPresence),
    }
    Ok(())
}

/// Flip every column whose leading nonzero loading is negative, negating the
/// matching row and column of `cov`. Returns the flipped columns.
fn flip_columns(s: &mut LoadingStructure, cov: &mut DMatrix<f64>) -> Result<Vec<usize>, ModelError> {
    let mut flipped = Vec::new();
    for c in 0..s.n_factors() {
        let lead = s.leading_item(c).ok_or(ModelError::ZeroColumn(c))?;
        if s.loadings[(lead, c)] < 0.0 {
            s.loadings.column_mut(c).neg_mut();
            // Negating row and column c leaves the diagonal alone.
            for a in 0..cov.nrows() {
                if a != c {
                    cov[(a, c)] = -cov[(a, c)];
                    cov[(c, a)] = -cov[(c, a)];
                }
            }
            flipped.push(c);
        }
    }
    // -0.0 entries would print oddly; clear them.
    for x in s.loadings.iter_mut().chain(cov.iter_mut()) {
        if *x == 0.0 {
            *x = 0.0;
        }
    }
    Ok(flipped)
}

/// Max-norm distance between two parameter sets of the same shape.
///
/// Compares loadings, intercepts, latent covariances and unique variances.
/// Returns infinity when shapes differ.
pub fn param_distance(a: &ModelParams, b: &ModelParams) -> f64 {
    let mut d: f64 = 0.0;
    let mut push = |x: &[f64], y: &[f64]| {
        if x.len() != y.len() {
            d = f64::INFINITY;
            return;
        }
        for (u, v) in x.iter().zip(y) {
            d = d.max((u - v).abs());
        }
    };
    push(a.structure.loadings.as_slice(), b.structure.loadings.as_slice());
    push(a.intercepts.as_slice(), b.intercepts.as_slice());
    push(a.latent_cov.as_slice(), b.latent_cov.as_slice());
    match (&a.unique_vars, &b.unique_vars) {
        (Some(x), Some(y)) => push(x.as_slice(), y.as_slice()),
        (None, None) => {}
        _ => d = f64::INFINITY,
    }
    d
}
