//! Built-in parameter sets: the six simulation cases and the small
//! illustrative models used throughout the tests and the guide.
//!
//! [`case`] returns sign-normalized parameters. The published tables list
//! negative leading loadings for the third testlet (item 21, −.63) and for
//! the replacement testlet of Case 6 (item 31, −.56), so those columns are
//! flipped, together with the matching rows of Σ_G. [`case_as_published`]
//! returns the table values verbatim.
//!
//! Case 4 keeps item 1, items 11 and 12, and items 21–30. Its description
//! calls the last block "testlet 4", which can only mean the third block of
//! the 30-item table.
//!
//! Linear variants use unit unique variances.

use crate::model::{Link, LoadingStructure, ModelKind, ModelParams, UnrestrictedRhoParams};
use nalgebra::{DMatrix, DVector};

const D1: [f64; 10] = [1.51, 0.39, -0.62, -2.21, 1.12, -0.04, -0.02, 0.94, 0.82, 0.59];
const D2: [f64; 10] = [0.92, 0.78, 0.07, -1.99, 0.62, -0.06, -0.16, -1.47, -0.48, 0.42];
const D3: [f64; 10] = [1.36, -0.10, 0.39, -0.05, -1.38, -0.41, -0.39, -0.06, 1.10, 0.76];
const T3: [f64; 10] = [-0.63, 0.18, -0.84, 1.60, 0.33, -0.82, 0.49, 0.74, 0.58, -0.31];
const D4: [f64; 10] = [-0.16, -0.25, 0.70, 0.56, -0.69, -0.71, 0.36, 0.77, -0.11, 0.88];
const T4: [f64; 10] = [-0.56, -0.23, 1.56, 0.07, 0.13, 1.72, 0.46, -1.27, -0.69, -0.45];

/// Testlet factor correlations among the four published testlets.
const SIGMA4: [[f64; 4]; 4] = [
    [1.00, 0.44, 0.32, 0.26],
    [0.44, 1.00, 0.52, 0.21],
    [0.32, 0.52, 1.00, 0.29],
    [0.26, 0.21, 0.29, 1.00],
];

/// (main loading, testlet loading, intercept) for published item `n`
/// (1-based, 1..=40).
pub fn published_item(n: usize) -> (f64, f64, f64) {
    let i = (n - 1) % 10;
    match (n - 1) / 10 {
        0 => (1.0, 2.0, D1[i]),
        1 => (2.0, 1.0, D2[i]),
        2 => (1.0, T3[i], D3[i]),
        3 => (2.0, T4[i], D4[i]),
        _ => panic!("published items run from 1 to 40"),
    }
}

/// Published testlet (0-based, 0..4) of published item `n`.
fn published_testlet(n: usize) -> usize {
    (n - 1) / 10
}

fn build(items: &[usize], kind: ModelKind, link: Link) -> ModelParams {
    let mut testlets: Vec<usize> = Vec::new();
    for &n in items {
        let t = published_testlet(n);
        if !testlets.contains(&t) {
            testlets.push(t);
        }
    }
    let g = testlets.len();
    let j = items.len();
    let mut a = DMatrix::zeros(j, 1 + g);
    let mut d = DVector::zeros(j);
    let mut assignment = Vec::with_capacity(j);
    for (row, &n) in items.iter().enumerate() {
        let (main, spec, dd) = published_item(n);
        let local = testlets.iter().position(|&t| t == published_testlet(n)).unwrap();
        a[(row, 0)] = main;
        a[(row, 1 + local)] = spec;
        d[row] = dd;
        assignment.push(local);
    }
    let mut cov = DMatrix::identity(1 + g, 1 + g);
    if kind == ModelKind::Extended {
        for (x, &tx) in testlets.iter().enumerate() {
            for (y, &ty) in testlets.iter().enumerate() {
                cov[(1 + x, 1 + y)] = SIGMA4[tx][ty];
            }
        }
    }
    ModelParams {
        structure: LoadingStructure::new(1, g, assignment, a),
        intercepts: d,
        latent_cov: cov,
        unique_vars: (link == Link::Linear).then(|| DVector::from_element(j, 1.0)),
        kind,
        link,
    }
}

fn case_items(id: usize) -> Option<(Vec<usize>, ModelKind)> {
    let r = |a: usize, b: usize| (a..=b).collect::<Vec<_>>();
    Some(match id {
        1 => (r(1, 30), ModelKind::Standard),
        2 => (r(1, 20), ModelKind::Standard),
        3 => ([r(1, 10), r(21, 30)].concat(), ModelKind::Standard),
        4 => ([vec![1, 11, 12], r(21, 30)].concat(), ModelKind::Standard),
        5 => (r(1, 30), ModelKind::Extended),
        6 => ([r(1, 10), r(31, 40), r(21, 30)].concat(), ModelKind::Extended),
        _ => return None,
    })
}

/// Simulation case `id` (1..=6) exactly as tabulated, leading signs included.
pub fn case_as_published(id: usize, link: Link) -> Option<ModelParams> {
    let (items, kind) = case_items(id)?;
    Some(build(&items, kind, link))
}

/// Simulation case `id` (1..=6), sign-normalized.
pub fn case(id: usize, link: Link) -> Option<ModelParams> {
    let p = case_as_published(id, link)?;
    Some(p.normalize_signs().expect("published cases have no zero column"))
}

/// Published item numbers (1-based) making up case `id`.
pub fn case_item_numbers(id: usize) -> Option<Vec<usize>> {
    case_items(id).map(|x| x.0)
}

fn linear(kind: ModelKind, l: usize, assignment: Vec<usize>, a: DMatrix<f64>, lambda: DVector<f64>) -> ModelParams {
    let g = a.ncols() - l;
    let j = a.nrows();
    ModelParams {
        structure: LoadingStructure::new(l, g, assignment, a),
        intercepts: DVector::from_fn(j, |i, _| 0.1 * (i as f64) - 0.3),
        latent_cov: DMatrix::identity(l + g, l + g),
        unique_vars: Some(lambda),
        kind,
        link: Link::Linear,
    }
}

/// Seven-item standard model whose first testlet splits into two rank-2
/// halves, {1, 3} and {2, 4}: identifiable with only two testlets.
pub fn example1() -> ModelParams {
    let (a, b, c, d, e, f) = (1.0, 0.8, 0.6, 1.2, 0.9, 0.7);
    #[rustfmt::skip]
    let m = DMatrix::from_row_slice(7, 3, &[
        a, b, 0.0,
        a, b, 0.0,
        c, d, 0.0,
        c, d, 0.0,
        e, 0.0, f,
        e, 0.0, f,
        e, 0.0, f,
    ]);
    linear(ModelKind::Standard, 1, vec![0, 0, 0, 0, 1, 1, 1], m, DVector::from_element(7, 1.0))
}

/// Two-tier model (L = 2) where the first main factor lives in one testlet
/// only, so it trades off against that testlet's factor.
pub fn example2() -> ModelParams {
    #[rustfmt::skip]
    let m = DMatrix::from_row_slice(9, 5, &[
        1.0, 0.0, 2.0, 0.0, 0.0,
        1.0, 0.0, 3.0, 0.0, 0.0,
        1.0, 0.0, 4.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 1.0, 0.0,
        0.0, 1.0, 0.0, 1.0, 0.0,
        0.0, 1.0, 0.0, 1.0, 0.0,
        0.0, 1.0, 0.0, 0.0, 3.0,
        0.0, 1.0, 0.0, 0.0, 3.0,
        0.0, 1.0, 0.0, 0.0, 3.0,
    ]);
    let mut p = linear(ModelKind::TwoTier, 2, vec![0, 0, 0, 1, 1, 1, 2, 2, 2], m, DVector::from_element(9, 1.0));
    p.intercepts = DVector::zeros(9);
    p
}

/// Two-tier model (L = 3) with every main factor spread over two
/// testlets that is still not identifiable.
///
/// As written, the third main column opens with −1; it is flipped here.
pub fn example3() -> ModelParams {
    #[rustfmt::skip]
    let m = DMatrix::from_row_slice(9, 6, &[
        0.0, 1.0, 1.0, 1.0, 0.0, 0.0,
        0.0, 1.0, 1.0, 2.0, 0.0, 0.0,
        0.0, 1.0, 1.0, 3.0, 0.0, 0.0,
        2.0, 0.0, -1.0, 0.0, 3.0, 0.0,
        2.0, 0.0, -1.0, 0.0, 2.0, 0.0,
        2.0, 0.0, -1.0, 0.0, 1.0, 0.0,
        1.0, 1.0, 0.0, 0.0, 0.0, 2.0,
        1.0, 1.0, 0.0, 0.0, 0.0, 3.0,
        1.0, 1.0, 0.0, 0.0, 0.0, 1.0,
    ]);
    let mut p = linear(ModelKind::TwoTier, 3, vec![0, 0, 0, 1, 1, 1, 2, 2, 2], m, DVector::from_element(9, 1.0));
    p.intercepts = DVector::zeros(9);
    p
}

/// Nine-item probit model with three 3-item testlets and a common main
/// loading (P1 holds). With `eight_items` the last item is dropped and
/// the third testlet falls to two items.
pub fn probit_three_by_three(eight_items: bool) -> ModelParams {
    let (a, b, c, d) = (1.0, 0.8, 1.2, 0.6);
    let j = if eight_items { 8 } else { 9 };
    let mut m = DMatrix::zeros(j, 4);
    let mut assignment = Vec::new();
    for i in 0..j {
        let g = i / 3;
        m[(i, 0)] = a;
        m[(i, 1 + g)] = [b, c, d][g];
        assignment.push(g);
    }
    ModelParams {
        structure: LoadingStructure::new(1, 3, assignment, m),
        intercepts: DVector::from_fn(j, |i, _| [0.4, -0.2, 0.9, -1.1, 0.0, 0.3, 0.7, -0.5, 0.2][i]),
        latent_cov: DMatrix::identity(4, 4),
        unique_vars: None,
        kind: ModelKind::Standard,
        link: Link::Probit,
    }
}

/// Two-testlet, eight-item loading matrices with homogeneous rows within
/// each testlet. `which` is 1 for (0.8, 0.3) in both testlets, 2 for
/// (0.7, 0.4) then (0.8, 0.3). Unique variances make every item
/// variance 1.
pub fn two_testlet(which: usize) -> ModelParams {
    let first = if which == 1 { (0.8, 0.3) } else { (0.7, 0.4) };
    let second = (0.8, 0.3);
    let mut m = DMatrix::zeros(8, 3);
    let mut lam = DVector::zeros(8);
    for i in 0..8 {
        let (x, y) = if i < 4 { first } else { second };
        m[(i, 0)] = x;
        m[(i, 1 + i / 4)] = y;
        lam[i] = 1.0 - x * x - y * y;
    }
    linear(ModelKind::Standard, 1, vec![0, 0, 0, 0, 1, 1, 1, 1], m, lam)
}

/// Extended model with testlets of 2, 4 and 3 items, every testlet block of
/// rank 2 and every testlet correlation nonzero.
pub fn extended_two_item_example() -> ModelParams {
    #[rustfmt::skip]
    let m = DMatrix::from_row_slice(9, 4, &[
        1.0, 0.8, 0.0, 0.0,
        0.7, 1.1, 0.0, 0.0,
        1.2, 0.0, 0.5, 0.0,
        0.9, 0.0, 1.0, 0.0,
        0.6, 0.0, 0.9, 0.0,
        1.1, 0.0, 0.3, 0.0,
        0.8, 0.0, 0.0, 0.6,
        1.0, 0.0, 0.0, 1.3,
        0.5, 0.0, 0.0, 0.9,
    ]);
    let mut p = linear(ModelKind::Extended, 1, vec![0, 0, 1, 1, 1, 1, 2, 2, 2], m, DVector::from_element(9, 1.0));
    #[rustfmt::skip]
    let sg = [
        1.0, 0.3, 0.2,
        0.3, 1.0, 0.4,
        0.2, 0.4, 1.0,
    ];
    for x in 0..3 {
        for y in 0..3 {
            p.latent_cov[(1 + x, 1 + y)] = sg[3 * x + y];
        }
    }
    p
}

/// Case 1 as a linear model with primary-testlet correlations ρ.
pub fn case1_with_rho(rho: [f64; 3]) -> UnrestrictedRhoParams {
    let mut base = case(1, Link::Linear).unwrap();
    base.kind = ModelKind::Extended;
    UnrestrictedRhoParams { base, rho: DVector::from_row_slice(&rho) }
}

/// Linear model with ρ where the main loadings on each testlet are
/// proportional to its testlet loadings, so a₀ lies in the range of A_G.
pub fn rho_in_range_example() -> UnrestrictedRhoParams {
    let mut m = DMatrix::zeros(6, 3);
    let rows = [(0.6, 1.2), (0.4, 0.8), (0.5, 1.0), (0.9, 0.6), (1.2, 0.8), (0.3, 0.2)];
    for (i, &(x, y)) in rows.iter().enumerate() {
        m[(i, 0)] = x;
        m[(i, 1 + i / 3)] = y;
    }
    let mut base = linear(ModelKind::Extended, 1, vec![0, 0, 0, 1, 1, 1], m, DVector::from_element(6, 1.0));
    base.latent_cov[(1, 2)] = 0.2;
    base.latent_cov[(2, 1)] = 0.2;
    UnrestrictedRhoParams { base, rho: DVector::from_row_slice(&[0.1, -0.1]) }
}
