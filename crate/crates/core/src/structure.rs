//! Structural sets and rank conditions computed from a loading matrix.
//!
//! Public functions take 0-based testlet and item indices. [`StructuralReport`]
//! is an output artifact and stores 1-based labels.

use crate::linalg::{disjoint_bases, numeric_rank, rank_with_margin, rows_full_column_rank, select_rows, RANK_TOL};
use crate::model::{LoadingStructure, ModelKind};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructureError {
    #[error("this set is defined only for a single primary factor (got L = {0})")]
    NeedsSinglePrimary(usize),
    #[error("testlet index {0} out of range")]
    NoSuchTestlet(usize),
    #[error("Kruskal rank search would visit {0} column subsets, above the budget")]
    KruskalBudget(u128),
}

/// Search limits for the combinatorial conditions.
#[derive(Debug, Clone, Copy)]
pub struct SearchConfig {
    pub rank_tol: f64,
    /// Exhaustive C1 search runs when the number of candidate bases is at
    /// most this.
    pub exhaustive_bases: u128,
    /// Random restarts for the C1 fallback.
    pub random_trials: usize,
    pub seed: u64,
    /// Column subsets Kruskal rank may examine.
    pub kruskal_budget: u128,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            rank_tol: RANK_TOL,
            exhaustive_bases: 200_000,
            random_trials: 20_000,
            seed: 0x5eed,
            kruskal_budget: 1_000_000,
        }
    }
}

/// Outcome of a partition search.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision<W> {
    Holds { witness: W },
    Fails,
    /// The search budget ran out before a witness was found.
    Undetermined,
}

impl<W> Decision<W> {
    pub fn holds(&self) -> bool {
        matches!(self, Decision::Holds { .. })
    }
}

/// Witness for C0: one pair of disjoint full-rank item sets per deleted item.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct C0Witness {
    pub deleted: usize,
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

/// Witness for C1, item labels 1-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct C1Witness {
    pub b1: Vec<usize>,
    pub b2: Vec<usize>,
    pub b2a: Vec<usize>,
}

/// Items of testlet `g` with a nonzero loading on the testlet factor.
pub fn compute_q(s: &LoadingStructure, g: usize) -> Vec<usize> {
    let c = s.testlet_col(g);
    s.testlet_items(g).into_iter().filter(|&j| s.is_nonzero(s.loadings[(j, c)])).collect()
}

/// Items of testlet `g` with a nonzero main loading.
pub fn compute_q0(s: &LoadingStructure, g: usize) -> Result<Vec<usize>, StructureError> {
    single_primary(s)?;
    Ok(s.testlet_items(g).into_iter().filter(|&j| s.is_nonzero(s.loadings[(j, 0)])).collect())
}

fn single_primary(s: &LoadingStructure) -> Result<(), StructureError> {
    if s.n_primary == 1 {
        Ok(())
    } else {
        Err(StructureError::NeedsSinglePrimary(s.n_primary))
    }
}

/// Testlets with at least one nonzero main loading.
pub fn compute_h1(s: &LoadingStructure) -> Result<Vec<usize>, StructureError> {
    single_primary(s)?;
    Ok((0..s.n_testlets).filter(|&g| !compute_q0(s, g).unwrap().is_empty()).collect())
}

/// Testlets with at least two nonzero main loadings.
pub fn compute_h6(s: &LoadingStructure) -> Result<Vec<usize>, StructureError> {
    single_primary(s)?;
    Ok((0..s.n_testlets).filter(|&g| compute_q0(s, g).unwrap().len() >= 2).collect())
}

/// A testlet and the two item sets its rank-2 blocks split into.
pub type TestletSplit = (usize, [Vec<usize>; 2]);

/// Testlets whose items split into two parts with rank-2 blocks, with the
/// split found (0-based items).
pub fn compute_h2(s: &LoadingStructure) -> Result<Vec<TestletSplit>, StructureError> {
    compute_h2_with(s, RANK_TOL)
}

pub fn compute_h2_with(s: &LoadingStructure, tol: f64) -> Result<Vec<TestletSplit>, StructureError> {
    single_primary(s)?;
    let mut out = Vec::new();
    for g in 0..s.n_testlets {
        if let Some(split) = testlet_split(s, g, tol) {
            out.push((g, split));
        }
    }
    Ok(out)
}

fn testlet_split(s: &LoadingStructure, g: usize, tol: f64) -> Option<[Vec<usize>; 2]> {
    let items = s.testlet_items(g);
    let block = s.testlet_block(g);
    let local: Vec<usize> = (0..items.len()).collect();
    let sets = disjoint_bases(&block, &local, 2, tol)?;
    // Leftover rows go to the first part; adding rows keeps it full rank.
    let mut first: Vec<usize> = sets[0].iter().map(|&r| items[r]).collect();
    let second: Vec<usize> = sets[1].iter().map(|&r| items[r]).collect();
    for &j in &items {
        if !first.contains(&j) && !second.contains(&j) {
            first.push(j);
        }
    }
    first.sort_unstable();
    Some([first, second])
}

/// Testlets whose main-plus-testlet block has full column rank.
///
/// For a single primary factor this is H3; for several it is H5.
pub fn compute_h3(s: &LoadingStructure) -> Vec<usize> {
    compute_h5(s)
}

/// Testlets whose main-factor rows have full column rank L.
pub fn compute_h4(s: &LoadingStructure) -> Vec<usize> {
    let cols: Vec<usize> = (0..s.n_primary).collect();
    (0..s.n_testlets)
        .filter(|&g| numeric_rank(&s.submatrix(&s.testlet_items(g), &cols), RANK_TOL) == s.n_primary)
        .collect()
}

/// Testlets whose block has full column rank L + 1.
pub fn compute_h5(s: &LoadingStructure) -> Vec<usize> {
    (0..s.n_testlets)
        .filter(|&g| numeric_rank(&s.testlet_block(g), RANK_TOL) == s.n_primary + 1)
        .collect()
}

/// Largest R such that every R columns of `m` are linearly independent.
pub fn kruskal_rank(m: &DMatrix<f64>) -> Result<usize, StructureError> {
    kruskal_rank_with(m, RANK_TOL, SearchConfig::default().kruskal_budget)
}

pub fn kruskal_rank_with(m: &DMatrix<f64>, tol: f64, budget: u128) -> Result<usize, StructureError> {
    let n = m.ncols();
    let top = n.min(m.nrows());
    let cost: u128 = (1..=top).map(|r| binomial(n, r)).sum();
    if cost > budget {
        return Err(StructureError::KruskalBudget(cost));
    }
    let mut krank = 0;
    for r in 1..=top {
        let all_independent = Combinations::new(n, r).all(|cols| {
            let sub = DMatrix::from_fn(m.nrows(), r, |i, c| m[(i, cols[c])]);
            numeric_rank(&sub, tol) == r
        });
        if !all_independent {
            break;
        }
        krank = r;
    }
    Ok(krank)
}

pub(crate) fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Lexicographic k-subsets of 0..n.
pub(crate) struct Combinations {
    n: usize,
    cur: Vec<usize>,
    done: bool,
}

impl Combinations {
    pub(crate) fn new(n: usize, k: usize) -> Self {
        Combinations { n, cur: (0..k).collect(), done: k > n }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.cur.clone();
        let k = self.cur.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.cur[i] < self.n - k + i {
                self.cur[i] += 1;
                for t in i + 1..k {
                    self.cur[t] = self.cur[t - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

/// Condition C0: after deleting any row, the remaining rows split into two
/// disjoint row sets of full column rank. Witness items are 1-based.
///
/// Decided exactly by matroid partition, so the answer is never undetermined.
pub fn check_c0(a: &DMatrix<f64>, tol: f64) -> Decision<Vec<C0Witness>> {
    let j = a.nrows();
    let k = a.ncols();
    if j < 2 * k + 1 {
        return Decision::Fails;
    }
    let mut witnesses = Vec::with_capacity(j);
    for del in 0..j {
        let rest: Vec<usize> = (0..j).filter(|&r| r != del).collect();
        match disjoint_bases(a, &rest, 2, tol) {
            Some(sets) => {
                let first: Vec<usize> = rest.iter().copied().filter(|r| !sets[1].contains(r)).collect();
                witnesses.push(C0Witness {
                    deleted: del + 1,
                    first: first.iter().map(|r| r + 1).collect(),
                    second: sets[1].iter().map(|r| r + 1).collect(),
                });
            }
            None => return Decision::Fails,
        }
    }
    // Re-verify independently of the search.
    for w in &witnesses {
        let f: Vec<usize> = w.first.iter().map(|r| r - 1).collect();
        let s: Vec<usize> = w.second.iter().map(|r| r - 1).collect();
        assert!(rows_full_column_rank(a, &f, tol) && rows_full_column_rank(a, &s, tol));
    }
    Decision::Holds { witness: witnesses }
}

/// Condition C1: a split of the items into B1 of full column rank and B2
/// holding a full-rank subset B2a such that B2 minus any member of B2a stays
/// full rank.
///
/// B1 can be shrunk to a basis without loss, and then the best B2a is the
/// set of non-coloops of B2. So C1 holds iff some basis has a complement
/// that is full rank with no coloops. Three disjoint bases settle it at
/// once; otherwise bases are enumerated when there are few enough, and
/// sampled at random beyond that, in which case a miss is undetermined.
pub fn check_c1(a: &DMatrix<f64>, cfg: &SearchConfig) -> Decision<C1Witness> {
    let j = a.nrows();
    let k = a.ncols();
    let tol = cfg.rank_tol;
    let all: Vec<usize> = (0..j).collect();
    if j < 2 * k + 1 {
        return Decision::Fails;
    }
    if let Some(sets) = disjoint_bases(a, &all, 3, tol) {
        let b1 = sets[0].clone();
        let b2: Vec<usize> = all.iter().copied().filter(|r| !b1.contains(r)).collect();
        let b2a = non_coloops(a, &b2, tol);
        return Decision::Holds { witness: c1_witness(b1, b2, b2a) };
    }
    if disjoint_bases(a, &all, 2, tol).is_none() {
        return Decision::Fails;
    }
    let try_basis = |b1: &[usize]| -> Option<C1Witness> {
        if !rows_full_column_rank(a, b1, tol) {
            return None;
        }
        let b2: Vec<usize> = all.iter().copied().filter(|r| !b1.contains(r)).collect();
        if !rows_full_column_rank(a, &b2, tol) {
            return None;
        }
        let b2a = non_coloops(a, &b2, tol);
        if b2a.len() == b2.len() {
            Some(c1_witness(b1.to_vec(), b2, b2a))
        } else {
            None
        }
    };
    if binomial(j, k) <= cfg.exhaustive_bases {
        for b1 in Combinations::new(j, k) {
            if let Some(w) = try_basis(&b1) {
                return Decision::Holds { witness: w };
            }
        }
        return Decision::Fails;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = all.clone();
    for _ in 0..cfg.random_trials {
        order.shuffle(&mut rng);
        // Greedy basis in random order.
        let mut b1: Vec<usize> = Vec::with_capacity(k);
        for &r in &order {
            let mut t = b1.clone();
            t.push(r);
            if numeric_rank(&select_rows(a, &t), tol) == t.len() {
                b1 = t;
                if b1.len() == k {
                    break;
                }
            }
        }
        b1.sort_unstable();
        if let Some(w) = try_basis(&b1) {
            return Decision::Holds { witness: w };
        }
    }
    Decision::Undetermined
}

fn c1_witness(b1: Vec<usize>, b2: Vec<usize>, b2a: Vec<usize>) -> C1Witness {
    let one = |v: Vec<usize>| v.into_iter().map(|r| r + 1).collect();
    C1Witness { b1: one(b1), b2: one(b2), b2a: one(b2a) }
}

fn non_coloops(a: &DMatrix<f64>, rows: &[usize], tol: f64) -> Vec<usize> {
    rows.iter()
        .copied()
        .filter(|&r| {
            let rest: Vec<usize> = rows.iter().copied().filter(|&x| x != r).collect();
            rows_full_column_rank(a, &rest, tol)
        })
        .collect()
}

/// Every structural quantity the identifiability rules use.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuralReport {
    pub zero_tol: f64,
    pub rank_tol: f64,
    /// |Q_g| per testlet, in testlet order.
    pub q_sizes: Vec<usize>,
    /// Q_g members (1-based items) per testlet.
    pub q_members: Vec<Vec<usize>>,
    /// |Q_{0,g}| per testlet (single primary factor only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q0_sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h1: Option<Vec<usize>>,
    /// Testlets in H2 with their item split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h2: Option<Vec<H2Entry>>,
    /// H3 for a single primary factor, H5 otherwise.
    pub h3: Vec<usize>,
    pub h4: Vec<usize>,
    pub h5: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h6: Option<Vec<usize>>,
    /// Smallest retained singular value ratio among the testlet blocks that
    /// were judged full rank.
    pub min_rank_margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c0: Option<Decision<Vec<C0Witness>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c1: Option<Decision<C1Witness>>,
    /// Kruskal rank of the transposed testlet block, per testlet.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kruskal: Option<Vec<Option<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct H2Entry {
    pub testlet: usize,
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

impl StructuralReport {
    pub fn h1_len(&self) -> usize {
        self.h1.as_ref().map_or(0, Vec::len)
    }
    pub fn h2_len(&self) -> usize {
        self.h2.as_ref().map_or(0, Vec::len)
    }
    pub fn h6_len(&self) -> usize {
        self.h6.as_ref().map_or(0, Vec::len)
    }
}

/// Build the report. C0 and C1 are computed only for two-tier models, and
/// Kruskal ranks only for extended ones.
pub fn report(s: &LoadingStructure, kind: ModelKind, cfg: &SearchConfig) -> StructuralReport {
    let one = |v: &[usize]| v.iter().map(|x| x + 1).collect::<Vec<_>>();
    let qs: Vec<Vec<usize>> = (0..s.n_testlets).map(|g| compute_q(s, g)).collect();
    let single = s.n_primary == 1;
    let h5 = compute_h5(s);
    let min_rank_margin = h5
        .iter()
        .map(|&g| rank_with_margin(&s.testlet_block(g), cfg.rank_tol).1)
        .fold(f64::INFINITY, f64::min);
    let mut r = StructuralReport {
        zero_tol: s.zero_tol,
        rank_tol: cfg.rank_tol,
        q_sizes: qs.iter().map(Vec::len).collect(),
        q_members: qs.iter().map(|q| one(q)).collect(),
        q0_sizes: None,
        h1: None,
        h2: None,
        h3: one(&h5),
        h4: one(&compute_h4(s)),
        h5: one(&h5),
        h6: None,
        min_rank_margin: if min_rank_margin.is_finite() { min_rank_margin } else { 0.0 },
        c0: None,
        c1: None,
        kruskal: None,
    };
    if single {
        r.q0_sizes = Some((0..s.n_testlets).map(|g| compute_q0(s, g).unwrap().len()).collect());
        r.h1 = Some(one(&compute_h1(s).unwrap()));
        r.h6 = Some(one(&compute_h6(s).unwrap()));
        r.h2 = Some(
            compute_h2_with(s, cfg.rank_tol)
                .unwrap()
                .into_iter()
                .map(|(g, [a, b])| H2Entry { testlet: g + 1, first: one(&a), second: one(&b) })
                .collect(),
        );
    }
    if kind == ModelKind::TwoTier {
        r.c0 = Some(check_c0(&s.loadings, cfg.rank_tol));
        r.c1 = Some(check_c1(&s.loadings, cfg));
    }
    if kind == ModelKind::Extended {
        r.kruskal = Some(
            (0..s.n_testlets)
                .map(|g| kruskal_rank_with(&s.testlet_block(g).transpose(), cfg.rank_tol, cfg.kruskal_budget).ok())
                .collect(),
        );
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::Link;

    #[test]
    fn table1_sets() {
        let p = fixtures::case(1, Link::Probit).unwrap();
        let s = &p.structure;
        assert_eq!(compute_q(s, 0).len(), 10);
        assert_eq!(compute_h1(s).unwrap(), vec![0, 1, 2]);
        // Testlets 1 and 2 have proportional rows.
        assert_eq!(compute_h3(s), vec![2]);
        assert_eq!(compute_h2(s).unwrap().iter().map(|x| x.0).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn q_skips_zero_testlet_loadings() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 1.0, 0.5, 1.0, 0.0]);
        let s = LoadingStructure::new(1, 1, vec![0, 0, 0], a);
        assert_eq!(compute_q(&s, 0), vec![0, 1]);
    }

    #[test]
    fn example1_split() {
        let s = fixtures::example1().structure;
        assert_eq!(compute_q(&s, 1).len(), 3);
        let h2 = compute_h2(&s).unwrap();
        assert_eq!(h2.len(), 1);
        let (g, [a, b]) = &h2[0];
        assert_eq!(*g, 0);
        let mut parts = [a.clone(), b.clone()];
        parts.sort();
        assert_eq!(parts, [vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn two_testlet_matrices_have_no_split() {
        for s in [fixtures::two_testlet(1).structure, fixtures::two_testlet(2).structure] {
            assert_eq!(compute_h1(&s).unwrap(), vec![0, 1]);
            assert_eq!(compute_h6(&s).unwrap(), vec![0, 1]);
            assert!(compute_h2(&s).unwrap().is_empty());
        }
    }

    #[test]
    fn three_item_testlet_never_splits() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 0.3, 1.0, 2.0, 0.7]);
        let s = LoadingStructure::new(1, 1, vec![0, 0, 0], a);
        assert!(compute_h2(&s).unwrap().is_empty());
    }

    #[test]
    fn h3_for_cases_5_and_6() {
        assert_eq!(compute_h3(&fixtures::case(5, Link::Probit).unwrap().structure).len(), 1);
        assert_eq!(compute_h3(&fixtures::case(6, Link::Probit).unwrap().structure).len(), 2);
    }

    #[test]
    fn h4_on_two_tier_examples() {
        let s2 = fixtures::example2().structure;
        assert!(!compute_h4(&s2).contains(&0));
        let s3 = fixtures::example3().structure;
        assert!(!compute_h4(&s3).contains(&0));
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let s = LoadingStructure::new(2, 1, vec![0, 0, 0], a);
        assert_eq!(compute_h4(&s), vec![0]);
    }

    #[test]
    fn single_primary_sets_reject_two_tier() {
        let s = fixtures::example2().structure;
        assert_eq!(compute_h1(&s), Err(StructureError::NeedsSinglePrimary(2)));
    }

    #[test]
    fn kruskal_examples() {
        let b = fixtures::case(1, Link::Probit).unwrap().structure.testlet_block(2);
        assert_eq!(kruskal_rank(&b.transpose()).unwrap(), 2);
        let z = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 2.0]);
        assert_eq!(kruskal_rank(&z).unwrap(), 0);
        let prop = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 1.0, 1.0, 2.0, 3.0]);
        assert_eq!(kruskal_rank(&prop).unwrap(), 1);
        let wide = DMatrix::from_element(60, 60, 1.0);
        assert!(matches!(kruskal_rank(&wide), Err(StructureError::KruskalBudget(_))));
    }

    #[test]
    fn c0_examples() {
        let a = fixtures::case(1, Link::Linear).unwrap().structure.loadings;
        let d = check_c0(&a, RANK_TOL);
        let Decision::Holds { witness } = d else { panic!("C0 should hold for case 1") };
        assert_eq!(witness.len(), 30);
        // A two-item testlet breaks C0.
        let a4 = fixtures::case(4, Link::Linear).unwrap().structure.loadings;
        assert_eq!(check_c0(&a4, RANK_TOL), Decision::Fails);
        let small = DMatrix::identity(4, 3);
        assert_eq!(check_c0(&small, RANK_TOL), Decision::Fails);
    }

    #[test]
    fn c1_examples() {
        let cfg = SearchConfig::default();
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 0.3, 1.0, 2.0, 0.7]);
        assert_eq!(check_c1(&a, &cfg), Decision::Fails);
        let mut rows = Vec::new();
        for _ in 0..3 {
            rows.extend_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let a = DMatrix::from_row_slice(6, 2, &rows);
        let Decision::Holds { witness } = check_c1(&a, &cfg) else { panic!() };
        let b1: Vec<usize> = witness.b1.iter().map(|r| r - 1).collect();
        assert!(rows_full_column_rank(&a, &b1, RANK_TOL));
        // Exactly two copies of each basis row: the complement of any basis
        // consists of coloops.
        let a = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(check_c1(&a, &cfg), Decision::Fails);
    }

    #[test]
    fn c1_needs_enumeration_beyond_three_bases() {
        // Two disjoint bases plus one spare row: no three disjoint bases,
        // but B1 = {e1, e2} leaves {e1, e2, e1+e2}, which has no coloops.
        let a = DMatrix::from_row_slice(
            5,
            2,
            &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        );
        let cfg = SearchConfig::default();
        assert!(check_c1(&a, &cfg).holds());
    }
}
