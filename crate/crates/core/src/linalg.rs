//! Rank tests, positive definiteness and the matroid partition search.

use nalgebra::{DMatrix, SymmetricEigen};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Zero};

/// Default relative tolerance for [`numeric_rank`].
pub const RANK_TOL: f64 = 1e-10;

/// Number of singular values above `tol` times the largest one.
pub fn numeric_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    rank_with_margin(m, tol).0
}

/// Rank plus the ratio of the smallest retained singular value to the largest.
///
/// The margin shows how close a "full rank" decision was to the cutoff.
pub fn rank_with_margin(m: &DMatrix<f64>, tol: f64) -> (usize, f64) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (0, 0.0);
    }
    let sv = m.singular_values();
    let max = sv.max();
    if max == 0.0 {
        return (0, 0.0);
    }
    let kept: Vec<f64> = sv.iter().copied().filter(|&s| s > tol * max).collect();
    let margin = kept.iter().copied().fold(f64::INFINITY, f64::min) / max;
    (kept.len(), margin)
}

/// Rank over the rationals of the exact binary values of `m`.
///
/// Useful for fixtures with small integer or dyadic entries, where the SVD
/// cutoff is not needed.
pub fn exact_rank(m: &DMatrix<f64>) -> usize {
    let mut rows: Vec<Vec<BigRational>> = (0..m.nrows())
        .map(|r| {
            (0..m.ncols())
                .map(|c| BigRational::from_f64(m[(r, c)]).unwrap_or_else(|| BigRational::from_integer(BigInt::zero())))
                .collect()
        })
        .collect();
    let mut rank = 0;
    for col in 0..m.ncols() {
        let Some(piv) = (rank..rows.len()).find(|&r| !rows[r][col].is_zero()) else {
            continue;
        };
        rows.swap(rank, piv);
        let (top, rest) = rows.split_at_mut(rank + 1);
        let pivot = &top[rank];
        for row in rest.iter_mut().filter(|row| !row[col].is_zero()) {
            let f = &row[col] / &pivot[col];
            for (x, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                *x -= &f * p;
            }
        }
        rank += 1;
    }
    rank
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.nrows() == m.ncols() && m.clone().cholesky().is_some()
}

/// Nearest correlation-like matrix: clip eigenvalues at `floor`, then rescale
/// to unit diagonal.
pub fn project_to_correlation(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let d: Vec<f64> = (0..out.nrows()).map(|i| out[(i, i)].sqrt()).collect();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[(i, j)] /= d[i] * d[j];
        }
        out[(i, i)] = 1.0;
    }
    out
}

/// Rows `rows` of `m` stacked into a new matrix.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// True when the rows `rows` of `m` have rank equal to the column count.
pub fn rows_full_column_rank(m: &DMatrix<f64>, rows: &[usize], tol: f64) -> bool {
    rows.len() >= m.ncols() && numeric_rank(&select_rows(m, rows), tol) == m.ncols()
}

fn rows_independent(m: &DMatrix<f64>, rows: &[usize], tol: f64) -> bool {
    rows.len() <= m.ncols() && numeric_rank(&select_rows(m, rows), tol) == rows.len()
}

/// Largest family of `k` disjoint independent row sets among `candidates`,
/// found by matroid partition with shortest augmenting paths.
///
/// The result maximizes the total number of rows covered. When it covers
/// `k * ncols` rows, the row matroid has `k` disjoint bases.
pub fn disjoint_independent_sets(
    m: &DMatrix<f64>,
    candidates: &[usize],
    k: usize,
    tol: f64,
) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); k];
    // owner[i] = index of the set holding candidates[i]
    let mut owner: Vec<Option<usize>> = vec![None; candidates.len()];
    let target = k * m.ncols();
    for start in 0..candidates.len() {
        if sets.iter().map(Vec::len).sum::<usize>() == target {
            break;
        }
        augment(m, candidates, &mut sets, &mut owner, start, tol);
    }
    sets
}

fn augment(
    m: &DMatrix<f64>,
    cand: &[usize],
    sets: &mut [Vec<usize>],
    owner: &mut [Option<usize>],
    start: usize,
    tol: f64,
) -> bool {
    // BFS over candidate indices. An edge y -> z (z in set s) exists when
    // set s minus z plus y is independent. The search ends at the first y
    // that can be dropped straight into some set.
    let n = cand.len();
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut seen = vec![false; n];
    seen[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(y) = queue.pop_front() {
        for (s, set) in sets.iter().enumerate() {
            if owner[y] == Some(s) {
                continue;
            }
            let mut with_y: Vec<usize> = set.clone();
            with_y.push(cand[y]);
            if rows_independent(m, &with_y, tol) {
                // Apply the path: y enters s, each predecessor moves into
                // the set its successor vacated.
                let mut cur = y;
                let mut dest = s;
                loop {
                    let prev_set = owner[cur];
                    if let Some(ps) = prev_set {
                        sets[ps].retain(|&r| r != cand[cur]);
                    }
                    sets[dest].push(cand[cur]);
                    owner[cur] = Some(dest);
                    match (parent[cur], prev_set) {
                        (Some(p), Some(ps)) => {
                            cur = p;
                            dest = ps;
                        }
                        _ => break,
                    }
                }
                return true;
            }
            for z in 0..n {
                if seen[z] || owner[z] != Some(s) {
                    continue;
                }
                let swapped: Vec<usize> = set
                    .iter()
                    .copied()
                    .filter(|&r| r != cand[z])
                    .chain(std::iter::once(cand[y]))
                    .collect();
                if rows_independent(m, &swapped, tol) {
                    seen[z] = true;
                    parent[z] = Some(y);
                    queue.push_back(z);
                }
            }
        }
    }
    false
}

/// `k` disjoint row sets of `m` (drawn from `candidates`), each of full
/// column rank, if they exist.
pub fn disjoint_bases(m: &DMatrix<f64>, candidates: &[usize], k: usize, tol: f64) -> Option<Vec<Vec<usize>>> {
    let sets = disjoint_independent_sets(m, candidates, k, tol);
    if sets.iter().all(|s| s.len() == m.ncols()) {
        let mut sets = sets;
        for s in &mut sets {
            s.sort_unstable();
        }
        Some(sets)
    } else {
        None
    }
}
