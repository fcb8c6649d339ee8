//! Tracking arms across experiments: k-means centroids over embedding
//! vectors, then an injective item-to-cluster assignment per test by
//! minimum-cost matching.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::Num;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TateError};
use crate::scalar::Scalar;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub centroids: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centroid after each assignment step.
    pub objective_history: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Scalar> KMeansResult<T> {
    pub fn objective(&self) -> T {
        self.objective_history.last().copied().unwrap_or(T::zero())
    }
}

fn nearest<T: Scalar>(x: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<T: Scalar>(vectors: &[Vec<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let n = vectors.len();
    let mut centroids = vec![vectors[rng.random_range(0..n)].clone()];
    let mut d2: Vec<T> = vectors.iter().map(|v| squared_distance(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: T = d2.iter().copied().sum();
        let pick = if total > T::zero() {
            let target = T::of(rng.random::<f64>()) * total;
            let mut acc = T::zero();
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc = acc + d;
                if acc > target && d > T::zero() {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(vectors[pick].clone());
        for (i, v) in vectors.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(v, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations. Stops when the relative
/// objective change falls below `tol` or after `max_iter` iterations. A
/// cluster left empty is re-seeded at the point farthest from its centroid.
pub fn kmeans<T: Scalar>(
    vectors: &[Vec<T>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult<T>> {
    let n = vectors.len();
    if k == 0 || n < k {
        return Err(TateError::Config(format!(
            "k-means needs 1 <= K <= #vectors, got K = {k}, {n} vectors"
        )));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(TateError::Config("vectors of unequal dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(vectors, k, &mut rng);
    let mut labels = vec![0; n];
    let mut history: Vec<T> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut dist = vec![T::zero(); n];
        for (i, v) in vectors.iter().enumerate() {
            let (c, dd) = nearest(v, &centroids);
            labels[i] = c;
            dist[i] = dd;
        }
        // re-seed empty clusters at the farthest points
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(b.cmp(&a)));
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                labels[i] = c;
                counts[c] = 1;
                dist[i] = T::zero();
                centroids[c] = vectors[i].clone();
            }
        }
        let objective: T = dist.iter().copied().sum();
        let previous = history.last().copied();
        history.push(objective);
        let mut sums = vec![vec![T::zero(); d]; k];
        for (i, v) in vectors.iter().enumerate() {
            for (s, &x) in sums[labels[i]].iter_mut().zip(v) {
                *s = *s + x;
            }
        }
        for c in 0..k {
            let m = T::of_usize(counts[c]);
            centroids[c] = sums[c].iter().map(|&s| s / m).collect();
        }
        if let Some(prev) = previous {
            let scale = prev.abs().max(T::min_positive_value());
            if (prev - objective).abs() / scale < T::of(tol) || objective == T::zero() {
                converged = true;
                break;
            }
        }
    }
    Ok(KMeansResult {
        centroids,
        labels,
        objective_history: history,
        iterations,
        converged,
    })
}

/// Minimum-cost assignment on a square or wide cost matrix (rows ≤ columns):
/// `result[r]` is the column assigned to row `r`. Shortest augmenting path
/// with dual potentials, O(rows²·cols).
pub fn hungarian<T>(cost: &[Vec<T>]) -> Vec<usize>
where
    T: Copy + PartialOrd + Num,
{
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= columns");
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv: Vec<Option<T>> = vec![None; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta: Option<T> = None;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if minv[j].is_none_or(|mv| cur < mv) {
                    minv[j] = Some(cur);
                    way[j] = j0;
                }
                if delta.is_none_or(|dl| minv[j].unwrap() < dl) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            let delta = delta.expect("a free column exists while rows <= columns");
            for j in 0..=m {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else if let Some(mv) = minv[j] {
                    minv[j] = Some(mv - delta);
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            result[p[j] - 1] = j - 1;
        }
    }
    result
}

fn assignment_cost<T: Copy + Num>(cost: &[Vec<T>], assignment: &[usize]) -> T {
    assignment
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (r, &c)| acc + cost[r][c])
}

/// Optimal injective assignment of `m` items to `K ≥ m` clusters. The item
/// count is padded to `K` with zero-cost dummy items. Among optimal
/// assignments, the lexicographically smallest cluster sequence wins:
/// costs within `tie_tol` of the optimum count as optimal.
pub fn min_cost_assignment<T>(cost: &[Vec<T>], tie_tol: T) -> Result<(Vec<usize>, T)>
where
    T: Copy + PartialOrd + Num,
{
    let m = cost.len();
    if m == 0 {
        return Ok((Vec::new(), T::zero()));
    }
    let k = cost[0].len();
    if cost.iter().any(|r| r.len() != k) {
        return Err(TateError::Config("ragged cost matrix".into()));
    }
    if m > k {
        return Err(TateError::Config(format!(
            "{m} items cannot be assigned injectively to {k} clusters"
        )));
    }
    let solve = |rows: &[usize], cols: &[usize]| -> (Vec<usize>, T) {
        let mut sub: Vec<Vec<T>> = rows
            .iter()
            .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
            .collect();
        sub.resize(cols.len(), vec![T::zero(); cols.len()]);
        let a = hungarian(&sub);
        let picked: Vec<usize> = a[..rows.len()].iter().map(|&j| cols[j]).collect();
        let total = rows
            .iter()
            .zip(&picked)
            .fold(T::zero(), |acc, (&r, &c)| acc + cost[r][c]);
        (picked, total)
    };
    let all_rows: Vec<usize> = (0..m).collect();
    let all_cols: Vec<usize> = (0..k).collect();
    let (_, optimum) = solve(&all_rows, &all_cols);

    let mut fixed: Vec<usize> = Vec::with_capacity(m);
    let mut fixed_cost = T::zero();
    for item in 0..m {
        let free_cols: Vec<usize> = (0..k).filter(|c| !fixed.contains(c)).collect();
        let rest_rows: Vec<usize> = (item + 1..m).collect();
        let mut fallback: Option<(usize, T)> = None;
        let mut chosen = None;
        for &c in &free_cols {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            let (_, rest) = solve(&rest_rows, &cols);
            let total = fixed_cost + cost[item][c] + rest;
            if total - optimum <= tie_tol {
                chosen = Some(c);
                break;
            }
            if fallback.is_none_or(|(_, t)| total < t) {
                fallback = Some((c, total));
            }
        }
        let c = chosen.unwrap_or_else(|| fallback.expect("at least one free cluster").0);
        fixed.push(c);
        fixed_cost = fixed_cost + cost[item][c];
    }
    let total = assignment_cost(cost, &fixed);
    Ok((fixed, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostKind {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl CostKind {
    pub fn cost<T: Scalar>(self, a: &[T], b: &[T]) -> T {
        let d2 = squared_distance(a, b);
        match self {
            CostKind::SquaredEuclidean => d2,
            CostKind::Euclidean => d2.sqrt(),
        }
    }
}

/// Injective map from the test's items to centroids minimizing total cost.
pub fn constrained_assign<T: Scalar>(
    test_vectors: &[Vec<T>],
    centroids: &[Vec<T>],
    cost: CostKind,
) -> Result<(Vec<usize>, T)> {
    let matrix: Vec<Vec<T>> = test_vectors
        .iter()
        .map(|v| centroids.iter().map(|c| cost.cost(v, c)).collect())
        .collect();
    let scale = matrix.iter().flatten().fold(T::zero(), |acc, &c| acc + c.abs());
    min_cost_assignment(&matrix, T::of(1e-12) * (T::one() + scale))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCorpus<T> {
    pub items: BTreeMap<String, Vec<T>>,
    /// Item ids per test, in file order.
    pub tests: BTreeMap<String, Vec<String>>,
    pub dim: usize,
}

impl<T: Scalar> EmbeddingCorpus<T> {
    /// Structural problems; tests with one item are reported separately by
    /// [`EmbeddingCorpus::single_item_tests`].
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (id, v) in &self.items {
            if v.len() != self.dim {
                out.push(format!("item {id}: dimension {}, expected {}", v.len(), self.dim));
            }
        }
        for (test, members) in &self.tests {
            let distinct: BTreeSet<&String> = members.iter().collect();
            if distinct.len() != members.len() {
                out.push(format!("test {test}: repeated item"));
            }
            for id in members {
                if !self.items.contains_key(id) {
                    out.push(format!("test {test}: unknown item {id}"));
                }
            }
        }
        out
    }

    /// Tests that cannot serve as within-test comparisons.
    pub fn single_item_tests(&self) -> Vec<String> {
        self.tests
            .iter()
            .filter(|(_, m)| m.len() < 2)
            .map(|(t, _)| t.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment<T> {
    pub cluster_of: BTreeMap<String, usize>,
    pub centroids: Vec<Vec<T>>,
    pub per_test_cost: BTreeMap<String, T>,
    pub objective_history: Vec<T>,
    pub warnings: Vec<String>,
}

/// k-means over every item, then an injective assignment within each test.
pub fn cluster_corpus<T: Scalar>(
    corpus: &EmbeddingCorpus<T>,
    k: usize,
    seed: u64,
    cost: CostKind,
) -> Result<ClusterAssignment<T>> {
    let problems = corpus.violations();
    if !problems.is_empty() {
        return Err(TateError::InvalidDataset(problems));
    }
    if let Some((test, members)) = corpus.tests.iter().find(|(_, m)| m.len() > k) {
        return Err(TateError::Config(format!(
            "test {test} has {} items, more than K = {k} clusters",
            members.len()
        )));
    }
    let ids: Vec<&String> = corpus.items.keys().collect();
    let vectors: Vec<Vec<T>> = ids.iter().map(|id| corpus.items[*id].clone()).collect();
    let km = kmeans(&vectors, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let mut cluster_of = BTreeMap::new();
    let mut per_test_cost = BTreeMap::new();
    for (test, members) in &corpus.tests {
        let tv: Vec<Vec<T>> = members.iter().map(|id| corpus.items[id].clone()).collect();
        let (labels, total) = constrained_assign(&tv, &km.centroids, cost)?;
        for (id, c) in members.iter().zip(labels) {
            cluster_of.insert(id.clone(), c);
        }
        per_test_cost.insert(test.clone(), total);
    }
    // items outside every test: nearest centroid
    for (id, v) in &corpus.items {
        cluster_of
            .entry(id.clone())
            .or_insert_with(|| nearest(v, &km.centroids).0);
    }
    let warnings = corpus
        .single_item_tests()
        .into_iter()
        .map(|t| format!("test {t} has a single item; unusable as a within-test comparison"))
        .collect();
    Ok(ClusterAssignment {
        cluster_of,
        centroids: km.centroids,
        per_test_cost,
        objective_history: km.objective_history,
        warnings,
    })
}

/// Cost of assigning every item of a test to its nearest centroid, ignoring injectivity.
pub fn unconstrained_cost<T: Scalar>(test_vectors: &[Vec<T>], centroids: &[Vec<T>], cost: CostKind) -> T {
    test_vectors
        .iter()
        .map(|v| centroids.iter().map(|c| cost.cost(v, c)).fold(T::infinity(), T::min))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_cost_keeps_diagonal() {
        let (a, c) = min_cost_assignment(&[vec![0, 1], vec![1, 0]], 0).unwrap();
        assert_eq!((a, c), (vec![0, 1], 0));
    }

    #[test]
    fn anti_diagonal_wins() {
        let (a, c) = min_cost_assignment(&[vec![1.0, 2.0], vec![2.0, 4.0]], 0.0).unwrap();
        assert_eq!(a, vec![1, 0]);
        assert_eq!(c, 4.0);
    }

    #[test]
    fn too_many_items_is_an_error() {
        assert!(min_cost_assignment(&[vec![1], vec![2]], 0).is_err());
    }

    #[test]
    fn ties_prefer_low_clusters_for_early_items() {
        let (a, _) = min_cost_assignment(&[vec![1, 1, 1], vec![1, 1, 1]], 0).unwrap();
        assert_eq!(a, vec![0, 1]);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let v = vec![vec![0.0_f64, 1.0], vec![2.0, 3.0], vec![4.0, 8.0]];
        let r = kmeans(&v, 1, 0, 100, 1e-6).unwrap();
        assert!((r.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((r.centroids[0][1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_two_points_two_clusters() {
        let v = vec![vec![0.0], vec![5.0]];
        let r = kmeans(&v, 2, 1, 100, 1e-6).unwrap();
        assert_eq!(r.objective(), 0.0);
        let mut c: Vec<f64> = r.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(c, vec![0.0, 5.0]);
    }
}
