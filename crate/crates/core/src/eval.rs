//! External clustering metrics (NMI, matching accuracy) and the hard K-means oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, argmin, squared_distance, Matrix, Rng};
use crate::objectives::{hard_kmeans_loss, Assignment, Prototypes, TargetMatrix};

fn contingency(predicted: &Assignment, truth: &Assignment) -> Result<Vec<Vec<u64>>> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predicted labels vs {} true labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut table = vec![vec![0u64; truth.k()]; predicted.k()];
    for (&p, &t) in predicted.labels().iter().zip(truth.labels()) {
        table[p][t] += 1;
    }
    Ok(table)
}

/// Minimum-cost perfect matching on a square cost matrix (shortest augmenting
/// paths with potentials). Returns `col[row]`.
pub fn hungarian_min_cost(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|r| r.len() == n));
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
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
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[p[j] - 1] = j - 1;
    }
    col_of_row
}

/// Best one-to-one cluster-to-class matching, as a fraction of samples.
/// Rectangular tables are zero-padded to square.
pub fn accuracy(predicted: &Assignment, truth: &Assignment) -> Result<f64> {
    let table = contingency(predicted, truth)?;
    let n = predicted.k().max(truth.k());
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|r| {
            (0..n)
                .map(|c| {
                    let count = table.get(r).and_then(|row| row.get(c)).copied().unwrap_or(0);
                    -(count as i64)
                })
                .collect()
        })
        .collect();
    let matching = hungarian_min_cost(&cost);
    let matched: i64 = matching.iter().enumerate().map(|(r, &c)| -cost[r][c]).sum();
    Ok(matched as f64 / predicted.len().max(1) as f64)
}

fn entropy_of_counts(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with geometric-mean normalization; 0 when either
/// labeling is constant.
pub fn nmi(predicted: &Assignment, truth: &Assignment) -> Result<f64> {
    let table = contingency(predicted, truth)?;
    let n = predicted.len() as f64;
    if n == 0.0 {
        return Ok(0.0);
    }
    let row_tot: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_tot: Vec<u64> = (0..truth.k()).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let h_pred = entropy_of_counts(row_tot.iter().copied(), n);
    let h_true = entropy_of_counts(col_tot.iter().copied(), n);
    if h_pred <= 0.0 || h_true <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (r, row) in table.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            if count > 0 {
                let pij = count as f64 / n;
                mi += pij * (count as f64 * n / (row_tot[r] as f64 * col_tot[c] as f64)).ln();
            }
        }
    }
    Ok((mi / (h_pred * h_true).sqrt()).clamp(0.0, 1.0))
}

/// Per-row argmax of soft assignments, lowest index on ties.
pub fn hardening(q: &TargetMatrix) -> Assignment {
    let m = q.as_matrix();
    let labels = m.row_iter().map(argmax).collect();
    Assignment::new(labels, m.cols()).expect("argmax lies in range")
}

fn kmeans_pp_seed(z: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = z.rows();
    let mut centers = Matrix::zeros(k, z.cols());
    let first = rng.below(n);
    centers.row_mut(0).copy_from_slice(z.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(z.row(i), z.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.below(n)
        };
        centers.row_mut(c).copy_from_slice(z.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(z.row(i), z.row(pick)));
        }
    }
    centers
}

/// k-means++ seeding, used by the oracle and by soft K-means initialization.
pub fn kmeans_plus_plus(z: &Matrix, k: usize, rng: &mut Rng) -> Result<Prototypes> {
    if k == 0 || k > z.rows() {
        return Err(Error::invalid(format!("k = {k} with {} points", z.rows())));
    }
    Prototypes::new(kmeans_pp_seed(z, k, rng))
}

fn lloyd_once(z: &Matrix, mut centers: Matrix, max_iter: usize) -> (Vec<usize>, Matrix) {
    let (n, d) = z.shape();
    let k = centers.rows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let dists: Vec<f64> = (0..k).map(|c| squared_distance(z.row(i), centers.row(c))).collect();
            let best = argmin(&dists);
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums.row_mut(l).iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous center
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    (labels, centers)
}

/// Best-of-`restarts` Lloyd's algorithm from k-means++ seeds.
pub fn lloyd_oracle(z: &Matrix, k: usize, restarts: usize, rng: &mut Rng) -> Result<(Assignment, Prototypes)> {
    if k == 0 || k > z.rows() {
        return Err(Error::invalid(format!("k = {k} with {} points", z.rows())));
    }
    let mut best: Option<(f64, Vec<usize>, Matrix)> = None;
    for _ in 0..restarts.max(1) {
        let seeds = kmeans_pp_seed(z, k, rng);
        let (labels, centers) = lloyd_once(z, seeds, 300);
        let assign = Assignment::new(labels.clone(), k)?;
        let loss = hard_kmeans_loss(z, &assign, &Prototypes::new(centers.clone())?)?;
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, labels, centers));
        }
    }
    let (_, labels, centers) = best.expect("at least one restart");
    Ok((Assignment::new(labels, k)?, Prototypes::new(centers)?))
}

/// NMI and ACC of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    pub nmi: f64,
    pub acc: f64,
}

/// Holds ground truth away from trainers; they only ever see the scores.
#[derive(Clone, Debug)]
pub struct Scorer {
    truth: Assignment,
}

impl Scorer {
    pub fn new(labels: &[usize]) -> Result<Self> {
        let k = labels.iter().copied().max().map_or(1, |m| m + 1);
        Ok(Scorer {
            truth: Assignment::new(labels.to_vec(), k)?,
        })
    }

    pub fn score(&self, predicted: &Assignment) -> Result<ClusterScores> {
        Ok(ClusterScores {
            nmi: nmi(predicted, &self.truth)?,
            acc: accuracy(predicted, &self.truth)?,
        })
    }
}
