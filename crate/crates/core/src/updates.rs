//! Closed-form and iterative target updates, soft centroids, and the ADMM steps.

use crate::error::{Error, Result};
use crate::numerics::{project_to_simplex, safe_ln, softmax_in_place, squared_distance, Matrix};
use crate::objectives::{augmented_lagrangian, marginal, Prototypes, TargetMatrix};
use crate::posterior::PosteriorMatrix;

/// Columns whose (transformed) mass is at or below this are treated as degenerate.
const COLUMN_FLOOR: f64 = 1e-300;

fn normalized_rows(mut m: Matrix) -> TargetMatrix {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    TargetMatrix::new_unchecked(m)
}

/// `q_ik ∝ f(p_ik) / g(Σ_j f(p_jk))`, shared by the three closed forms.
fn column_reweighted(p: &PosteriorMatrix, f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64) -> Result<TargetMatrix> {
    let pm = p.as_matrix();
    let fp = pm.map(f);
    let sums = fp.column_sums();
    if let Some(col) = sums.iter().position(|&s| s <= COLUMN_FLOOR) {
        return Err(Error::DegenerateColumn(col));
    }
    let weights: Vec<f64> = sums.into_iter().map(g).collect();
    let mut out = fp;
    for i in 0..out.rows() {
        for (v, w) in out.row_mut(i).iter_mut().zip(&weights) {
            *v /= w;
        }
    }
    Ok(normalized_rows(out))
}

/// `q_ik ∝ p_ik / (Σ_j p_jk)^{1/2}`.
pub fn depict_update(p: &PosteriorMatrix) -> Result<TargetMatrix> {
    column_reweighted(p, |v| v, f64::sqrt)
}

/// `q_ik ∝ p_ik² / (Σ_j p_jk²)^{1/2}`.
pub fn mi_adm_update(p: &PosteriorMatrix) -> Result<TargetMatrix> {
    column_reweighted(p, |v| v * v, f64::sqrt)
}

/// `q_ik ∝ p_ik² / Σ_j p_jk`.
pub fn dec_update(p: &PosteriorMatrix) -> Result<TargetMatrix> {
    let pm = p.as_matrix();
    let sums = pm.column_sums();
    if let Some(col) = sums.iter().position(|&s| s <= COLUMN_FLOOR) {
        return Err(Error::DegenerateColumn(col));
    }
    let mut out = pm.map(|v| v * v);
    for i in 0..out.rows() {
        for (v, s) in out.row_mut(i).iter_mut().zip(&sums) {
            *v /= s;
        }
    }
    Ok(normalized_rows(out))
}

fn centroid_mass_floor(n: usize, k: usize) -> f64 {
    1e-8 * n as f64 / k as f64
}

/// `θ'_k = Σ_i q_ik z_i / Σ_i q_ik`. Fails on a cluster with (near) zero mass.
pub fn soft_centroids(z: &Matrix, q: &TargetMatrix) -> Result<Prototypes> {
    let qm = q.as_matrix();
    if qm.rows() != z.rows() {
        return Err(Error::shape("soft_centroids: row count mismatch"));
    }
    let mass = qm.column_sums();
    let floor = centroid_mass_floor(z.rows(), qm.cols());
    if let Some(c) = mass.iter().position(|&m| m < floor) {
        return Err(Error::EmptyCluster(c));
    }
    let mut means = qm.transposed_matmul(z)?;
    for (c, m) in mass.iter().enumerate() {
        means.row_mut(c).iter_mut().for_each(|v| *v /= m);
    }
    Prototypes::new(means)
}

/// Like [`soft_centroids`], but an empty cluster is moved onto the point that is
/// farthest from its nearest non-empty centroid. Returns the indices that were rescued.
pub fn soft_centroids_with_rescue(z: &Matrix, q: &TargetMatrix) -> Result<(Prototypes, Vec<usize>)> {
    let qm = q.as_matrix();
    if qm.rows() != z.rows() {
        return Err(Error::shape("soft_centroids: row count mismatch"));
    }
    let k = qm.cols();
    let mass = qm.column_sums();
    let floor = centroid_mass_floor(z.rows(), k);
    let mut means = qm.transposed_matmul(z)?;
    let mut empty = Vec::new();
    for (c, m) in mass.iter().enumerate() {
        if *m < floor {
            empty.push(c);
        } else {
            means.row_mut(c).iter_mut().for_each(|v| *v /= m);
        }
    }
    if empty.len() == k {
        return Err(Error::EmptyCluster(0));
    }
    let mut live: Vec<usize> = (0..k).filter(|c| !empty.contains(c)).collect();
    let mut taken = vec![false; z.rows()];
    for &c in &empty {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for i in 0..z.rows() {
            if taken[i] {
                continue;
            }
            let d = live
                .iter()
                .map(|&l| squared_distance(z.row(i), means.row(l)))
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        if best.0 == usize::MAX {
            return Err(Error::EmptyCluster(c));
        }
        taken[best.0] = true;
        means.row_mut(c).copy_from_slice(z.row(best.0));
        live.push(c);
    }
    Ok((Prototypes::new(means)?, empty))
}

/// `q_ik ∝ exp(−‖z_i − θ'_k‖² / (λK))`.
pub fn softmin_assignment(z: &Matrix, protos: &Prototypes, lambda: f64) -> Result<TargetMatrix> {
    if z.cols() != protos.dim() {
        return Err(Error::shape("softmin_assignment: dimension mismatch"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("softmin_assignment: lambda must be positive"));
    }
    let k = protos.k();
    let temp = lambda * k as f64;
    let mut out = Matrix::zeros(z.rows(), k);
    for i in 0..z.rows() {
        let row = out.row_mut(i);
        for (c, v) in row.iter_mut().enumerate() {
            *v = -squared_distance(z.row(i), protos.means.row(c)) / temp;
        }
        softmax_in_place(row);
    }
    Ok(TargetMatrix::new_unchecked(out))
}

/// Biases that make `exp(2b)` equal the target marginal: `b_k = ½ ln q̂_k`.
pub fn closed_form_biases(q: &TargetMatrix) -> Vec<f64> {
    marginal(q).into_iter().map(|m| 0.5 * safe_ln(m)).collect()
}

/// Multiplier ascent `λ ← λ + ρ (Q − P)`.
pub fn admm_multiplier_step(multipliers: &mut Matrix, q: &TargetMatrix, p: &PosteriorMatrix, rho: f64) -> Result<()> {
    let (qm, pm) = (q.as_matrix(), p.as_matrix());
    qm.ensure_same_shape(pm, "targets vs posteriors")?;
    qm.ensure_same_shape(multipliers, "multipliers")?;
    for ((l, &qv), &pv) in multipliers.as_mut_slice().iter_mut().zip(qm.as_slice()).zip(pm.as_slice()) {
        *l += rho * (qv - pv);
    }
    Ok(())
}

/// Gradient of the augmented Lagrangian with respect to the targets:
/// `(1/N) ln p_ik − (1/N)(ln q̂_k + 1) − λ_ik − ρ (q_ik − p_ik)`.
pub fn admm_target_gradient(q: &Matrix, p: &Matrix, multipliers: &Matrix, rho: f64) -> Result<Matrix> {
    q.ensure_same_shape(p, "targets vs posteriors")?;
    q.ensure_same_shape(multipliers, "multipliers")?;
    let n = q.rows() as f64;
    let log_marg: Vec<f64> = marginal(q).into_iter().map(safe_ln).collect();
    let mut g = Matrix::zeros(q.rows(), q.cols());
    for i in 0..q.rows() {
        let (qr, pr, lr) = (q.row(i), p.row(i), multipliers.row(i));
        for (k, out) in g.row_mut(i).iter_mut().enumerate() {
            *out = (safe_ln(pr[k]) - log_marg[k] - 1.0) / n - lr[k] - rho * (qr[k] - pr[k]);
        }
    }
    Ok(g)
}

/// Settings for the projected-gradient target step.
#[derive(Clone, Copy, Debug)]
pub struct QStepOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for QStepOptions {
    fn default() -> Self {
        QStepOptions { max_iter: 50, tol: 1e-6 }
    }
}

/// Result of the target step.
#[derive(Clone, Debug)]
pub struct QStep {
    pub targets: TargetMatrix,
    pub iterations: usize,
    /// Norm of the projected-gradient map at the returned point.
    pub residual: f64,
}

fn project_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        project_to_simplex(m.row_mut(i));
    }
}

fn gradient_map_norm(q: &Matrix, g: &Matrix, step: f64) -> Result<f64> {
    let mut moved = q.zip_map(g, |a, b| a + step * b)?;
    project_rows(&mut moved);
    Ok((moved.sub(q)?.frobenius_sq()).sqrt() / step)
}

/// Maximizes the augmented Lagrangian over the targets (rows on the simplex) by
/// projected gradient ascent with backtracking, warm-started at `q0`.
pub fn admm_q_step(
    q0: &TargetMatrix,
    p: &PosteriorMatrix,
    multipliers: &Matrix,
    rho: f64,
    opts: QStepOptions,
) -> Result<QStep> {
    let pm = p.as_matrix();
    let mut q = q0.as_matrix().clone();
    q.ensure_same_shape(pm, "targets vs posteriors")?;
    let mut value = augmented_lagrangian(&q, pm, multipliers, rho)?;
    let min_mass = q.column_sums().into_iter().fold(f64::INFINITY, f64::min).max(1e-12);
    let mut step = 1.0 / (rho + 1.0 / min_mass);
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    for it in 0..opts.max_iter {
        let g = admm_target_gradient(&q, pm, multipliers, rho)?;
        residual = gradient_map_norm(&q, &g, step)?;
        iterations = it;
        if residual < opts.tol {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = q.zip_map(&g, |a, b| a + step * b)?;
            project_rows(&mut cand);
            let diff = cand.sub(&q)?;
            let lin: f64 = diff.as_slice().iter().zip(g.as_slice()).map(|(d, gv)| d * gv).sum();
            let cand_value = match augmented_lagrangian(&cand, pm, multipliers, rho) {
                Ok(v) if v.is_finite() => v,
                _ => f64::NEG_INFINITY,
            };
            if cand_value >= value + lin - diff.frobenius_sq() / (2.0 * step) - 1e-15 * value.abs() {
                q = cand;
                value = cand_value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::InnerSolverStalled { residual });
        }
        iterations = it + 1;
        step *= 2.0;
    }
    if iterations == opts.max_iter {
        let g = admm_target_gradient(&q, pm, multipliers, rho)?;
        residual = gradient_map_norm(&q, &g, step)?;
    }
    for i in 0..q.rows() {
        let row = q.row_mut(i);
        row.iter_mut().for_each(|v| *v = v.max(0.0));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(QStep { targets: TargetMatrix::new(q)?, iterations, residual })
}
