//! Scalar clustering objectives: mutual information and its ADM forms, KL,
//! the DEPICT loss, hard and soft-regularized K-means, and the augmented Lagrangian.
//!
//! All logarithms are natural; `0 log 0 = 0` throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, safe_ln, squared_distance, xlnx, Matrix};
use crate::posterior::{l2_penalty, HeadParams, PosteriorMatrix, SIMPLEX_TOL};

/// `N × K` auxiliary targets; rows lie in the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMatrix(Matrix);

impl TargetMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_row_stochastic(SIMPLEX_TOL) {
            return Err(Error::invalid("target rows must lie in the probability simplex"));
        }
        Ok(TargetMatrix(values))
    }

    pub(crate) fn new_unchecked(values: Matrix) -> Self {
        debug_assert!(values.is_row_stochastic(1e-8));
        TargetMatrix(values)
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        TargetMatrix(Matrix::filled(n, k, 1.0 / k as f64))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn k(&self) -> usize {
        self.0.cols()
    }
}

impl AsRef<Matrix> for TargetMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

impl From<PosteriorMatrix> for TargetMatrix {
    fn from(p: PosteriorMatrix) -> Self {
        TargetMatrix(p.into_matrix())
    }
}

/// Hard cluster labels in `[0, k)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    labels: Vec<usize>,
    k: usize,
}

impl Assignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for k = {k}")));
        }
        Ok(Assignment { labels, k })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_targets(&self) -> TargetMatrix {
        let mut m = Matrix::zeros(self.labels.len(), self.k);
        for (i, &l) in self.labels.iter().enumerate() {
            m[(i, l)] = 1.0;
        }
        TargetMatrix(m)
    }
}

/// Cluster prototypes (means), one row per cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub means: Matrix,
}

impl Prototypes {
    pub fn new(means: Matrix) -> Result<Self> {
        if !means.is_finite() {
            return Err(Error::invalid("prototypes must be finite"));
        }
        Ok(Prototypes { means })
    }

    pub fn k(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }
}

/// Estimated label marginal `p̂_k = (1/N) Σ_i p_ik`.
pub fn marginal(p: &impl AsRef<Matrix>) -> Vec<f64> {
    let p = p.as_ref();
    let n = p.rows().max(1) as f64;
    p.column_sums().into_iter().map(|s| s / n).collect()
}

/// Shannon entropy `−Σ v ln v` of a distribution.
pub fn entropy(v: &[f64]) -> f64 {
    -v.iter().map(|&x| xlnx(x)).sum::<f64>()
}

/// `H(Q) = −(1/N) Σ_i Σ_k q_ik ln q_ik`.
pub fn mean_row_entropy(q: &impl AsRef<Matrix>) -> f64 {
    let q = q.as_ref();
    -q.as_slice().iter().map(|&x| xlnx(x)).sum::<f64>() / q.rows().max(1) as f64
}

/// `Σ_k q̂_k ln q̂_k`, the (negative-entropy) balance term.
pub fn balance_term(q: &impl AsRef<Matrix>) -> f64 {
    -entropy(&marginal(q))
}

/// `I = H(p̂) − H(K|X)`.
pub fn mutual_information(p: &impl AsRef<Matrix>) -> f64 {
    entropy(&marginal(p)) - mean_row_entropy(p)
}

/// Gradient of the mutual information with respect to the logits behind `p`,
/// with the marginal estimated from the same rows.
pub fn mutual_information_logit_grad(p: &PosteriorMatrix) -> Matrix {
    let pm = p.as_matrix();
    let n = pm.rows() as f64;
    let log_marg: Vec<f64> = marginal(p).into_iter().map(safe_ln).collect();
    let mut out = Matrix::zeros(pm.rows(), pm.cols());
    for i in 0..pm.rows() {
        let prow = pm.row(i);
        let g: Vec<f64> = prow
            .iter()
            .zip(&log_marg)
            .map(|(&pv, &lm)| (safe_ln(pv) - lm) / n)
            .collect();
        let mean = dot(prow, &g);
        for (o, (&pv, &gv)) in out.row_mut(i).iter_mut().zip(prow.iter().zip(&g)) {
            *o = pv * (gv - mean);
        }
    }
    out
}

fn check_pair(q: &Matrix, p: &Matrix) -> Result<()> {
    q.ensure_same_shape(p, "targets vs posteriors")?;
    for i in 0..q.rows() {
        for (k, (&qv, &pv)) in q.row(i).iter().zip(p.row(i)).enumerate() {
            if qv > 0.0 && pv <= 0.0 {
                return Err(Error::DivergenceUndefined { row: i, col: k });
            }
        }
    }
    Ok(())
}

/// `(1/N) Σ_i Σ_k q_ik ln p_ik`.
fn mean_cross_term(q: &Matrix, p: &Matrix) -> f64 {
    let mut s = 0.0;
    for (&qv, &pv) in q.as_slice().iter().zip(p.as_slice()) {
        if qv != 0.0 {
            s += qv * safe_ln(pv);
        }
    }
    s / q.rows().max(1) as f64
}

/// `KL(Q‖P) = (1/N) Σ_i Σ_k q_ik ln(q_ik / p_ik)`.
pub fn kl_divergence(q: &impl AsRef<Matrix>, p: &impl AsRef<Matrix>) -> Result<f64> {
    let (q, p) = (q.as_ref(), p.as_ref());
    check_pair(q, p)?;
    let mut s = 0.0;
    for (&qv, &pv) in q.as_slice().iter().zip(p.as_slice()) {
        if qv > 0.0 {
            s += qv * (safe_ln(qv) - safe_ln(pv));
        }
    }
    Ok((s / q.rows().max(1) as f64).max(0.0))
}

/// `KL(Q‖P) + γ Σ_k q̂_k ln q̂_k`.
pub fn depict_loss(q: &impl AsRef<Matrix>, p: &impl AsRef<Matrix>, gamma: f64) -> Result<f64> {
    Ok(kl_divergence(q, p)? + gamma * balance_term(q))
}

/// KL-penalized ADM objective in minimization form:
/// `KL(Q‖P) + ½ Σ_k q̂_k ln q̂_k + ½ H(Q)`.
pub fn mi_adm_loss(q: &impl AsRef<Matrix>, p: &impl AsRef<Matrix>) -> Result<f64> {
    Ok(kl_divergence(q, p)? + 0.5 * balance_term(q) + 0.5 * mean_row_entropy(q))
}

/// KL-penalized ADM objective in maximization form:
/// `(1/N) Σ q ln p − Σ_k q̂_k ln q̂_k − KL(Q‖P)`. Equals `−2 · mi_adm_loss`.
pub fn adm_objective(q: &impl AsRef<Matrix>, p: &impl AsRef<Matrix>) -> Result<f64> {
    let (qm, pm) = (q.as_ref(), p.as_ref());
    check_pair(qm, pm)?;
    Ok(mean_cross_term(qm, pm) - balance_term(q) - kl_divergence(q, p)?)
}

/// Regularized ADM loss `Σ q̂ ln q̂ − (1/N) Σ q ln p + KL(Q‖P) + λ Σ ‖θ_k‖²`,
/// the negative of the ADM objective plus the weight penalty.
pub fn regularized_adm_loss(q: &TargetMatrix, p: &PosteriorMatrix, head: &HeadParams, lambda: f64) -> Result<f64> {
    Ok(-adm_objective(q, p)? + l2_penalty(head, lambda))
}

/// `Σ_k q̂_k ln(q̂_k / exp(2 b_k))`; vanishes when `b_k = ½ ln q̂_k`.
pub fn bias_marginal_kl(qhat: &[f64], bias: &[f64]) -> Result<f64> {
    if qhat.len() != bias.len() {
        return Err(Error::shape("marginal and bias lengths differ"));
    }
    Ok(qhat
        .iter()
        .zip(bias)
        .map(|(&m, &b)| if m > 0.0 { m * (m.ln() - 2.0 * b) } else { 0.0 })
        .sum())
}

fn check_protos(z: &Matrix, protos: &Prototypes) -> Result<()> {
    if z.cols() != protos.dim() {
        return Err(Error::shape(format!(
            "embeddings have {} columns, prototypes {}",
            z.cols(),
            protos.dim()
        )));
    }
    Ok(())
}

/// `Σ_i ‖z_i − μ_{a(i)}‖²`.
pub fn hard_kmeans_loss(z: &Matrix, assign: &Assignment, protos: &Prototypes) -> Result<f64> {
    check_protos(z, protos)?;
    if assign.len() != z.rows() || assign.k() > protos.k() {
        return Err(Error::shape("assignment does not match embeddings / prototypes"));
    }
    Ok(assign
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| squared_distance(z.row(i), protos.means.row(l)))
        .sum())
}

/// Soft regularized K-means loss
/// `Σ q_ik ‖z_i − θ'_k‖² + λK Σ q_ik ln q_ik − Σ z_iᵀz_i`.
pub fn sr_kmeans_loss(z: &Matrix, q: &TargetMatrix, protos: &Prototypes, lambda: f64, k: usize) -> Result<f64> {
    check_protos(z, protos)?;
    let qm = q.as_matrix();
    if qm.shape() != (z.rows(), protos.k()) {
        return Err(Error::shape("targets do not match embeddings / prototypes"));
    }
    let mut distortion = 0.0;
    let mut neg_entropy = 0.0;
    for i in 0..z.rows() {
        for (c, &qv) in qm.row(i).iter().enumerate() {
            if qv != 0.0 {
                distortion += qv * squared_distance(z.row(i), protos.means.row(c));
                neg_entropy += xlnx(qv);
            }
        }
    }
    let norms: f64 = z.as_slice().iter().map(|v| v * v).sum();
    Ok(distortion + lambda * k as f64 * neg_entropy - norms)
}

/// The part of the SR-K-means loss that the encoder trains on, averaged over the
/// rows given: `(1/(NλK)) [Σ q_ik ‖z_i − θ'_k‖² − Σ z_iᵀz_i]`, with its gradient
/// on `z` (prototypes and targets held fixed).
pub fn sr_kmeans_network_loss(
    z: &Matrix,
    q: &Matrix,
    protos: &Prototypes,
    lambda: f64,
    k: usize,
) -> Result<(f64, Matrix)> {
    check_protos(z, protos)?;
    if q.shape() != (z.rows(), protos.k()) {
        return Err(Error::shape("targets do not match embeddings / prototypes"));
    }
    let scale = 1.0 / (z.rows() as f64 * lambda * k as f64);
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let zi = z.row(i);
        let gi = grad.row_mut(i);
        for (c, &qv) in q.row(i).iter().enumerate() {
            if qv == 0.0 {
                continue;
            }
            let mu = protos.means.row(c);
            loss += qv * squared_distance(zi, mu);
            for (g, (&zv, &mv)) in gi.iter_mut().zip(zi.iter().zip(mu)) {
                *g += 2.0 * qv * (zv - mv);
            }
        }
        for (g, &zv) in gi.iter_mut().zip(zi) {
            loss -= zv * zv;
            *g = scale * (*g - 2.0 * zv);
        }
    }
    Ok((loss * scale, grad))
}

/// Augmented Lagrangian of the ADM split with multiplier-based quadratic penalty:
/// `(1/N) Σ q ln p − Σ q̂ ln q̂ − Σ λ_ik (q_ik − p_ik) − (ρ/2) ‖Q − P‖²`.
pub fn augmented_lagrangian(
    q: &impl AsRef<Matrix>,
    p: &impl AsRef<Matrix>,
    multipliers: &Matrix,
    rho: f64,
) -> Result<f64> {
    let (qm, pm) = (q.as_ref(), p.as_ref());
    check_pair(qm, pm)?;
    qm.ensure_same_shape(multipliers, "multipliers")?;
    let mut linear = 0.0;
    let mut quad = 0.0;
    for ((&qv, &pv), &l) in qm.as_slice().iter().zip(pm.as_slice()).zip(multipliers.as_slice()) {
        linear += l * (qv - pv);
        quad += (qv - pv) * (qv - pv);
    }
    Ok(mean_cross_term(qm, pm) - balance_term(q) - linear - 0.5 * rho * quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn marginal_examples() {
        assert_eq!(marginal(&Matrix::filled(4, 4, 0.25)), vec![0.25; 4]);
        assert_eq!(marginal(&m(&[&[1.0, 0.0], &[0.0, 1.0]])), vec![0.5, 0.5]);
        let v = marginal(&m(&[&[0.8, 0.2], &[0.5, 0.5]]));
        assert!((v[0] - 0.65).abs() < 1e-15 && (v[1] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn mi_examples() {
        assert!(mutual_information(&Matrix::filled(5, 3, 1.0 / 3.0)).abs() < 1e-15);
        assert!((mutual_information(&m(&[&[1.0, 0.0], &[0.0, 1.0]])) - 2f64.ln()).abs() < 1e-15);
        // direct evaluation of H(p̂) − mean row entropy: marginal [0.5, 0.5]
        let h_row = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        let want = 2f64.ln() - h_row;
        assert!((mutual_information(&m(&[&[0.9, 0.1], &[0.1, 0.9]])) - want).abs() < 1e-15);
        assert!((want - 0.368_064_207_168_497).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let p = m(&[&[0.3, 0.7], &[0.6, 0.4]]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let kl = kl_divergence(&m(&[&[1.0, 0.0]]), &m(&[&[0.5, 0.5]])).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            kl_divergence(&m(&[&[0.5, 0.5]]), &m(&[&[1.0, 0.0]])),
            Err(Error::DivergenceUndefined { row: 0, col: 1 })
        ));
    }

    #[test]
    fn depict_examples() {
        let u = Matrix::filled(6, 4, 0.25);
        assert!((depict_loss(&u, &u, 0.7).unwrap() + 0.7 * 4f64.ln()).abs() < 1e-14);
        let mut rng = Rng::new(3);
        let q = rng.stochastic_matrix(5, 3);
        let p = rng.stochastic_matrix(5, 3);
        assert_eq!(depict_loss(&q, &p, 0.0).unwrap(), kl_divergence(&q, &p).unwrap());
        let lhs = depict_loss(&q, &p, 0.5).unwrap();
        let rhs = mi_adm_loss(&q, &p).unwrap() - 0.5 * mean_row_entropy(&q);
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn mi_adm_examples() {
        let u = Matrix::filled(6, 4, 0.25);
        assert!(mi_adm_loss(&u, &u).unwrap().abs() < 1e-14);
        let mut rng = Rng::new(12);
        let p = rng.stochastic_matrix(5, 3);
        let q = Assignment::new(vec![0, 2, 2, 1, 0], 3).unwrap().to_targets();
        let want = kl_divergence(&q, &p).unwrap() + 0.5 * balance_term(&q);
        assert!((mi_adm_loss(&q, &p).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn adm_objective_is_minus_twice_mi_adm_loss() {
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let q = rng.stochastic_matrix(6, 4);
            let p = rng.stochastic_matrix(6, 4);
            let a = adm_objective(&q, &p).unwrap();
            let b = mi_adm_loss(&q, &p).unwrap();
            assert!((a + 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn adm_objective_at_q_equals_p_is_mi() {
        let mut rng = Rng::new(5);
        let p = rng.stochastic_matrix(9, 3);
        assert!((adm_objective(&p, &p).unwrap() - mutual_information(&p)).abs() < 1e-14);
    }

    #[test]
    fn hard_kmeans_examples() {
        let z = m(&[&[0.0], &[2.0]]);
        let a = Assignment::new(vec![0, 0], 1).unwrap();
        let protos = Prototypes::new(m(&[&[1.0]])).unwrap();
        assert_eq!(hard_kmeans_loss(&z, &a, &protos).unwrap(), 2.0);
        let at = Prototypes::new(z.clone()).unwrap();
        let own = Assignment::new(vec![0, 1], 2).unwrap();
        assert_eq!(hard_kmeans_loss(&z, &own, &at).unwrap(), 0.0);
    }

    #[test]
    fn sr_kmeans_examples() {
        let z = m(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let protos = Prototypes::new(z.clone()).unwrap();
        let q = Assignment::new(vec![0, 1], 2).unwrap().to_targets();
        let norms = 1.0 + 4.0 + 9.0 + 0.25;
        assert!((sr_kmeans_loss(&z, &q, &protos, 0.1, 2).unwrap() + norms).abs() < 1e-14);

        let u = TargetMatrix::uniform(2, 2);
        let zero = Prototypes::new(Matrix::zeros(2, 2)).unwrap();
        let zz = Matrix::zeros(2, 2);
        let lambda = 0.3;
        let want = lambda * 2.0 * 2.0 * (-(2f64.ln()));
        assert!((sr_kmeans_loss(&zz, &u, &zero, lambda, 2).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn sr_network_loss_matches_full_loss_terms() {
        let mut rng = Rng::new(31);
        let z = Matrix::from_fn(5, 2, |_, _| rng.normal());
        let q = TargetMatrix::new(rng.stochastic_matrix(5, 3)).unwrap();
        let protos = Prototypes::new(Matrix::from_fn(3, 2, |_, _| rng.normal())).unwrap();
        let (lambda, k) = (0.2, 3);
        let (loss, grad) = sr_kmeans_network_loss(&z, q.as_matrix(), &protos, lambda, k).unwrap();
        let full = sr_kmeans_loss(&z, &q, &protos, lambda, k).unwrap();
        let ent = lambda * k as f64 * -mean_row_entropy(&q) * 5.0;
        assert!((loss * 5.0 * lambda * k as f64 - (full - ent)).abs() < 1e-12);
        let eps = 1e-6;
        for idx in 0..10 {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp.as_mut_slice()[idx] += eps;
            zm.as_mut_slice()[idx] -= eps;
            let fp = sr_kmeans_network_loss(&zp, q.as_matrix(), &protos, lambda, k).unwrap().0;
            let fm = sr_kmeans_network_loss(&zm, q.as_matrix(), &protos, lambda, k).unwrap().0;
            let num = (fp - fm) / (2.0 * eps);
            assert!((num - grad.as_slice()[idx]).abs() < 1e-6 * num.abs().max(1.0));
        }
    }

    #[test]
    fn augmented_lagrangian_examples() {
        let mut rng = Rng::new(8);
        let p = rng.stochastic_matrix(6, 3);
        let lam = Matrix::from_fn(6, 3, |_, _| rng.normal());
        assert!((augmented_lagrangian(&p, &p, &lam, 2.0).unwrap() - mutual_information(&p)).abs() < 1e-14);

        let q = rng.stochastic_matrix(6, 3);
        let zero = Matrix::zeros(6, 3);
        let eq10 = mean_cross_term(&q, &p) - balance_term(&q);
        assert!((augmented_lagrangian(&q, &p, &zero, 0.0).unwrap() - eq10).abs() < 1e-14);

        // term-by-term oracle
        let rho = 0.7;
        let n = 6.0;
        let mut cross = 0.0;
        let mut lin = 0.0;
        let mut quad = 0.0;
        for i in 0..6 {
            for k in 0..3 {
                cross += q[(i, k)] * p[(i, k)].ln();
                lin += lam[(i, k)] * (q[(i, k)] - p[(i, k)]);
                quad += (q[(i, k)] - p[(i, k)]).powi(2);
            }
        }
        let qhat: Vec<f64> = (0..3).map(|k| (0..6).map(|i| q[(i, k)]).sum::<f64>() / n).collect();
        let bal: f64 = qhat.iter().map(|v| v * v.ln()).sum();
        let want = cross / n - bal - lin - rho / 2.0 * quad;
        assert!((augmented_lagrangian(&q, &p, &lam, rho).unwrap() - want).abs() < 1e-13);
    }

    #[test]
    fn mi_logit_gradient_matches_finite_differences() {
        use crate::numerics::softmax_rows;
        let mut rng = Rng::new(41);
        let s = Matrix::from_fn(5, 3, |_, _| rng.normal() * 2.0);
        let p = PosteriorMatrix::new(softmax_rows(&s).unwrap()).unwrap();
        let g = mutual_information_logit_grad(&p);
        let eps = 1e-6;
        for idx in 0..15 {
            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp.as_mut_slice()[idx] += eps;
            sm.as_mut_slice()[idx] -= eps;
            let num = (mutual_information(&softmax_rows(&sp).unwrap()) - mutual_information(&softmax_rows(&sm).unwrap())) / (2.0 * eps);
            let ana = g.as_slice()[idx];
            assert!((num - ana).abs() <= 1e-5 * num.abs().max(ana.abs()).max(1e-4), "{idx}: {num} vs {ana}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mi_within_bounds(seed in 0u64..10_000, k in 2usize..=10, n in 1usize..30) {
                let p = crate::numerics::Rng::new(seed).stochastic_matrix(n, k);
                let mi = mutual_information(&p);
                prop_assert!(mi >= -1e-10 && mi <= (k as f64).ln() + 1e-10);
            }

            #[test]
            fn kl_nonnegative_and_pinsker(seed in 0u64..10_000) {
                let mut rng = crate::numerics::Rng::new(seed);
                let q = rng.stochastic_matrix(4, 3);
                let p = rng.stochastic_matrix(4, 3);
                let kl = kl_divergence(&q, &p).unwrap();
                prop_assert!(kl >= 0.0);
                let quad = crate::numerics::frobenius_sq_diff(&q, &p).unwrap();
                prop_assert!(quad <= 2.0 * 4.0 * kl + 1e-12);
            }
        }
    }
}
