//! Multilogit (softmax) clustering head over embeddings.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Parameters;
use crate::error::{Error, Result};
use crate::numerics::{safe_ln, softmax_in_place, Matrix};
use crate::objectives::TargetMatrix;

/// Row tolerance for the simplex invariant of posteriors and targets.
pub const SIMPLEX_TOL: f64 = 1e-10;

/// Per-cluster weight vectors (rows of `theta`, `K × d_z`) and biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub theta: Matrix,
    pub bias: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(k: usize, dim: usize) -> Self {
        HeadParams {
            theta: Matrix::zeros(k, dim),
            bias: vec![0.0; k],
        }
    }

    pub fn new(theta: Matrix, bias: Vec<f64>) -> Result<Self> {
        if theta.rows() != bias.len() {
            return Err(Error::shape(format!(
                "{} weight rows vs {} biases",
                theta.rows(),
                bias.len()
            )));
        }
        if !theta.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("head parameters must be finite"));
        }
        Ok(HeadParams { theta, bias })
    }

    pub fn k(&self) -> usize {
        self.theta.rows()
    }

    pub fn dim(&self) -> usize {
        self.theta.cols()
    }

    /// `θ_k·z_i + b_k` for every sample and cluster.
    pub fn logits(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.dim() {
            return Err(Error::shape(format!(
                "embeddings have {} columns, head expects {}",
                z.cols(),
                self.dim()
            )));
        }
        let mut s = z.matmul_transposed(&self.theta)?;
        s.add_row_vector(&self.bias)?;
        Ok(s)
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

impl Parameters for HeadParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.theta.as_slice(), &self.bias]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.theta.as_mut_slice(), &mut self.bias]
    }
}

/// `N × K` matrix of posteriors; every row lies in the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMatrix(Matrix);

impl PosteriorMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_row_stochastic(SIMPLEX_TOL) {
            return Err(Error::invalid("posterior rows must lie in the probability simplex"));
        }
        Ok(PosteriorMatrix(values))
    }

    pub(crate) fn new_unchecked(values: Matrix) -> Self {
        debug_assert!(values.is_row_stochastic(1e-8));
        PosteriorMatrix(values)
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

impl AsRef<Matrix> for PosteriorMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

/// Row-wise softmax of the head's logits.
pub fn posteriors(head: &HeadParams, z: &Matrix) -> Result<PosteriorMatrix> {
    let mut s = head.logits(z)?;
    if !s.is_finite() {
        return Err(Error::invalid("non-finite logits"));
    }
    for i in 0..s.rows() {
        softmax_in_place(s.row_mut(i));
    }
    Ok(PosteriorMatrix::new_unchecked(s))
}

/// `λ Σ_k ‖θ_k‖²`; biases are not penalized.
pub fn l2_penalty(head: &HeadParams, lambda: f64) -> f64 {
    lambda * head.theta.frobenius_sq()
}

/// Chains a gradient on the logits back to the head parameters and embeddings.
/// The weight gradient includes the `2λθ` term of the L2 penalty.
pub fn head_backward(head: &HeadParams, z: &Matrix, logit_grad: &Matrix, lambda: f64) -> Result<(HeadParams, Matrix)> {
    if logit_grad.shape() != (z.rows(), head.k()) {
        return Err(Error::shape("logit gradient must be N x K"));
    }
    let mut theta_grad = logit_grad.transposed_matmul(z)?;
    for (g, &t) in theta_grad.as_mut_slice().iter_mut().zip(head.theta.as_slice()) {
        *g += 2.0 * lambda * t;
    }
    let bias_grad = logit_grad.column_sums();
    let z_grad = logit_grad.matmul(&head.theta)?;
    Ok((
        HeadParams {
            theta: theta_grad,
            bias: bias_grad,
        },
        z_grad,
    ))
}

/// Loss and gradients of the cross-entropy against fixed targets.
#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub loss: f64,
    pub posteriors: PosteriorMatrix,
    /// `(P − Q) / N`.
    pub logit_grad: Matrix,
    pub head_grad: HeadParams,
    pub z_grad: Matrix,
}

/// `−(1/N) Σ q log p + λ Σ ‖θ_k‖²` with analytic gradients.
pub fn cross_entropy_and_grads(
    head: &HeadParams,
    z: &Matrix,
    targets: &TargetMatrix,
    lambda: f64,
) -> Result<CrossEntropy> {
    let q = targets.as_matrix();
    if q.shape() != (z.rows(), head.k()) {
        return Err(Error::shape(format!(
            "targets are {}x{}, expected {}x{}",
            q.rows(),
            q.cols(),
            z.rows(),
            head.k()
        )));
    }
    let p = posteriors(head, z)?;
    let n = z.rows() as f64;
    let mut loss = 0.0;
    for (prow, qrow) in p.as_matrix().row_iter().zip(q.row_iter()) {
        for (&pv, &qv) in prow.iter().zip(qrow) {
            loss -= qv * safe_ln(pv);
        }
    }
    loss = loss / n + l2_penalty(head, lambda);
    let logit_grad = p.as_matrix().zip_map(q, |pv, qv| (pv - qv) / n)?;
    let (head_grad, z_grad) = head_backward(head, z, &logit_grad, lambda)?;
    Ok(CrossEntropy {
        loss,
        posteriors: p,
        logit_grad,
        head_grad,
        z_grad,
    })
}

/// Outcome of a full-batch head fit.
#[derive(Clone, Copy, Debug)]
pub struct HeadFit {
    pub iterations: usize,
    pub grad_norm: f64,
    pub loss: f64,
}

fn flat_index(k: usize, j: usize, n_clusters: usize, dim: usize) -> usize {
    if j < dim {
        k * dim + j
    } else {
        n_clusters * dim + k
    }
}

fn unflatten(x: &DVector<f64>, k: usize, dim: usize) -> HeadParams {
    let theta = Matrix::from_fn(k, dim, |r, c| x[r * dim + c]);
    let bias = (0..k).map(|r| x[k * dim + r]).collect();
    HeadParams { theta, bias }
}

fn flatten(head: &HeadParams) -> DVector<f64> {
    let mut v: Vec<f64> = head.theta.as_slice().to_vec();
    v.extend_from_slice(&head.bias);
    DVector::from_vec(v)
}

fn ce_value(head: &HeadParams, z: &Matrix, q: &Matrix, lambda: f64) -> f64 {
    let s = match head.logits(z) {
        Ok(s) if s.is_finite() => s,
        _ => return f64::INFINITY,
    };
    let mut loss = 0.0;
    for (srow, qrow) in s.row_iter().zip(q.row_iter()) {
        let m = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + srow.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (&sv, &qv) in srow.iter().zip(qrow) {
            if qv != 0.0 {
                loss -= qv * (sv - lse);
            }
        }
    }
    loss / z.rows() as f64 + l2_penalty(head, lambda)
}

/// Minimizes the cross-entropy plus L2 penalty over the head with damped Newton
/// steps and backtracking, starting from `init`, until the gradient norm drops
/// below `grad_tol` or `max_iter` steps have been taken.
pub fn fit_head(
    z: &Matrix,
    targets: &TargetMatrix,
    lambda: f64,
    init: &HeadParams,
    grad_tol: f64,
    max_iter: usize,
) -> Result<(HeadParams, HeadFit)> {
    let (n, dim) = z.shape();
    let k = init.k();
    let q = targets.as_matrix();
    if init.dim() != dim || q.shape() != (n, k) {
        return Err(Error::shape("fit_head: inconsistent shapes"));
    }
    let size = k * (dim + 1);
    let nf = n as f64;
    let mut head = init.clone();
    let mut fit = HeadFit {
        iterations: 0,
        grad_norm: f64::INFINITY,
        loss: ce_value(&head, z, q, lambda),
    };
    for it in 0..=max_iter {
        let ce = cross_entropy_and_grads(&head, z, targets, lambda)?;
        let g = flatten(&ce.head_grad);
        fit.grad_norm = g.norm();
        fit.loss = ce.loss;
        fit.iterations = it;
        if fit.grad_norm < grad_tol || it == max_iter {
            break;
        }

        let p = ce.posteriors.as_matrix();
        let mut h = DMatrix::<f64>::zeros(size, size);
        let mut aug = vec![1.0; dim + 1];
        for i in 0..n {
            aug[..dim].copy_from_slice(z.row(i));
            let pi = p.row(i);
            for a in 0..k {
                for b in 0..k {
                    let w = pi[a] * (if a == b { 1.0 } else { 0.0 } - pi[b]) / nf;
                    if w == 0.0 {
                        continue;
                    }
                    for (j, &xj) in aug.iter().enumerate() {
                        let r = flat_index(a, j, k, dim);
                        let wx = w * xj;
                        for (m, &xm) in aug.iter().enumerate() {
                            h[(r, flat_index(b, m, k, dim))] += wx * xm;
                        }
                    }
                }
            }
        }
        for r in 0..k * dim {
            h[(r, r)] += 2.0 * lambda;
        }

        let scale = (h.trace() / size as f64).max(1e-300);
        let mut damping = 1e-12 * scale;
        let step = loop {
            let mut hd = h.clone();
            for r in 0..size {
                hd[(r, r)] += damping;
            }
            if let Some(chol) = hd.cholesky() {
                break chol.solve(&(-&g));
            }
            damping *= 10.0;
            if damping > 1e6 * scale {
                return Err(Error::invalid("fit_head: Hessian could not be regularized"));
            }
        };

        let x = flatten(&head);
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = unflatten(&(&x + t * &step), k, dim);
            let f = ce_value(&cand, z, q, lambda);
            if f <= fit.loss + 1e-4 * t * slope || (f <= fit.loss && t < 1e-6) {
                head = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // At roundoff level of the loss; the step cannot make progress.
            break;
        }
    }
    Ok((head, fit))
}
