//! End-to-end training loops for the five clustering methods, the shared
//! initialization pipeline, and per-iteration traces.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{
    adam_step, backward, encode, forward, reconstruction_loss, xavier_init, Activation, AdamState,
    AutoencoderParams, Mode, Parameters,
};
use crate::data::BatchPlan;
use crate::error::{Error, Result};
use crate::eval::{hardening, kmeans_plus_plus, ClusterScores, Scorer};
use crate::numerics::{argmax, frobenius_sq_diff, Matrix, Rng};
use crate::objectives::{
    augmented_lagrangian, depict_loss, mi_adm_loss, mutual_information, mutual_information_logit_grad,
    sr_kmeans_loss, sr_kmeans_network_loss, Assignment, Prototypes, TargetMatrix,
};
use crate::posterior::{cross_entropy_and_grads, fit_head, head_backward, posteriors, HeadParams, PosteriorMatrix};
use crate::updates::{
    admm_multiplier_step, admm_q_step, depict_update, mi_adm_update, soft_centroids_with_rescue, softmin_assignment,
    QStepOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "mi-d")]
    MiD,
    #[serde(rename = "mi-adm")]
    MiAdm,
    #[serde(rename = "depict")]
    Depict,
    #[serde(rename = "sr-kmeans")]
    SrKmeans,
    #[serde(rename = "admm-qp")]
    AdmmQp,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::MiD, Method::MiAdm, Method::Depict, Method::SrKmeans, Method::AdmmQp];

    pub fn name(self) -> &'static str {
        match self {
            Method::MiD => "mi-d",
            Method::MiAdm => "mi-adm",
            Method::Depict => "depict",
            Method::SrKmeans => "sr-kmeans",
            Method::AdmmQp => "admm-qp",
        }
    }

    pub fn valid_names() -> String {
        Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key || m.name().replace('-', "") == key)
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}' (valid: {})", Method::valid_names())))
    }
}

/// Everything a run depends on. Identical configs give identical traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub k: usize,
    /// SR-K-means temperature scale; also the ridge of the initial head fit.
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub recon_weight: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Network epochs per target update.
    pub inner_epochs: usize,
    pub admm_max_inner: usize,
    pub admm_tol: f64,
    pub init_restarts: usize,
}

impl TrainConfig {
    pub fn new(method: Method, k: usize) -> Self {
        TrainConfig {
            method,
            k,
            lambda: 1e-4,
            gamma: 0.5,
            rho: 1.0,
            epochs: 30,
            pretrain_epochs: 20,
            batch_size: 100,
            lr: 1e-3,
            dropout: 0.1,
            seed: 0,
            recon_weight: 1.0,
            hidden: vec![500, 500],
            embed_dim: 10,
            inner_epochs: 1,
            admm_max_inner: 50,
            admm_tol: 1e-6,
            init_restarts: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.batch_size == 0 || self.embed_dim == 0 || self.inner_epochs == 0 || self.init_restarts == 0 {
            return bad("batch_size, embed_dim, inner_epochs and init_restarts must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.method == Method::SrKmeans && self.lambda <= 0.0 {
            return bad("sr-kmeans needs lambda > 0".into());
        }
        if self.method == Method::AdmmQp && !(self.rho > 0.0) {
            return bad(format!("admm-qp needs rho > 0, got {}", self.rho));
        }
        if !(self.gamma.is_finite() && self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return bad("gamma and recon_weight must be finite, recon_weight non-negative".into());
        }
        if !(self.admm_tol > 0.0) || self.admm_max_inner == 0 {
            return bad("admm_tol and admm_max_inner must be positive".into());
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut v = vec![input_dim];
        v.extend(&self.hidden);
        v.push(self.embed_dim);
        v
    }
}

/// One outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Full-set mutual information of the posteriors (of the targets for SR-K-means).
    pub mi: f64,
    pub objective: f64,
    pub recon_loss: f64,
    pub nmi: Option<f64>,
    pub acc: Option<f64>,
    /// Seconds since training (after pretraining) started.
    pub wall_clock: f64,
    /// `‖Q − P‖_F` for ADMM-QP.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual: Option<f64>,
}

impl TraceRecord {
    /// Copy with the timing zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> TraceRecord {
        TraceRecord { wall_clock: 0.0, ..self.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct TrainTrace {
    pub method: Method,
    pub records: Vec<TraceRecord>,
    /// Mutual information before the first outer iteration.
    pub initial_mi: f64,
    pub targets: TargetMatrix,
    pub posteriors: PosteriorMatrix,
    pub prototypes: Option<Prototypes>,
    pub head: HeadParams,
    pub autoencoder: AutoencoderParams,
    pub assignment: Assignment,
    pub rescued_clusters: usize,
}

impl TrainTrace {
    pub fn final_record(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn mi_trajectory(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mi).collect()
    }
}

/// Seeds for independent random streams of one run.
mod stream {
    pub const INIT: u64 = 1;
    pub const PRETRAIN_NOISE: u64 = 2;
    pub const PRETRAIN_BATCHES: u64 = 3;
    pub const TARGET_INIT: u64 = 4;
    pub const TRAIN_NOISE: u64 = 5;
    pub const TRAIN_BATCHES: u64 = 6;
}

fn diverged(iteration: usize, what: impl Into<String>) -> Error {
    Error::TrainingDiverged { iteration, what: what.into() }
}

fn check_inputs(features: &Matrix, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if features.rows() < config.k {
        return Err(Error::invalid(format!("{} samples for k = {}", features.rows(), config.k)));
    }
    if !features.is_finite() {
        return Err(Error::invalid("features contain non-finite values"));
    }
    Ok(())
}

/// Full-set reconstruction loss with corruption disabled.
pub fn eval_reconstruction(ae: &AutoencoderParams, features: &Matrix) -> Result<f64> {
    let trace = forward(ae, features, Mode::Eval, &mut Rng::new(0))?;
    Ok(reconstruction_loss(&trace))
}

/// Xavier initialization followed by `pretrain_epochs` of Adam on the
/// reconstruction loss alone.
pub fn pretrain_autoencoder(features: &Matrix, config: &TrainConfig) -> Result<AutoencoderParams> {
    check_inputs(features, config)?;
    let master = Rng::new(config.seed);
    let mut ae = xavier_init(&config.layer_sizes(features.cols()), Activation::Relu, &mut master.fork(stream::INIT))?;
    let mut noise = master.fork(stream::PRETRAIN_NOISE);
    let batch_seed = master.fork(stream::PRETRAIN_BATCHES).seed();
    let mut adam = AdamState::for_params(&ae, config.lr);
    for epoch in 0..config.pretrain_epochs {
        let plan = BatchPlan::for_epoch(features.rows(), config.batch_size, batch_seed, epoch as u64)?;
        for batch in plan.batches() {
            let x = features.select_rows(batch);
            let trace = forward(&ae, &x, Mode::Train { dropout: config.dropout }, &mut noise)?;
            let loss = reconstruction_loss(&trace);
            if !loss.is_finite() {
                return Err(diverged(epoch, "reconstruction loss is not finite during pretraining"));
            }
            let grads = backward(&ae, &trace, 1.0, None)?;
            adam_step(&mut ae, &grads, &mut adam)?;
        }
        if !ae.all_finite() {
            return Err(diverged(epoch, "autoencoder parameters are not finite"));
        }
    }
    Ok(ae)
}

fn soft_kmeans_once(z: &Matrix, seeds: Prototypes, lambda: f64) -> Result<(TargetMatrix, Prototypes, usize)> {
    let mut protos = seeds;
    let mut q = softmin_assignment(z, &protos, lambda)?;
    let mut rescued = 0;
    for _ in 0..100 {
        let (next, empty) = soft_centroids_with_rescue(z, &q)?;
        rescued += empty.len();
        protos = next;
        let q_next = softmin_assignment(z, &protos, lambda)?;
        let change = q_next
            .as_matrix()
            .as_slice()
            .iter()
            .zip(q.as_matrix().as_slice())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        q = q_next;
        if change < 1e-6 {
            break;
        }
    }
    Ok((q, protos, rescued))
}

/// Soft K-means on the embeddings from k-means++ seeds; the restart with the
/// lowest SR-K-means loss wins.
pub fn init_targets(z: &Matrix, config: &TrainConfig) -> Result<(TargetMatrix, Prototypes)> {
    if config.k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {}", config.k)));
    }
    let lambda = if config.lambda > 0.0 { config.lambda } else { 1e-4 };
    let mut rng = Rng::new(config.seed).fork(stream::TARGET_INIT);
    let mut best: Option<(f64, TargetMatrix, Prototypes)> = None;
    for _ in 0..config.init_restarts.max(1) {
        let seeds = kmeans_plus_plus(z, config.k, &mut rng)?;
        let (q, protos, _) = soft_kmeans_once(z, seeds, lambda)?;
        let loss = sr_kmeans_loss(z, &q, &protos, lambda, config.k)?;
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, q, protos));
        }
    }
    let (_, q, protos) = best.expect("at least one restart");
    Ok((q, protos))
}

/// Autoencoder and softmax head trained jointly by one Adam instance.
#[derive(Clone, Debug)]
struct Network {
    ae: AutoencoderParams,
    head: HeadParams,
}

impl Parameters for Network {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.ae.slices();
        v.extend(self.head.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.ae.slices_mut();
        v.extend(self.head.slices_mut());
        v
    }
}

/// Per-batch clustering loss: `(indices, embeddings, head) → (loss, dL/dz, dL/dhead)`.
type BatchLoss<'a> = dyn FnMut(&[usize], &Matrix, &HeadParams) -> Result<(f64, Matrix, Option<HeadParams>)> + 'a;

struct Trainer<'a> {
    features: &'a Matrix,
    config: &'a TrainConfig,
    scorer: Option<&'a Scorer>,
    net: Network,
    adam: AdamState,
    noise: Rng,
    batch_seed: u64,
    epochs_run: u64,
    start: Instant,
}

impl<'a> Trainer<'a> {
    fn new(features: &'a Matrix, config: &'a TrainConfig, scorer: Option<&'a Scorer>, ae: AutoencoderParams, head: HeadParams) -> Self {
        let net = Network { ae, head };
        let adam = AdamState::for_params(&net, config.lr);
        let master = Rng::new(config.seed);
        Trainer {
            features,
            config,
            scorer,
            adam,
            net,
            noise: master.fork(stream::TRAIN_NOISE),
            batch_seed: master.fork(stream::TRAIN_BATCHES).seed(),
            epochs_run: 0,
            start: Instant::now(),
        }
    }

    fn embed(&self) -> Result<Matrix> {
        encode(&self.net.ae, self.features)
    }

    fn run_epochs(&mut self, iteration: usize, loss: &mut BatchLoss<'_>) -> Result<()> {
        for _ in 0..self.config.inner_epochs {
            let plan = BatchPlan::for_epoch(self.features.rows(), self.config.batch_size, self.batch_seed, self.epochs_run)?;
            self.epochs_run += 1;
            for batch in plan.batches() {
                let x = self.features.select_rows(batch);
                let trace = forward(&self.net.ae, &x, Mode::Train { dropout: self.config.dropout }, &mut self.noise)?;
                let (value, z_grad, head_grad) = loss(batch, trace.embedding(), &self.net.head)?;
                if !value.is_finite() || !z_grad.is_finite() {
                    return Err(diverged(iteration, "clustering loss or its gradient is not finite"));
                }
                let ae_grad = backward(&self.net.ae, &trace, self.config.recon_weight, Some(&z_grad))?;
                let head_grad = head_grad.unwrap_or_else(|| HeadParams::zeros(self.net.head.k(), self.net.head.dim()));
                let grads = Network { ae: ae_grad, head: head_grad };
                adam_step(&mut self.net, &grads, &mut self.adam)?;
            }
            if !self.net.all_finite() {
                return Err(diverged(iteration, "network parameters are not finite"));
            }
        }
        Ok(())
    }

    fn scores(&self, assignment: &Assignment) -> Result<Option<ClusterScores>> {
        self.scorer.map(|s| s.score(assignment)).transpose()
    }

    fn record(&self, iteration: usize, mi: f64, objective: f64, assignment: &Assignment, residual: Option<f64>) -> Result<TraceRecord> {
        let recon_loss = eval_reconstruction(&self.net.ae, self.features)?;
        if !(mi.is_finite() && recon_loss.is_finite()) {
            return Err(diverged(iteration, "traced quantities are not finite"));
        }
        let scores = self.scores(assignment)?;
        Ok(TraceRecord {
            iteration,
            mi,
            objective,
            recon_loss,
            nmi: scores.map(|s| s.nmi),
            acc: scores.map(|s| s.acc),
            wall_clock: self.start.elapsed().as_secs_f64(),
            residual,
        })
    }
}

fn argmax_assignment(p: &Matrix) -> Assignment {
    Assignment::new(p.row_iter().map(argmax).collect(), p.cols()).expect("argmax lies in range")
}

/// Pretrained autoencoder, initial targets and a head fitted to them.
struct Start {
    ae: AutoencoderParams,
    z: Matrix,
    targets: TargetMatrix,
    prototypes: Prototypes,
    head: HeadParams,
}

fn start(features: &Matrix, config: &TrainConfig) -> Result<Start> {
    check_inputs(features, config)?;
    let ae = pretrain_autoencoder(features, config)?;
    let z = encode(&ae, features)?;
    let (targets, prototypes) = init_targets(&z, config)?;
    let (head, _) = fit_head(&z, &targets, config.lambda, &HeadParams::zeros(config.k, z.cols()), 1e-6, 100)?;
    if !head.is_finite() {
        return Err(diverged(0, "initial head fit is not finite"));
    }
    Ok(Start { ae, z, targets, prototypes, head })
}

fn cross_entropy_loss<'q>(targets: &'q TargetMatrix, lambda: f64) -> impl FnMut(&[usize], &Matrix, &HeadParams) -> Result<(f64, Matrix, Option<HeadParams>)> + 'q {
    move |batch, z, head| {
        let q = TargetMatrix::new_unchecked(targets.as_matrix().select_rows(batch));
        let ce = cross_entropy_and_grads(head, z, &q, lambda)?;
        Ok((ce.loss, ce.z_grad, Some(ce.head_grad)))
    }
}

/// Shared loop of MI-ADM and DEPICT: full-set target update, then network epochs
/// on cross-entropy to the targets plus reconstruction.
fn train_alternating(features: &Matrix, config: &TrainConfig, scorer: Option<&Scorer>) -> Result<TrainTrace> {
    let s = start(features, config)?;
    let mut trainer = Trainer::new(features, config, scorer, s.ae, s.head);
    let mut p = posteriors(&trainer.net.head, &s.z)?;
    let initial_mi = mutual_information(&p);
    let mut q = s.targets;
    let mut records = Vec::with_capacity(config.epochs);
    for t in 0..config.epochs {
        q = match config.method {
            Method::Depict => depict_update(&p)?,
            _ => mi_adm_update(&p)?,
        };
        trainer.run_epochs(t, &mut cross_entropy_loss(&q, 0.0))?;
        p = posteriors(&trainer.net.head, &trainer.embed()?)?;
        let objective = match config.method {
            Method::Depict => depict_loss(&q, &p, config.gamma)?,
            _ => mi_adm_loss(&q, &p)?,
        };
        let assign = argmax_assignment(p.as_matrix());
        records.push(trainer.record(t, mutual_information(&p), objective, &assign, None)?);
    }
    Ok(TrainTrace {
        method: config.method,
        records,
        initial_mi,
        assignment: argmax_assignment(p.as_matrix()),
        targets: q,
        posteriors: p,
        prototypes: None,
        head: trainer.net.head,
        autoencoder: trainer.net.ae,
        rescued_clusters: 0,
    })
}

/// Alternates the MI-ADM target update with network epochs.
pub fn train_mi_adm(features: &Matrix, config: &TrainConfig, scorer: Option<&Scorer>) -> Result<TrainTrace> {
    let mut config = config.clone();
    config.method = Method::MiAdm;
    train_alternating(features, &config, scorer)
}

/// Alternates the DEPICT target update with network epochs.
pub fn train_depict(features: &Matrix, config: &TrainConfig, scorer: Option<&Scorer>) -> Result<TrainTrace> {
    let mut config = config.clone();
    config.method = Method::Depict;
    train_alternating(features, &config, scorer)
}

/// Direct maximization of the mini-batch mutual information plus reconstruction.
pub fn train_mi_d(features: &Matrix, config: &TrainConfig, scorer: Option<&Scorer>) -> Result<TrainTrace> {
    let s = start(features, config)?;
    let mut trainer = Trainer::new(features, config, scorer, s.ae, s.head);
    let initial_mi = mutual_information(&posteriors(&trainer.net.head, &s.z)?);
    let mut records = Vec::with_capacity(config.epochs);
    let mut mi_loss = |_: &[usize], z: &Matrix, head: &HeadParams| -> Result<(f64, Matrix, Option<HeadParams>)> {
        let p = posteriors(head, z)?;
        let logit_grad = mutual_information_logit_grad(&p).scale(-1.0);
        let (head_grad, z_grad) = head_backward(head, z, &logit_grad, 0.0)?;
        Ok((-mutual_information(&p), z_grad, Some(head_grad)))
    };
    let mut p = posteriors(&trainer.net.head, &s.z)?;
    for t in 0..config.epochs {
        trainer.run_epochs(t, &mut mi_loss)?;
        p = posteriors(&trainer.net.head, &trainer.embed()?)?;
        let mi = mutual_information(&p);
        let assign = argmax_assignment(p.as_matrix());
        records.push(trainer.record(t, mi, -mi, &assign, None)?);
    }
    Ok(TrainTrace {
        method: Method::MiD,
        records,
        initial_mi,
        assignment: argmax_assignment(p.as_matrix()),
        targets: TargetMatrix::new_unchecked(p.as_matrix().clone()),
        posteriors: p,
        prototypes: None,
        head: trainer.net.head,
        autoencoder: trainer.net.ae,
        rescued_clusters: 0,
    })
}

/// Softmax head that reproduces the softmin assignment exactly:
/// `θ_k = 2θ'_k/(λK)`, `b_k = −‖θ'_k‖²/(λK)`.
pub fn softmin_head(protos: &Prototypes, lambda: f64) -> Result<HeadParams> {
    let temp = lambda * protos.k() as f64;
    let theta = protos.means.scale(2.0 / temp);
    let bias = protos.means.row_iter().map(|m| -m.iter().map(|v| v * v).sum::<f64>() / temp).collect();
    HeadParams::new(theta, bias)
}

/// Alternates soft centroids, softmin assignment and encoder epochs on the
/// SR-K-means network loss plus reconstruction.
pub fn train_sr_kmeans(features: &Matrix, config: &TrainConfig, scorer: Option<&Scorer>) -> Result<TrainTrace> {
    let s = start(features, config)?;
    let (lambda, k) = (config.lambda, config.k);
    let mut trainer = Trainer::new(features, config, scorer, s.ae, s.head);
    let mut z = s.z;
    let mut q = s.targets;
    let mut protos = s.prototypes;
    let initial_mi = mutual_information(&q);
    let mut rescued = 0;
    let mut records = Vec::with_capacity(config.epochs);
    for t in 0..config.epochs {
        let (next, empty) = soft_centroids_with_rescue(&z, &q)?;
        rescued += empty.len();
        protos = next;
        q = softmin_assignment(&z, &protos, lambda)?;
        {
            let (qm, pr) = (q.as_matrix(), &protos);
            let mut loss = |batch: &[usize], zb: &Matrix, _: &HeadParams| -> Result<(f64, Matrix, Option<HeadParams>)> {
                let (value, grad) = sr_kmeans_network_loss(zb, &qm.select_rows(batch), pr, lambda, k)?;
                Ok((value, grad, None))
            };
            trainer.run_epochs(t, &mut loss)?;
        }
        z = trainer.embed()?;
        let objective = sr_kmeans_loss(&z, &q, &protos, lambda, k)?;
        if !objective.is_finite() {
            return Err(diverged(t, "SR-K-means loss is not finite"));
        }
        records.push(trainer.record(t, mutual_information(&q), objective, &hardening(&q), None)?);
    }
    let head = softmin_head(&protos, lambda)?;
    let p = posteriors(&head, &z)?;
    trainer.net.head = head;
    Ok(TrainTrace {
        method: Method::SrKmeans,
        records,
        initial_mi,
        assignment: hardening(&q),
        targets: q,
        posteriors: p,
        prototypes: Some(protos),
        head: trainer.net.head,
        autoencoder: trainer.net.ae,
        rescued_clusters: rescued,
    })
}

/// Batch estimate of the negated augmented Lagrangian in the network parameters,
/// `−(1/N_b) Σ q ln p − (N/N_b) Σ λ p + (N/N_b)(ρ/2) ‖q − p‖² + λ_2 ‖θ‖²`, with its
/// gradient on the logits.
fn admm_network_loss(
    head: &HeadParams,
    z: &Matrix,
    q: &Matrix,
    multipliers: &Matrix,
    rho: f64,
    n_total: usize,
    l2: f64,
) -> Result<(f64, HeadParams, Matrix)> {
    let p = posteriors(head, z)?;
    let pm = p.as_matrix();
    let nb = z.rows() as f64;
    let scale = n_total as f64 / nb;
    let mut loss = 0.0;
    let mut logit_grad = Matrix::zeros(pm.rows(), pm.cols());
    let mut dp = vec![0.0; pm.cols()];
    for i in 0..pm.rows() {
        let (pr, qr, lr) = (pm.row(i), q.row(i), multipliers.row(i));
        for c in 0..pm.cols() {
            let diff = qr[c] - pr[c];
            if qr[c] != 0.0 {
                loss -= qr[c] * pr[c].max(f64::MIN_POSITIVE).ln() / nb;
            }
            loss += scale * (-lr[c] * pr[c] + 0.5 * rho * diff * diff);
            dp[c] = scale * (-lr[c] - rho * diff);
        }
        let mean: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for (c, g) in logit_grad.row_mut(i).iter_mut().enumerate() {
            *g = (pr[c] - qr[c]) / nb + pr[c] * (dp[c] - mean);
        }
    }
    loss += crate::posterior::l2_penalty(head, l2);
    let (head_grad, z_grad) = head_backward(head, z, &logit_grad, l2)?;
    Ok((loss, head_grad, z_grad))
}

/// ADMM with a quadratic penalty: network epochs on the augmented Lagrangian, a
/// projected-gradient target step, then multiplier ascent.
pub fn train_admm_qp(features: &Matrix, config: &TrainConfig, scorer: Option<&Scorer>) -> Result<TrainTrace> {
    let s = start(features, config)?;
    let mut trainer = Trainer::new(features, config, scorer, s.ae, s.head);
    let n = features.rows();
    let mut p = posteriors(&trainer.net.head, &s.z)?;
    let initial_mi = mutual_information(&p);
    let mut q = TargetMatrix::new_unchecked(p.as_matrix().clone());
    let mut multipliers = Matrix::zeros(n, config.k);
    let opts = QStepOptions { max_iter: config.admm_max_inner, tol: config.admm_tol };
    let mut records = Vec::with_capacity(config.epochs);
    for t in 0..config.epochs {
        {
            let (qm, lm) = (q.as_matrix(), &multipliers);
            let mut loss = |batch: &[usize], z: &Matrix, head: &HeadParams| -> Result<(f64, Matrix, Option<HeadParams>)> {
                let (value, hg, zg) =
                    admm_network_loss(head, z, &qm.select_rows(batch), &lm.select_rows(batch), config.rho, n, 0.0)?;
                Ok((value, zg, Some(hg)))
            };
            trainer.run_epochs(t, &mut loss)?;
        }
        p = posteriors(&trainer.net.head, &trainer.embed()?)?;
        q = admm_q_step(&q, &p, &multipliers, config.rho, opts)?.targets;
        admm_multiplier_step(&mut multipliers, &q, &p, config.rho)?;
        let objective = augmented_lagrangian(&q, &p, &multipliers, config.rho)?;
        let residual = frobenius_sq_diff(q.as_matrix(), p.as_matrix())?.sqrt();
        let assign = argmax_assignment(p.as_matrix());
        records.push(trainer.record(t, mutual_information(&p), objective, &assign, Some(residual))?);
    }
    Ok(TrainTrace {
        method: Method::AdmmQp,
        records,
        initial_mi,
        assignment: argmax_assignment(p.as_matrix()),
        targets: q,
        posteriors: p,
        prototypes: None,
        head: trainer.net.head,
        autoencoder: trainer.net.ae,
        rescued_clusters: 0,
    })
}

/// Runs the configured method.
pub fn train(features: &Matrix, config: &TrainConfig, scorer: Option<&Scorer>) -> Result<TrainTrace> {
    match config.method {
        Method::MiD => train_mi_d(features, config, scorer),
        Method::MiAdm => train_mi_adm(features, config, scorer),
        Method::Depict => train_depict(features, config, scorer),
        Method::SrKmeans => train_sr_kmeans(features, config, scorer),
        Method::AdmmQp => train_admm_qp(features, config, scorer),
    }
}

/// MI-ADM with exact sub-steps on frozen embeddings: each iteration applies the
/// target update and then fits the head to the new targets to gradient norm
/// `grad_tol`. Returns the full-set MI before and after every iteration.
pub fn exact_substep_mi_adm(
    z: &Matrix,
    init: &TargetMatrix,
    lambda: f64,
    iterations: usize,
    grad_tol: f64,
) -> Result<Vec<f64>> {
    let k = init.k();
    let (mut head, _) = fit_head(z, init, lambda, &HeadParams::zeros(k, z.cols()), grad_tol, 500)?;
    let mut p = posteriors(&head, z)?;
    let mut out = vec![mutual_information(&p)];
    for _ in 0..iterations {
        let q = mi_adm_update(&p)?;
        head = fit_head(z, &q, lambda, &head, grad_tol, 500)?.0;
        p = posteriors(&head, z)?;
        out.push(mutual_information(&p));
    }
    Ok(out)
}

/// ADMM on frozen embeddings with only the head trainable. The parameter step
/// takes `head_steps` full-batch Adam steps. Returns `‖Q − P‖_F` after each outer iteration.
pub fn frozen_admm_qp(
    z: &Matrix,
    head: &HeadParams,
    rho: f64,
    outer: usize,
    head_steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut head = head.clone();
    let mut adam = AdamState::for_params(&head, lr);
    let mut p = posteriors(&head, z)?;
    let mut q = TargetMatrix::new_unchecked(p.as_matrix().clone());
    let mut multipliers = Matrix::zeros(z.rows(), head.k());
    let mut residuals = Vec::with_capacity(outer);
    for t in 0..outer {
        for _ in 0..head_steps {
            let (_, grad, _) = admm_network_loss(&head, z, q.as_matrix(), &multipliers, rho, z.rows(), 0.0)?;
            adam_step(&mut head, &grad, &mut adam)?;
        }
        if !head.is_finite() {
            return Err(diverged(t, "head parameters are not finite"));
        }
        p = posteriors(&head, z)?;
        q = admm_q_step(&q, &p, &multipliers, rho, QStepOptions::default())?.targets;
        admm_multiplier_step(&mut multipliers, &q, &p, rho)?;
        residuals.push(frobenius_sq_diff(q.as_matrix(), p.as_matrix())?.sqrt());
    }
    Ok(residuals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_blobs;
    use crate::eval::{accuracy, lloyd_oracle};

    fn blobs(seed: u64) -> crate::data::Dataset {
        gen_gaussian_blobs(3, 40, 5, 8.0, 1.0, &mut Rng::new(seed)).unwrap()
    }

    fn small(method: Method) -> TrainConfig {
        TrainConfig {
            epochs: 4,
            pretrain_epochs: 3,
            hidden: vec![16],
            embed_dim: 3,
            batch_size: 40,
            seed: 11,
            init_restarts: 3,
            ..TrainConfig::new(method, 3)
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("kmeans".parse::<Method>().is_err());
    }

    #[test]
    fn config_rejects_single_cluster() {
        let c = TrainConfig::new(Method::MiAdm, 1);
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(Method::SrKmeans, 3);
        c.lambda = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pretraining_reduces_reconstruction_loss() {
        let data = blobs(1);
        let mut cfg = small(Method::MiAdm);
        cfg.pretrain_epochs = 0;
        let init = pretrain_autoencoder(&data.features, &cfg).unwrap();
        let master = Rng::new(cfg.seed);
        let xavier = xavier_init(&cfg.layer_sizes(5), Activation::Relu, &mut master.fork(stream::INIT)).unwrap();
        assert_eq!(init, xavier);
        cfg.pretrain_epochs = 1;
        let one = pretrain_autoencoder(&data.features, &cfg).unwrap();
        assert!(eval_reconstruction(&one, &data.features).unwrap() < eval_reconstruction(&init, &data.features).unwrap());
        assert_eq!(one, pretrain_autoencoder(&data.features, &cfg).unwrap());
    }

    #[test]
    fn init_targets_match_lloyd_on_separated_blobs() {
        let data = gen_gaussian_blobs(3, 50, 4, 12.0, 0.5, &mut Rng::new(4)).unwrap();
        let cfg = small(Method::SrKmeans);
        let (q, protos) = init_targets(&data.features, &cfg).unwrap();
        let (oracle, _) = lloyd_oracle(&data.features, 3, 5, &mut Rng::new(9)).unwrap();
        assert!(accuracy(&hardening(&q), &oracle).unwrap() >= 0.99);
        // converged: one more sweep barely moves the loss
        let before = sr_kmeans_loss(&data.features, &q, &protos, cfg.lambda, 3).unwrap();
        let (again, protos2, _) = soft_kmeans_once(&data.features, protos, cfg.lambda).unwrap();
        let after = sr_kmeans_loss(&data.features, &again, &protos2, cfg.lambda, 3).unwrap();
        assert!((before - after).abs() < 1e-9 * before.abs().max(1.0));
    }

    #[test]
    fn every_method_is_deterministic_and_label_blind() {
        let data = blobs(2);
        let scorer = Scorer::new(data.labels.as_ref().unwrap()).unwrap();
        for m in Method::ALL {
            let cfg = small(m);
            let a = train(&data.features, &cfg, Some(&scorer)).unwrap();
            let b = train(&data.features, &cfg, Some(&scorer)).unwrap();
            let blind = train(&data.without_labels().features, &cfg, None).unwrap();
            assert_eq!(a.records.len(), cfg.epochs, "{m}");
            let strip = |t: &TrainTrace| t.records.iter().map(TraceRecord::without_timing).collect::<Vec<_>>();
            assert_eq!(strip(&a), strip(&b), "{m}");
            assert_eq!(a.autoencoder, b.autoencoder, "{m}");
            assert_eq!(a.assignment, blind.assignment, "{m}");
            assert_eq!(a.targets, blind.targets, "{m}");
            let mis: Vec<f64> = a.records.iter().map(|r| r.mi).collect();
            assert_eq!(mis, blind.mi_trajectory(), "{m}");
            assert!(blind.records.iter().all(|r| r.acc.is_none()));
        }
    }

    #[test]
    fn softmin_head_reproduces_softmin_assignment() {
        let mut rng = Rng::new(3);
        let z = Matrix::from_fn(8, 2, |_, _| rng.normal());
        let protos = Prototypes::new(Matrix::from_fn(3, 2, |_, _| rng.normal())).unwrap();
        let q = softmin_assignment(&z, &protos, 0.4).unwrap();
        let p = posteriors(&softmin_head(&protos, 0.4).unwrap(), &z).unwrap();
        for (a, b) in q.as_matrix().as_slice().iter().zip(p.as_matrix().as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn admm_network_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let z = Matrix::from_fn(6, 2, |_, _| rng.normal());
        let head = HeadParams::new(Matrix::from_fn(3, 2, |_, _| rng.normal()), vec![0.1, -0.2, 0.3]).unwrap();
        let q = rng.stochastic_matrix(6, 3);
        let lam = Matrix::from_fn(6, 3, |_, _| rng.normal() * 0.1);
        let (_, hg, zg) = admm_network_loss(&head, &z, &q, &lam, 0.7, 20, 0.05).unwrap();
        let eps = 1e-6;
        let analytic: Vec<f64> = hg.slices().concat();
        for idx in 0..analytic.len() {
            let (mut hp, mut hm) = (head.clone(), head.clone());
            bump(&mut hp, idx, eps);
            bump(&mut hm, idx, -eps);
            let fp = admm_network_loss(&hp, &z, &q, &lam, 0.7, 20, 0.05).unwrap().0;
            let fm = admm_network_loss(&hm, &z, &q, &lam, 0.7, 20, 0.05).unwrap().0;
            let num = (fp - fm) / (2.0 * eps);
            assert!((num - analytic[idx]).abs() < 1e-6 * num.abs().max(1.0), "{idx}");
        }
        for idx in 0..12 {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp.as_mut_slice()[idx] += eps;
            zm.as_mut_slice()[idx] -= eps;
            let fp = admm_network_loss(&head, &zp, &q, &lam, 0.7, 20, 0.05).unwrap().0;
            let fm = admm_network_loss(&head, &zm, &q, &lam, 0.7, 20, 0.05).unwrap().0;
            let num = (fp - fm) / (2.0 * eps);
            assert!((num - zg.as_slice()[idx]).abs() < 1e-6 * num.abs().max(1.0), "z {idx}");
        }
    }

    fn bump(h: &mut HeadParams, mut idx: usize, d: f64) {
        for s in h.slices_mut() {
            if idx < s.len() {
                s[idx] += d;
                return;
            }
            idx -= s.len();
        }
    }

    #[test]
    fn first_multiplier_step_from_q_equal_p_is_identity() {
        let mut rng = Rng::new(5);
        let p = PosteriorMatrix::new(rng.stochastic_matrix(4, 3)).unwrap();
        let q = TargetMatrix::new(p.as_matrix().clone()).unwrap();
        let mut lam = Matrix::zeros(4, 3);
        admm_multiplier_step(&mut lam, &q, &p, 1.0).unwrap();
        assert!(lam.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_admm_residual_shrinks() {
        let data = gen_gaussian_blobs(3, 30, 2, 4.0, 1.0, &mut Rng::new(6)).unwrap();
        let cfg = small(Method::AdmmQp);
        let (q, _) = init_targets(&data.features, &cfg).unwrap();
        let (head, _) = fit_head(&data.features, &q, 1e-2, &HeadParams::zeros(3, 2), 1e-8, 100).unwrap();
        let res = frozen_admm_qp(&data.features, &head, 1.0, 50, 20, 0.01).unwrap();
        assert!(res[49] < res[4], "{res:?}");
    }

    #[test]
    fn target_step_cost_is_small_next_to_an_epoch() {
        let n = 10_000;
        let k = 10;
        let mut rng = Rng::new(8);
        let features = Matrix::from_fn(n, 20, |_, _| rng.normal());
        let cfg = TrainConfig { hidden: vec![100, 100], embed_dim: 10, ..TrainConfig::new(Method::MiAdm, k) };
        let ae = xavier_init(&cfg.layer_sizes(20), Activation::Relu, &mut rng).unwrap();
        let head = HeadParams::new(Matrix::from_fn(k, 10, |_, _| rng.normal()), vec![0.0; k]).unwrap();
        let z = encode(&ae, &features).unwrap();
        let p = posteriors(&head, &z).unwrap();
        let q = mi_adm_update(&p).unwrap();

        let reps = 20;
        let t0 = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(mi_adm_update(std::hint::black_box(&p)).unwrap());
        }
        let update = t0.elapsed().as_secs_f64() / reps as f64;

        let mut trainer = Trainer::new(&features, &cfg, None, ae, head);
        let t1 = Instant::now();
        trainer.run_epochs(0, &mut cross_entropy_loss(&q, cfg.lambda)).unwrap();
        let epoch = t1.elapsed().as_secs_f64();
        assert!(update < 0.01 * epoch, "update {update:.2e}s vs epoch {epoch:.2e}s");
    }
}
