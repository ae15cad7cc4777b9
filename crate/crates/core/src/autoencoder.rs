//! Denoising autoencoder with a clean and a corrupted encoder path sharing
//! weights, a decoder fed from the corrupted code, and layer-wise reconstruction.

use serde::{Deserialize, Serialize};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::posterior::HeadParams;

/// Anything Adam can update: a fixed sequence of flat parameter slices.
pub trait Parameters {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative from the pre-activation; ReLU uses 0 at the kink.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer; `weights` is `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Layer { weights: Matrix::zeros(output, input), bias: vec![0.0; output] }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn pre_activation(&self, x: &Matrix) -> Result<Matrix> {
        let mut a = x.matmul_transposed(&self.weights)?;
        a.add_row_vector(&self.bias)?;
        Ok(a)
    }
}

/// Encoder layer `l` maps `z^l → z^{l+1}`; decoder layer `l` maps `z̃^{l+1} → z̃^l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderParams {
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    pub activation: Activation,
}

impl AutoencoderParams {
    /// Checks that encoder and decoder form mirrored stacks.
    pub fn new(encoder: Vec<Layer>, decoder: Vec<Layer>, activation: Activation) -> Result<Self> {
        if encoder.is_empty() || encoder.len() != decoder.len() {
            return Err(Error::shape("encoder and decoder need the same, non-zero depth"));
        }
        for (l, (e, d)) in encoder.iter().zip(&decoder).enumerate() {
            if e.bias.len() != e.output_dim() || d.bias.len() != d.output_dim() {
                return Err(Error::shape(format!("layer {l}: bias length mismatch")));
            }
            if d.input_dim() != e.output_dim() || d.output_dim() != e.input_dim() {
                return Err(Error::shape(format!("layer {l}: decoder does not mirror encoder")));
            }
            if l > 0 && encoder[l - 1].output_dim() != e.input_dim() {
                return Err(Error::shape(format!("layer {l}: encoder sizes do not chain")));
            }
        }
        Ok(AutoencoderParams { encoder, decoder, activation })
    }

    /// Zero parameters for the given widths `[d_x, h_1, ..., d_z]`.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::invalid("need at least two positive layer sizes"));
        }
        let encoder = layer_sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        let decoder = layer_sizes.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect();
        Ok(AutoencoderParams { encoder, decoder, activation })
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.encoder[0].input_dim()];
        v.extend(self.encoder.iter().map(Layer::output_dim));
        v
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder[self.depth() - 1].output_dim()
    }

    fn encoder_activation(&self, l: usize) -> Activation {
        if l + 1 == self.depth() {
            Activation::Identity
        } else {
            self.activation
        }
    }

    fn decoder_activation(&self, l: usize) -> Activation {
        if l == 0 {
            Activation::Identity
        } else {
            self.activation
        }
    }
}

impl Parameters for AutoencoderParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Glorot-uniform weights `U(±√(6/(fan_in+fan_out)))` and zero biases.
pub fn xavier_init(layer_sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<AutoencoderParams> {
    let mut params = AutoencoderParams::zeros(layer_sizes, activation)?;
    for layer in params.encoder.iter_mut().chain(params.decoder.iter_mut()) {
        let bound = (6.0 / (layer.input_dim() + layer.output_dim()) as f64).sqrt();
        for w in layer.weights.as_mut_slice() {
            *w = rng.uniform_range(-bound, bound);
        }
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Inverted dropout with the given drop probability after every corrupted encoder layer.
    Train { dropout: f64 },
    /// No corruption; the corrupted path equals the clean one.
    Eval,
}

/// Everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `z^0 = x, z^1, ..., z^L`.
    pub clean: Vec<Matrix>,
    clean_pre: Vec<Matrix>,
    /// `ẑ^0 = x, ẑ^1, ..., ẑ^L`.
    pub corrupted: Vec<Matrix>,
    corrupted_pre: Vec<Matrix>,
    masks: Vec<Option<Matrix>>,
    /// `z̃^0, ..., z̃^L` with `z̃^L = ẑ^L`.
    pub decoded: Vec<Matrix>,
    decoded_pre: Vec<Matrix>,
}

impl ForwardTrace {
    /// Clean embedding `z^L`.
    pub fn embedding(&self) -> &Matrix {
        self.clean.last().expect("trace has at least one level")
    }

    pub fn reconstruction(&self) -> &Matrix {
        &self.decoded[0]
    }
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    Matrix::from_fn(rows, cols, |_, _| if rng.uniform() < p { 0.0 } else { keep })
}

fn apply_mask(m: &mut Matrix, mask: &Option<Matrix>) {
    if let Some(mask) = mask {
        for (v, k) in m.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *v *= k;
        }
    }
}

/// Runs the clean path, the corrupted path and the decoder.
pub fn forward(params: &AutoencoderParams, x: &Matrix, mode: Mode, rng: &mut Rng) -> Result<ForwardTrace> {
    if x.cols() != params.input_dim() {
        return Err(Error::shape(format!(
            "input has {} columns, autoencoder expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let dropout = match mode {
        Mode::Train { dropout } => {
            if !(0.0..1.0).contains(&dropout) {
                return Err(Error::invalid("dropout must be in [0, 1)"));
            }
            dropout
        }
        Mode::Eval => 0.0,
    };
    let depth = params.depth();
    let mut mask_for = |m: &Matrix| {
        if dropout > 0.0 {
            Some(dropout_mask(m.rows(), m.cols(), dropout, rng))
        } else {
            None
        }
    };

    let mut clean = vec![x.clone()];
    let mut clean_pre = Vec::with_capacity(depth);
    for (l, layer) in params.encoder.iter().enumerate() {
        let pre = layer.pre_activation(&clean[l])?;
        let act = params.encoder_activation(l);
        clean.push(pre.map(|v| act.apply(v)));
        clean_pre.push(pre);
    }

    let mut masks = Vec::with_capacity(depth + 1);
    let mut corrupted_pre = Vec::with_capacity(depth);
    masks.push(None);
    let mut corrupted = vec![x.clone()];
    for (l, layer) in params.encoder.iter().enumerate() {
        let pre = layer.pre_activation(&corrupted[l])?;
        let act = params.encoder_activation(l);
        let mut out = pre.map(|v| act.apply(v));
        let mask = mask_for(&out);
        apply_mask(&mut out, &mask);
        masks.push(mask);
        corrupted.push(out);
        corrupted_pre.push(pre);
    }

    let mut decoded = vec![Matrix::zeros(0, 0); depth + 1];
    let mut decoded_pre = vec![Matrix::zeros(0, 0); depth];
    decoded[depth] = corrupted[depth].clone();
    for l in (0..depth).rev() {
        let pre = params.decoder[l].pre_activation(&decoded[l + 1])?;
        let act = params.decoder_activation(l);
        decoded[l] = pre.map(|v| act.apply(v));
        decoded_pre[l] = pre;
    }

    Ok(ForwardTrace { clean, clean_pre, corrupted, corrupted_pre, masks, decoded, decoded_pre })
}

/// Clean embedding of `x`.
pub fn encode(params: &AutoencoderParams, x: &Matrix) -> Result<Matrix> {
    if x.cols() != params.input_dim() {
        return Err(Error::shape("input width does not match the encoder"));
    }
    let mut z = x.clone();
    for (l, layer) in params.encoder.iter().enumerate() {
        let act = params.encoder_activation(l);
        z = layer.pre_activation(&z)?.map(|v| act.apply(v));
    }
    Ok(z)
}

/// `R = (1/N) Σ_i Σ_{l<L} (1/d_l) ‖z_i^l − z̃_i^l‖²`.
pub fn reconstruction_loss(trace: &ForwardTrace) -> f64 {
    let n = trace.clean[0].rows().max(1) as f64;
    let depth = trace.clean.len() - 1;
    (0..depth)
        .map(|l| {
            let d = trace.clean[l].cols() as f64;
            trace.clean[l]
                .as_slice()
                .iter()
                .zip(trace.decoded[l].as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d
        })
        .sum::<f64>()
        / n
}

fn accumulate_layer(grad: &mut Layer, delta: &Matrix, input: &Matrix) -> Result<()> {
    grad.weights.add_assign(&delta.transposed_matmul(input)?)?;
    for (g, s) in grad.bias.iter_mut().zip(delta.column_sums()) {
        *g += s;
    }
    Ok(())
}

fn activation_delta(upstream: &Matrix, pre: &Matrix, act: Activation) -> Result<Matrix> {
    upstream.zip_map(pre, |g, a| g * act.derivative(a))
}

/// Gradients of `recon_weight · R + ⟨embedding_grad, z^L⟩` with respect to all
/// parameters. `embedding_grad` is the upstream gradient on the clean code.
pub fn backward(
    params: &AutoencoderParams,
    trace: &ForwardTrace,
    recon_weight: f64,
    embedding_grad: Option<&Matrix>,
) -> Result<AutoencoderParams> {
    let depth = params.depth();
    let n = trace.clean[0].rows().max(1) as f64;
    let mut grads = AutoencoderParams::zeros(&params.layer_sizes(), params.activation)?;

    // dR/dz^l for l < L; the decoded side gets the negative.
    let recon_grad: Vec<Matrix> = (0..depth)
        .map(|l| {
            let c = 2.0 * recon_weight / (n * trace.clean[l].cols() as f64);
            trace.clean[l].zip_map(&trace.decoded[l], |a, b| c * (a - b))
        })
        .collect::<Result<_>>()?;

    // Decoder, from z̃^0 upwards; ends with the gradient on ẑ^L.
    let mut upstream = recon_grad[0].scale(-1.0);
    for l in 0..depth {
        let delta = activation_delta(&upstream, &trace.decoded_pre[l], params.decoder_activation(l))?;
        accumulate_layer(&mut grads.decoder[l], &delta, &trace.decoded[l + 1])?;
        let mut next = delta.matmul(&params.decoder[l].weights)?;
        if l + 1 < depth {
            next.add_assign(&recon_grad[l + 1].scale(-1.0))?;
        }
        upstream = next;
    }

    // Corrupted encoder, from ẑ^L down.
    for l in (0..depth).rev() {
        let mut g = upstream;
        apply_mask(&mut g, &trace.masks[l + 1]);
        let delta = activation_delta(&g, &trace.corrupted_pre[l], params.encoder_activation(l))?;
        accumulate_layer(&mut grads.encoder[l], &delta, &trace.corrupted[l])?;
        upstream = if l > 0 { delta.matmul(&params.encoder[l].weights)? } else { Matrix::zeros(0, 0) };
    }

    // Clean encoder, from z^L down.
    let top = trace.embedding();
    let mut upstream = match embedding_grad {
        Some(g) => {
            g.ensure_same_shape(top, "embedding gradient")?;
            g.clone()
        }
        None => Matrix::zeros(top.rows(), top.cols()),
    };
    for l in (0..depth).rev() {
        let delta = activation_delta(&upstream, &trace.clean_pre[l], params.encoder_activation(l))?;
        accumulate_layer(&mut grads.encoder[l], &delta, &trace.clean[l])?;
        if l > 0 {
            upstream = delta.matmul(&params.encoder[l].weights)?;
            upstream.add_assign(&recon_grad[l])?;
        }
    }
    Ok(grads)
}

/// Adam moments for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn for_params(params: &impl Parameters, lr: f64) -> Self {
        Self::new(params.num_params(), lr)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `params` along `grads`.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    if params.num_params() != state.m.len() || grads.num_params() != state.m.len() {
        return Err(Error::shape("Adam state does not match the parameter count"));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let mut idx = 0;
    for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
        for (pv, &gv) in p.iter_mut().zip(g) {
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            *m = state.beta1 * *m + (1.0 - state.beta1) * gv;
            *v = state.beta2 * *v + (1.0 - state.beta2) * gv * gv;
            *pv -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
            idx += 1;
        }
    }
    Ok(())
}

/// Versioned JSON container for trained weights.
///
/// Matrices are stored as `{rows, cols, data}` with `data` row-major. Loading
/// rejects a wrong `format`/`version`, and sizes that disagree with `layer_sizes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    pub head: Option<HeadParams>,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "deepcluster-checkpoint";
    pub const VERSION: u32 = 1;

    pub fn new(ae: &AutoencoderParams, head: Option<&HeadParams>, seed: u64) -> Self {
        Checkpoint {
            format: Self::FORMAT.to_string(),
            version: Self::VERSION,
            seed,
            layer_sizes: ae.layer_sizes(),
            activation: ae.activation,
            encoder: ae.encoder.clone(),
            decoder: ae.decoder.clone(),
            head: head.cloned(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        ckpt.autoencoder()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Validated autoencoder weights.
    pub fn autoencoder(&self) -> Result<AutoencoderParams> {
        if self.format != Self::FORMAT || self.version != Self::VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let ae = AutoencoderParams::new(self.encoder.clone(), self.decoder.clone(), self.activation)?;
        if ae.layer_sizes() != self.layer_sizes {
            return Err(Error::Format(format!(
                "layer_sizes {:?} disagree with weights {:?}",
                self.layer_sizes,
                ae.layer_sizes()
            )));
        }
        if let Some(head) = &self.head {
            if head.dim() != ae.embed_dim() || head.theta.rows() != head.bias.len() {
                return Err(Error::Format("head does not fit the embedding".into()));
            }
        }
        Ok(ae)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn objective(params: &AutoencoderParams, x: &Matrix, upstream: &Matrix, mode: Mode, seed: u64) -> f64 {
        let trace = forward(params, x, mode, &mut Rng::new(seed)).unwrap();
        let lin: f64 = trace.embedding().as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum();
        0.7 * reconstruction_loss(&trace) + lin
    }

    fn check_gradients(activation: Activation, mode: Mode) {
        let mut rng = Rng::new(5);
        let mut params = xavier_init(&[4, 6, 5, 3], activation, &mut rng).unwrap();
        for layer in params.encoder.iter_mut().chain(params.decoder.iter_mut()) {
            for b in &mut layer.bias {
                *b = rng.normal() * 0.3;
            }
        }
        let x = Matrix::from_fn(7, 4, |_, _| rng.normal());
        let upstream = Matrix::from_fn(7, 3, |_, _| rng.normal() * 0.1);
        let trace = forward(&params, &x, mode, &mut Rng::new(11)).unwrap();
        let grads = backward(&params, &trace, 0.7, Some(&upstream)).unwrap();
        let analytic: Vec<f64> = grads.slices().concat();
        let eps = 1e-6;
        let mut flat_idx = 0;
        let count = params.num_params();
        for idx in 0..count {
            let mut plus = params.clone();
            let mut minus = params.clone();
            set_flat(&mut plus, idx, eps);
            set_flat(&mut minus, idx, -eps);
            let num = (objective(&plus, &x, &upstream, mode, 11) - objective(&minus, &x, &upstream, mode, 11)) / (2.0 * eps);
            let ana = analytic[idx];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
            assert!(rel < 1e-5, "param {idx}: numeric {num} analytic {ana}");
            flat_idx += 1;
        }
        assert_eq!(flat_idx, count);
    }

    fn set_flat(params: &mut AutoencoderParams, mut idx: usize, delta: f64) {
        for s in params.slices_mut() {
            if idx < s.len() {
                s[idx] += delta;
                return;
            }
            idx -= s.len();
        }
        panic!("index out of range");
    }

    #[test]
    fn gradients_match_finite_differences_identity() {
        check_gradients(Activation::Identity, Mode::Eval);
        check_gradients(Activation::Identity, Mode::Train { dropout: 0.3 });
    }

    #[test]
    fn gradients_match_finite_differences_relu() {
        check_gradients(Activation::Relu, Mode::Eval);
        check_gradients(Activation::Relu, Mode::Train { dropout: 0.3 });
    }

    #[test]
    fn perfect_linear_autoencoder_has_zero_loss() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let enc = Layer { weights: w.clone(), bias: vec![0.0] };
        let dec = Layer { weights: w.transpose(), bias: vec![0.0, 0.0] };
        let params = AutoencoderParams::new(vec![enc], vec![dec], Activation::Identity).unwrap();
        let x = Matrix::from_rows(&[vec![1.5, 0.0], vec![-2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let trace = forward(&params, &x, Mode::Eval, &mut Rng::new(0)).unwrap();
        assert_eq!(reconstruction_loss(&trace), 0.0);
    }

    #[test]
    fn reconstruction_loss_hand_example() {
        // one layer, d_x = 2, d_z = 1, zero weights: z̃^0 = decoder bias
        let mut params = AutoencoderParams::zeros(&[2, 1], Activation::Relu).unwrap();
        params.decoder[0].bias = vec![1.0, -1.0];
        let x = Matrix::from_rows(&[vec![3.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let trace = forward(&params, &x, Mode::Eval, &mut Rng::new(0)).unwrap();
        let want = ((4.0 + 4.0) / 2.0 + (1.0 + 1.0) / 2.0) / 2.0;
        assert!((reconstruction_loss(&trace) - want).abs() < 1e-15);
    }

    #[test]
    fn dead_relu_unit_gets_zero_gradient() {
        let mut rng = Rng::new(1);
        let mut params = xavier_init(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        params.encoder[0].bias[2] = -1e6;
        let x = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let trace = forward(&params, &x, Mode::Eval, &mut rng).unwrap();
        let g = backward(&params, &trace, 1.0, Some(&Matrix::filled(5, 2, 1.0))).unwrap();
        assert!(g.encoder[0].weights.row(2).iter().all(|&v| v == 0.0));
        assert_eq!(g.encoder[0].bias[2], 0.0);
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let params = xavier_init(&[5, 8, 3], Activation::Relu, &mut Rng::new(3)).unwrap();
        let x = Matrix::from_fn(6, 5, |i, j| (i * 5 + j) as f64 * 0.1);
        let a = forward(&params, &x, Mode::Train { dropout: 0.2 }, &mut Rng::new(9)).unwrap();
        let b = forward(&params, &x, Mode::Train { dropout: 0.2 }, &mut Rng::new(9)).unwrap();
        assert_eq!(a.decoded[0], b.decoded[0]);
        assert_eq!(a.embedding(), &encode(&params, &x).unwrap());
    }

    #[test]
    fn xavier_bounds_and_zero_biases() {
        let params = xavier_init(&[10, 30, 4], Activation::Relu, &mut Rng::new(0)).unwrap();
        let bound = (6.0f64 / 40.0).sqrt();
        assert!(params.encoder[0].weights.as_slice().iter().all(|w| w.abs() <= bound));
        assert!(params.encoder.iter().chain(&params.decoder).all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = crate::posterior::HeadParams::zeros(1, 2);
        let mut g = crate::posterior::HeadParams::zeros(1, 2);
        g.theta.as_mut_slice().copy_from_slice(&[3.0, -0.5]);
        g.bias[0] = 1e-3;
        let mut state = AdamState::for_params(&p, 0.01);
        adam_step(&mut p, &g, &mut state).unwrap();
        assert!((p.theta.as_slice()[0] + 0.01).abs() < 1e-9);
        assert!((p.theta.as_slice()[1] - 0.01).abs() < 1e-9);
        assert!((p.bias[0] + 0.01).abs() < 1e-7);
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = xavier_init(&[3, 4, 2], Activation::Relu, &mut Rng::new(8)).unwrap();
        let json = serde_json::to_string(&params).unwrap();
        let back: AutoencoderParams = serde_json::from_str(&json).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn checkpoint_container_round_trip() {
        let ae = xavier_init(&[3, 4, 2], Activation::Relu, &mut Rng::new(9)).unwrap();
        let head = HeadParams::new(Matrix::from_fn(3, 2, |i, j| (i + j) as f64 / 7.0), vec![0.1, -0.2, 0.3]).unwrap();
        let ckpt = Checkpoint::new(&ae, Some(&head), 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.autoencoder().unwrap(), ae);
        assert_eq!(back.to_json(), ckpt.to_json());
    }

    #[test]
    fn checkpoint_rejects_inconsistent_files() {
        let ae = xavier_init(&[3, 4, 2], Activation::Relu, &mut Rng::new(9)).unwrap();
        let mut ckpt = Checkpoint::new(&ae, None, 0);
        ckpt.layer_sizes = vec![3, 5, 2];
        assert!(matches!(Checkpoint::from_json(&ckpt.to_json()), Err(Error::Format(_))));
        let mut ckpt = Checkpoint::new(&ae, None, 0);
        ckpt.version = 99;
        assert!(Checkpoint::from_json(&ckpt.to_json()).is_err());
        let bad = r#"{"rows":2,"cols":2,"data":[1.0]}"#;
        assert!(serde_json::from_str::<Matrix>(bad).is_err());
    }
}
