//! Multilayer-perceptron autoencoder that maps a channel to analog phases.
//!
//! The network reads the flattened normalised channel (re/im interleaved),
//! passes it through dense encoder layers, an additive-noise layer used only
//! during training, dense decoder layers and a sigmoid output with one unit
//! per analog phase shifter. Output `o` becomes the phase `2π·o`; the digital
//! stage is refit by least squares for every sample and power-normalised.
//! Training minimises the mean Frobenius distance to the optimal precoder.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{matmul_counted, ComplexMatrix, LinalgError, MultiplicationCounter, C64};
use crate::precoders::{counted_least_squares, optimal_precoder, AnalogStructure, HybridPrecoder, PrecoderError};
use crate::rng::{self, SimRng};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid network: {0}")]
    Architecture(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("non-finite parameter update")]
    NonFiniteUpdate,
    #[error(transparent)]
    Precoder(#[from] PrecoderError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Input,
    Encoder,
    Noise,
    Decoder,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
    pub role: LayerRole,
}

impl LayerSpec {
    pub const fn new(units: usize, activation: Activation, role: LayerRole) -> Self {
        Self {
            units,
            activation,
            role,
        }
    }
}

/// Encoder widths, noise layer, decoder widths, sigmoid output.
pub const ENCODER_WIDTHS: [usize; 2] = [300, 128];
pub const DECODER_WIDTHS: [usize; 2] = [100, 64];
/// Input width of the reduced-input variant (features projected first).
pub const PROJECTED_INPUT: usize = 100;

pub fn default_architecture(inputs: usize, outputs: usize) -> Vec<LayerSpec> {
    let mut v = vec![LayerSpec::new(inputs, Activation::Linear, LayerRole::Input)];
    for &u in &ENCODER_WIDTHS {
        v.push(LayerSpec::new(u, Activation::Relu, LayerRole::Encoder));
    }
    v.push(LayerSpec::new(ENCODER_WIDTHS[1], Activation::Linear, LayerRole::Noise));
    for &u in &DECODER_WIDTHS {
        v.push(LayerSpec::new(u, Activation::Relu, LayerRole::Decoder));
    }
    v.push(LayerSpec::new(outputs, Activation::Sigmoid, LayerRole::Output));
    v
}

fn validate(spec: &[LayerSpec]) -> Result<()> {
    let inputs = spec.iter().filter(|l| l.role == LayerRole::Input).count();
    let outputs = spec.iter().filter(|l| l.role == LayerRole::Output).count();
    if inputs != 1 || outputs != 1 {
        return Err(NeuralError::Architecture(format!(
            "need exactly one input and one output layer, found {inputs} and {outputs}"
        )));
    }
    if spec.first().map(|l| l.role) != Some(LayerRole::Input) || spec.last().map(|l| l.role) != Some(LayerRole::Output)
    {
        return Err(NeuralError::Architecture(
            "input must come first and output last".into(),
        ));
    }
    for (i, l) in spec.iter().enumerate() {
        if l.units == 0 {
            return Err(NeuralError::Architecture(format!("layer {i} has zero units")));
        }
        if l.role == LayerRole::Noise && l.units != spec[i - 1].units {
            return Err(NeuralError::Architecture(format!(
                "noise layer {i} has {} units but its input has {}",
                l.units,
                spec[i - 1].units
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_out × fan_in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m_w: Vec<Array2<f64>>,
    pub v_w: Vec<Array2<f64>>,
    pub m_b: Vec<Array1<f64>>,
    pub v_b: Vec<Array1<f64>>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<LayerSpec>,
    /// One entry per layer that carries weights, in layer order.
    pub dense: Vec<Dense>,
    pub noise_sigma: f64,
    /// Fixed random projection applied to raw features before the input layer.
    pub projection: Option<Array2<f64>>,
    pub adam: AdamState,
}

pub fn init_network(spec: &[LayerSpec], noise_sigma: f64, rng: &mut impl Rng) -> Result<MlpModel> {
    validate(spec)?;
    if !(noise_sigma >= 0.0) {
        return Err(NeuralError::Config(format!(
            "noise_sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let mut dense = Vec::new();
    let mut fan_in = spec[0].units;
    for l in &spec[1..] {
        if l.role == LayerRole::Noise {
            continue;
        }
        let scale = match l.activation {
            Activation::Relu => 2.0 / fan_in as f64,
            _ => 1.0 / fan_in as f64,
        };
        // uniform on [-a, a] has variance a²/3
        let a = (3.0 * scale).sqrt();
        let w = Array2::from_shape_fn((l.units, fan_in), |_| rng.random_range(-a..=a));
        dense.push(Dense {
            w,
            b: Array1::zeros(l.units),
        });
        fan_in = l.units;
    }
    let adam = zero_adam(&dense);
    Ok(MlpModel {
        layers: spec.to_vec(),
        dense,
        noise_sigma,
        projection: None,
        adam,
    })
}

fn zero_adam(dense: &[Dense]) -> AdamState {
    AdamState {
        m_w: dense.iter().map(|d| Array2::zeros(d.w.raw_dim())).collect(),
        v_w: dense.iter().map(|d| Array2::zeros(d.w.raw_dim())).collect(),
        m_b: dense.iter().map(|d| Array1::zeros(d.b.len())).collect(),
        v_b: dense.iter().map(|d| Array1::zeros(d.b.len())).collect(),
        step: 0,
    }
}

/// Gaussian projection with entries `N(0, 1/raw)`, seeded.
pub fn random_projection(raw: usize, out: usize, rng: &mut impl Rng) -> Array2<f64> {
    let s = 1.0 / (raw as f64).sqrt();
    Array2::from_shape_fn((out, raw), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * s
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn activate(a: Activation, x: &mut Array2<f64>) {
    match a {
        Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
        Activation::Sigmoid => x.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
        Activation::Linear => {}
    }
}

/// Derivative of the activation expressed through its output.
fn activation_grad(a: Activation, y: f64) -> f64 {
    match a {
        Activation::Relu => {
            if y > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Linear => 1.0,
    }
}

/// Parameter gradients, shaped like [`MlpModel::dense`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

impl MlpModel {
    pub fn input_units(&self) -> usize {
        self.layers[0].units
    }

    pub fn output_units(&self) -> usize {
        self.layers.last().unwrap().units
    }

    /// Raw feature length accepted by [`MlpModel::prepare`].
    pub fn feature_len(&self) -> usize {
        self.projection.as_ref().map_or(self.input_units(), |p| p.ncols())
    }

    /// Applies the fixed projection, if any, to a batch of raw features.
    pub fn prepare(&self, features: Array2<f64>) -> Array2<f64> {
        match &self.projection {
            Some(p) => features.dot(&p.t()),
            None => features,
        }
    }

    /// Batch forward pass (`x` is `batch × inputs`). Returns the activations
    /// of every layer, the input included.
    pub fn forward(&self, x: &Array2<f64>, mode: Mode, rng: &mut impl Rng) -> Result<Vec<Array2<f64>>> {
        if x.ncols() != self.input_units() {
            return Err(NeuralError::Config(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_units()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        let mut d = 0;
        for (i, l) in self.layers.iter().enumerate().skip(1) {
            let prev = &acts[i - 1];
            let next = if l.role == LayerRole::Noise {
                let mut y = prev.clone();
                if mode == Mode::Train && self.noise_sigma > 0.0 {
                    let s = self.noise_sigma;
                    y.mapv_inplace(|v| {
                        let z: f64 = StandardNormal.sample(rng);
                        v + s * z
                    });
                }
                y
            } else {
                let dense = &self.dense[d];
                d += 1;
                let mut y = prev.dot(&dense.w.t()) + &dense.b;
                activate(l.activation, &mut y);
                y
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(NeuralError::NonFiniteActivation { layer: i });
            }
            acts.push(next);
        }
        Ok(acts)
    }

    /// Output activations in inference mode for a single raw feature vector.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, features.len()), features.to_vec())
            .map_err(|e| NeuralError::Config(e.to_string()))?;
        let x = self.prepare(x);
        let mut unused = rng::stream(0, "infer", 0);
        let acts = self.forward(&x, Mode::Infer, &mut unused)?;
        Ok(acts.last().unwrap().row(0).to_vec())
    }

    /// Backpropagates `d_out` (gradient of the scalar loss with respect to
    /// the output activations, `batch × outputs`).
    pub fn backward(&self, acts: &[Array2<f64>], d_out: &Array2<f64>) -> Gradients {
        let mut gw = vec![Array2::zeros((0, 0)); self.dense.len()];
        let mut gb = vec![Array1::zeros(0); self.dense.len()];
        let mut delta = d_out.clone();
        let mut d = self.dense.len();
        for i in (1..self.layers.len()).rev() {
            let l = self.layers[i];
            if l.role == LayerRole::Noise {
                continue;
            }
            d -= 1;
            let y = &acts[i];
            let mut pre = delta;
            pre.zip_mut_with(y, |g, &yv| *g *= activation_grad(l.activation, yv));
            gw[d] = pre.t().dot(&acts[i - 1]);
            gb[d] = pre.sum_axis(Axis(0));
            delta = pre.dot(&self.dense[d].w);
        }
        Gradients { w: gw, b: gb }
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, g: &Gradients, lr: f64) -> Result<()> {
        if g.w.iter().any(|m| m.iter().any(|v| !v.is_finite())) || g.b.iter().any(|m| m.iter().any(|v| !v.is_finite()))
        {
            return Err(NeuralError::NonFiniteUpdate);
        }
        if self.adam.m_w.len() != self.dense.len() {
            self.adam = zero_adam(&self.dense);
        }
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, gv: f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gv;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        };
        for k in 0..self.dense.len() {
            ndarray::Zip::from(&mut self.dense[k].w)
                .and(&mut self.adam.m_w[k])
                .and(&mut self.adam.v_w[k])
                .and(&g.w[k])
                .for_each(|p, m, v, &gv| update(p, m, v, gv));
            ndarray::Zip::from(&mut self.dense[k].b)
                .and(&mut self.adam.m_b[k])
                .and(&mut self.adam.v_b[k])
                .and(&g.b[k])
                .for_each(|p, m, v, &gv| update(p, m, v, gv));
        }
        if self
            .dense
            .iter()
            .any(|d| d.w.iter().chain(d.b.iter()).any(|v| !v.is_finite()))
        {
            return Err(NeuralError::NonFiniteUpdate);
        }
        Ok(())
    }

    /// Real multiplications of one inference forward pass, projection included.
    pub fn real_mults_per_forward(&self) -> u64 {
        let proj = self.projection.as_ref().map_or(0, |p| (p.nrows() * p.ncols()) as u64);
        proj + self.dense.iter().map(|d| d.w.len() as u64).sum::<u64>()
    }

    /// Widths seen by the forward-pass multiplication count.
    pub fn dense_widths(&self) -> Vec<usize> {
        let mut v = Vec::new();
        if let Some(p) = &self.projection {
            v.push(p.ncols());
        }
        v.extend(
            self.layers
                .iter()
                .filter(|l| l.role != LayerRole::Noise)
                .map(|l| l.units),
        );
        v
    }
}

/// Flattened channel, row-major with real and imaginary parts interleaved.
pub fn channel_features(h: &ComplexMatrix) -> Vec<f64> {
    h.as_slice().iter().flat_map(|z| [z.re, z.im]).collect()
}

/// Analog matrix from sigmoid outputs: `F_A(i, j) = exp(j·2π·o[i·n_rf + j])`.
pub fn phases_to_analog(output: &[f64], n_t: usize, n_rf: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(n_t, n_rf, |i, j| {
        C64::from_polar(1.0, std::f64::consts::TAU * output[i * n_rf + j])
    })
}

/// Loss value, reconstructed precoder and gradient with respect to the
/// network outputs.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub loss: f64,
    pub precoder: HybridPrecoder,
    pub grad: Vec<f64>,
}

/// `‖F_opt − F_A·F_D‖_F` with `F_A` from the outputs and `F_D` the
/// power-normalised least-squares fit.
///
/// With `p = ‖P_A·F_opt‖²` (energy of the projection onto the span of
/// `F_A`) the loss equals `√(‖F_opt‖² + N_s − 2·√(N_s·p))`. The gradient of
/// `p` in the phases follows from the envelope theorem on the inner
/// least-squares problem: with residual `R` and unnormalised fit `X`,
/// `∂p/∂θ_ij = −2·Im(conj(G_ij)·F_A(i,j))` where `G = R·Xᴴ`.
pub fn reconstruction_loss_with_grad(
    output: &[f64],
    f_opt: &ComplexMatrix,
    n_rf: usize,
    counter: &mut MultiplicationCounter,
) -> Result<SampleLoss> {
    let (n_t, n_s) = f_opt.shape();
    if output.len() != n_t * n_rf {
        return Err(NeuralError::Config(format!(
            "output has {} units, need N_t·N_RF = {}",
            output.len(),
            n_t * n_rf
        )));
    }
    let f_a = phases_to_analog(output, n_t, n_rf);
    let (x, _) = counted_least_squares(&f_a, f_opt, counter)?;
    let proj = matmul_counted(&f_a, &x, counter)?;
    let p = proj.norm_sqr();
    if !(p > 1e-300) {
        // F_A orthogonal to the target: nothing to normalise, no descent direction
        let loss = f_opt.frobenius_norm();
        return Ok(SampleLoss {
            loss,
            precoder: HybridPrecoder {
                f_a,
                f_d: x,
                structure: AnalogStructure::FullyConnected,
            },
            grad: vec![0.0; output.len()],
        });
    }
    let scale = (n_s as f64 / p).sqrt();
    let f_d = x.scale_real(scale);
    let loss = (f_opt - &proj.scale_real(scale)).frobenius_norm();
    let mut grad = vec![0.0; output.len()];
    if loss > 1e-12 {
        let r = f_opt - &proj;
        let g = r.dot(&x.adjoint());
        let dl_dp = -(n_s as f64).sqrt() / (2.0 * loss * p.sqrt());
        for i in 0..n_t {
            for j in 0..n_rf {
                let dp = -2.0 * (g[(i, j)].conj() * f_a[(i, j)]).im;
                grad[i * n_rf + j] = dl_dp * dp * std::f64::consts::TAU;
            }
        }
    }
    Ok(SampleLoss {
        loss,
        precoder: HybridPrecoder {
            f_a,
            f_d,
            structure: AnalogStructure::FullyConnected,
        },
        grad,
    })
}

pub fn reconstruction_loss(output: &[f64], f_opt: &ComplexMatrix, n_rf: usize) -> Result<(f64, HybridPrecoder)> {
    let mut c = MultiplicationCounter::new();
    let s = reconstruction_loss_with_grad(output, f_opt, n_rf, &mut c)?;
    Ok((s.loss, s.precoder))
}

/// One supervised example: channel features and the optimal precoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: Vec<f64>,
    pub target: ComplexMatrix,
}

impl TrainingSample {
    pub fn from_channel(h: &ComplexMatrix, n_s: usize) -> Result<Self> {
        Ok(Self {
            features: channel_features(h),
            target: optimal_precoder(h, n_s)?.f_opt,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffled 80/10/10 partition; training and validation sizes are floors,
/// the test split takes the remainder.
pub fn split_dataset<T>(mut samples: Vec<T>, rng: &mut impl Rng) -> Result<DatasetSplit<T>> {
    let n = samples.len();
    if n < 10 {
        return Err(NeuralError::Config(format!("need at least 10 samples, got {n}")));
    }
    samples.shuffle(rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = samples.split_off(n_train + n_val);
    let validation = samples.split_off(n_train);
    Ok(DatasetSplit {
        train: samples,
        validation,
        test,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub n_rf: usize,
    /// Relative-error threshold for accuracy.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// Mean squared loss of the training set in inference mode after each epoch.
    pub epoch_mse: Vec<f64>,
    /// Mean squared loss of every mini-batch as it was trained on.
    pub batch_mse: Vec<f64>,
}

fn batch_matrix(samples: &[&TrainingSample]) -> Result<Array2<f64>> {
    let cols = samples[0].features.len();
    let mut data = Vec::with_capacity(samples.len() * cols);
    for s in samples {
        if s.features.len() != cols {
            return Err(NeuralError::Config("ragged feature vectors".into()));
        }
        data.extend_from_slice(&s.features);
    }
    Array2::from_shape_vec((samples.len(), cols), data).map_err(|e| NeuralError::Config(e.to_string()))
}

/// Per-sample losses and relative errors in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub losses: Vec<f64>,
    pub relative_errors: Vec<f64>,
}

impl Evaluation {
    pub fn mean_loss(&self) -> f64 {
        mean(&self.losses)
    }

    pub fn mse(&self) -> f64 {
        mean(&self.losses.iter().map(|l| l * l).collect::<Vec<_>>())
    }

    pub fn accuracy(&self, tau: f64) -> f64 {
        if self.relative_errors.is_empty() {
            return 0.0;
        }
        self.relative_errors.iter().filter(|&&e| e <= tau).count() as f64 / self.relative_errors.len() as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

const EVAL_CHUNK: usize = 512;

pub fn evaluate(model: &MlpModel, samples: &[TrainingSample], n_rf: usize) -> Result<Evaluation> {
    let mut losses = Vec::with_capacity(samples.len());
    let mut rel = Vec::with_capacity(samples.len());
    let mut unused = rng::stream(0, "infer", 0);
    let mut counter = MultiplicationCounter::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&TrainingSample> = chunk.iter().collect();
        let x = model.prepare(batch_matrix(&refs)?);
        let acts = model.forward(&x, Mode::Infer, &mut unused)?;
        let out = acts.last().unwrap();
        for (k, s) in chunk.iter().enumerate() {
            let o = out.row(k).to_vec();
            let l = reconstruction_loss_with_grad(&o, &s.target, n_rf, &mut counter)?.loss;
            losses.push(l);
            rel.push(l / s.target.frobenius_norm());
        }
    }
    Ok(Evaluation {
        losses,
        relative_errors: rel,
    })
}

/// Fraction of samples whose relative reconstruction error is at most `tau`.
pub fn accuracy(model: &MlpModel, samples: &[TrainingSample], n_rf: usize, tau: f64) -> Result<f64> {
    if !(tau > 0.0) && tau != 0.0 {
        return Err(NeuralError::Config(format!("tau must be non-negative, got {tau}")));
    }
    Ok(evaluate(model, samples, n_rf)?.accuracy(tau))
}

/// Mini-batch Adam on the mean per-sample loss. Shuffling and noise draws
/// come from streams keyed by `cfg.seed` and the epoch number.
pub fn train(model: &mut MlpModel, data: &DatasetSplit<TrainingSample>, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with_progress(model, data, cfg, |_, _| {})
}

pub fn train_with_progress(
    model: &mut MlpModel,
    data: &DatasetSplit<TrainingSample>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, &TrainHistory),
) -> Result<TrainHistory> {
    if data.train.is_empty() || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(NeuralError::Config(
            "need training samples, batch_size > 0 and lr > 0".into(),
        ));
    }
    if model.output_units() != data.train[0].target.rows() * cfg.n_rf {
        return Err(NeuralError::Config(format!(
            "network has {} outputs, N_t·N_RF = {}",
            model.output_units(),
            data.train[0].target.rows() * cfg.n_rf
        )));
    }
    let mut hist = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut counter = MultiplicationCounter::new();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng: SimRng = rng::stream(cfg.seed, "train-shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut noise_rng = rng::stream(cfg.seed, "train-noise", epoch as u64);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&TrainingSample> = idx.iter().map(|&i| &data.train[i]).collect();
            let x = model.prepare(batch_matrix(&refs)?);
            let acts = model
                .forward(&x, Mode::Train, &mut noise_rng)
                .map_err(|_| NeuralError::Divergence { epoch, batch: bi })?;
            let out = acts.last().unwrap();
            let nb = refs.len() as f64;
            let mut d_out = Array2::zeros(out.raw_dim());
            let mut sq = 0.0;
            for (k, s) in refs.iter().enumerate() {
                let o = out.row(k).to_vec();
                let sl = reconstruction_loss_with_grad(&o, &s.target, cfg.n_rf, &mut counter)?;
                if !sl.loss.is_finite() {
                    return Err(NeuralError::Divergence { epoch, batch: bi });
                }
                sq += sl.loss * sl.loss;
                for (j, g) in sl.grad.iter().enumerate() {
                    d_out[(k, j)] = g / nb;
                }
            }
            hist.batch_mse.push(sq / nb);
            let grads = model.backward(&acts, &d_out);
            model
                .adam_step(&grads, cfg.lr)
                .map_err(|_| NeuralError::Divergence { epoch, batch: bi })?;
        }
        let tr = evaluate(model, &data.train, cfg.n_rf)?;
        let va = evaluate(model, &data.validation, cfg.n_rf)?;
        let te = evaluate(model, &data.test, cfg.n_rf)?;
        hist.train_loss.push(tr.mean_loss());
        hist.val_loss.push(va.mean_loss());
        hist.test_loss.push(te.mean_loss());
        hist.train_accuracy.push(tr.accuracy(cfg.tau));
        hist.val_accuracy.push(va.accuracy(cfg.tau));
        hist.test_accuracy.push(te.accuracy(cfg.tau));
        hist.epoch_mse.push(tr.mse());
        progress(epoch, &hist);
    }
    Ok(hist)
}

/// Hybrid precoder for `h`: phases from the network, digital stage fit
/// against `target` (or, without one, against the leading right singular
/// vectors of `h`), power-normalised.
pub fn infer_precoder(
    model: &MlpModel,
    h: &ComplexMatrix,
    target: Option<&ComplexMatrix>,
    n_rf: usize,
    n_s: usize,
) -> Result<HybridPrecoder> {
    let mut c = MultiplicationCounter::new();
    infer_precoder_counted(model, h, target, n_rf, n_s, &mut c)
}

pub fn infer_precoder_counted(
    model: &MlpModel,
    h: &ComplexMatrix,
    target: Option<&ComplexMatrix>,
    n_rf: usize,
    n_s: usize,
    counter: &mut MultiplicationCounter,
) -> Result<HybridPrecoder> {
    let features = channel_features(h);
    if features.len() != model.feature_len() {
        return Err(NeuralError::Config(format!(
            "channel gives {} features, model expects {}",
            features.len(),
            model.feature_len()
        )));
    }
    if model.output_units() != h.cols() * n_rf {
        return Err(NeuralError::Config(format!(
            "model has {} outputs, N_t·N_RF = {}",
            model.output_units(),
            h.cols() * n_rf
        )));
    }
    let out = model.predict(&features)?;
    counter.add(model.real_mults_per_forward().div_ceil(4));
    let estimate;
    let t = match target {
        Some(t) => t,
        None => {
            estimate = optimal_precoder(h, n_s)?.f_opt;
            &estimate
        }
    };
    if t.cols() != n_s || t.rows() != h.cols() {
        return Err(NeuralError::Config(format!(
            "target is {:?}, expected ({}, {n_s})",
            t.shape(),
            h.cols()
        )));
    }
    let f_a = phases_to_analog(&out, h.cols(), n_rf);
    let (x, _) = counted_least_squares(&f_a, t, counter)?;
    let product = matmul_counted(&f_a, &x, counter)?;
    let norm = product.frobenius_norm();
    if !(norm > 0.0) {
        return Err(PrecoderError::Degenerate.into());
    }
    Ok(HybridPrecoder {
        f_a,
        f_d: x.scale_real((n_s as f64).sqrt() / norm),
        structure: AnalogStructure::FullyConnected,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HBFMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
        Activation::Linear => 2,
    }
}

fn role_tag(r: LayerRole) -> u8 {
    match r {
        LayerRole::Input => 0,
        LayerRole::Encoder => 1,
        LayerRole::Noise => 2,
        LayerRole::Decoder => 3,
        LayerRole::Output => 4,
    }
}

fn push_f64s<'a>(buf: &mut Vec<u8>, it: impl Iterator<Item = &'a f64>) {
    for v in it {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises layer specs, noise level, optional projection and all
/// weights/biases. Optimiser state is not stored.
pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for l in &model.layers {
        buf.extend_from_slice(&(l.units as u32).to_le_bytes());
        buf.push(activation_tag(l.activation));
        buf.push(role_tag(l.role));
    }
    buf.extend_from_slice(&model.noise_sigma.to_le_bytes());
    match &model.projection {
        Some(p) => {
            buf.push(1);
            buf.extend_from_slice(&(p.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(p.ncols() as u32).to_le_bytes());
            push_f64s(&mut buf, p.iter());
        }
        None => buf.push(0),
    }
    for d in &model.dense {
        push_f64s(&mut buf, d.w.iter());
        push_f64s(&mut buf, d.b.iter());
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|_| NeuralError::Checkpoint("truncated file".into()))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    let bytes = fs::read(path)?;
    let mut r = Reader(&bytes);
    if &r.bytes::<8>()? != CHECKPOINT_MAGIC {
        return Err(NeuralError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NeuralError::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let units = r.u32()? as usize;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Sigmoid,
            2 => Activation::Linear,
            t => return Err(NeuralError::Checkpoint(format!("unknown activation tag {t}"))),
        };
        let role = match r.u8()? {
            0 => LayerRole::Input,
            1 => LayerRole::Encoder,
            2 => LayerRole::Noise,
            3 => LayerRole::Decoder,
            4 => LayerRole::Output,
            t => return Err(NeuralError::Checkpoint(format!("unknown role tag {t}"))),
        };
        layers.push(LayerSpec {
            units,
            activation,
            role,
        });
    }
    validate(&layers)?;
    let noise_sigma = r.f64()?;
    let projection = match r.u8()? {
        0 => None,
        1 => {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            Some(Array2::from_shape_vec((rows, cols), r.f64s(rows * cols)?).unwrap())
        }
        t => return Err(NeuralError::Checkpoint(format!("bad projection flag {t}"))),
    };
    let mut dense = Vec::new();
    let mut fan_in = layers[0].units;
    for l in &layers[1..] {
        if l.role == LayerRole::Noise {
            continue;
        }
        let w = Array2::from_shape_vec((l.units, fan_in), r.f64s(l.units * fan_in)?).unwrap();
        let b = Array1::from_vec(r.f64s(l.units)?);
        dense.push(Dense { w, b });
        fan_in = l.units;
    }
    if !r.0.is_empty() {
        return Err(NeuralError::Checkpoint(format!("{} trailing bytes", r.0.len())));
    }
    let adam = zero_adam(&dense);
    Ok(MlpModel {
        layers,
        dense,
        noise_sigma,
        projection,
        adam,
    })
}
