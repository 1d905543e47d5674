//! Float MLP flow estimator: ReLU hidden layers, identity output, trained with
//! mini-batch Adam on mean squared error over min-max normalized targets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Scaler};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("model", "all layer widths must be >= 1"));
        }
        Ok(())
    }

    /// `(n_in, n_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Fully connected layer; `weights` is row-major `n_out × n_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        DenseLayer {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.n_in..(j + 1) * self.n_in]
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|j| {
                self.row(j)
                    .iter()
                    .zip(x)
                    .fold(self.bias[j], |acc, (w, v)| acc + w * v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatMlp {
    pub spec: MlpSpec,
    pub scaler: Scaler,
    pub layers: Vec<DenseLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename = "float_mlp")]
struct FloatMlpFile {
    version: u32,
    #[serde(flatten)]
    model: FloatMlp,
}

const FILE_VERSION: u32 = 1;

/// Per-sample intermediate values needed for backpropagation.
struct Trace {
    /// Input to each layer (index 0 is the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

pub fn init_mlp(spec: &MlpSpec, seed: u64) -> Result<FloatMlp> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(n_in, n_out)| {
            let bound = (6.0 / n_in as f64).sqrt();
            DenseLayer {
                n_in,
                n_out,
                weights: (0..n_in * n_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect(),
                bias: vec![0.0; n_out],
            }
        })
        .collect();
    Ok(FloatMlp {
        spec: spec.clone(),
        scaler: Scaler::identity(spec.input_dim),
        layers,
    })
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

impl FloatMlp {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let dims = self.spec.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::config("layers", "layer count does not match spec"));
        }
        for (k, (layer, &(n_in, n_out))) in self.layers.iter().zip(&dims).enumerate() {
            if layer.n_in != n_in
                || layer.n_out != n_out
                || layer.weights.len() != n_in * n_out
                || layer.bias.len() != n_out
            {
                return Err(Error::config(
                    format!("layers[{k}]"),
                    "shape does not match spec",
                ));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::config(format!("layers[{k}]"), "non-finite parameter"));
            }
        }
        if self.scaler.features.len() != self.spec.input_dim {
            return Err(Error::config("scaler", "feature count does not match input_dim"));
        }
        self.scaler.validate()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::Argument(format!(
                "expected {} inputs, got {}",
                self.spec.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Normalized prediction for a normalized feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            a = layer.affine(&a);
            if k < last {
                a.iter_mut().for_each(|v| *v = relu(*v));
            }
        }
        a
    }

    /// Post-activation output of every layer; element 0 is the input itself.
    pub fn activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let t = self.trace(x);
        let mut out = t.inputs;
        let last = self.layers.len() - 1;
        out.push(t.pre[last].clone());
        Ok(out)
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let last = self.layers.len() - 1;
        let mut inputs = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&inputs[k]);
            if k < last {
                inputs.push(z.iter().map(|&v| relu(v)).collect());
            }
            pre.push(z);
        }
        Trace { inputs, pre }
    }

    /// Flow in m³/s for raw level readings.
    pub fn predict_flow(&self, levels_m: &[f64]) -> Result<f64> {
        let y = self.forward(&self.scaler.normalize_features(levels_m))?;
        Ok(self.scaler.denormalize_target(y[0]))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = FloatMlpFile {
            version: FILE_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FloatMlpFile = serde_json::from_str(text)?;
        if file.version != FILE_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported model file version {}", file.version),
            ));
        }
        file.model.validate()?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::artifact::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Gradients with the same layout as the model's layers.
#[derive(Debug, Clone)]
struct Grads {
    layers: Vec<DenseLayer>,
}

impl Grads {
    fn zeros_like(mlp: &FloatMlp) -> Self {
        Grads {
            layers: mlp
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.n_in, l.n_out))
                .collect(),
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Mean squared error over all outputs of all samples.
fn batch_loss(mlp: &FloatMlp, xs: &[&[f64]], ys: &[&[f64]]) -> f64 {
    let n = (xs.len() * mlp.spec.output_dim) as f64;
    xs.iter()
        .zip(ys)
        .map(|(x, y)| {
            mlp.forward_unchecked(x)
                .iter()
                .zip(y.iter())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

fn loss_and_grad(mlp: &FloatMlp, xs: &[&[f64]], ys: &[&[f64]]) -> (f64, Grads) {
    let n = (xs.len() * mlp.spec.output_dim) as f64;
    let mut grads = Grads::zeros_like(mlp);
    let mut loss = 0.0;
    let last = mlp.layers.len() - 1;
    for (x, y) in xs.iter().zip(ys) {
        let t = mlp.trace(x);
        let out = &t.pre[last];
        let mut delta: Vec<f64> = out
            .iter()
            .zip(y.iter())
            .map(|(p, target)| {
                loss += (p - target) * (p - target);
                2.0 * (p - target) / n
            })
            .collect();
        for k in (0..=last).rev() {
            let layer = &mlp.layers[k];
            let input = &t.inputs[k];
            let g = &mut grads.layers[k];
            for j in 0..layer.n_out {
                g.bias[j] += delta[j];
                let row = &mut g.weights[j * layer.n_in..(j + 1) * layer.n_in];
                for (gw, &a) in row.iter_mut().zip(input) {
                    *gw += delta[j] * a;
                }
            }
            if k > 0 {
                let below = &t.pre[k - 1];
                delta = (0..layer.n_in)
                    .map(|i| {
                        if below[i] <= 0.0 {
                            return 0.0;
                        }
                        (0..layer.n_out)
                            .map(|j| layer.weights[j * layer.n_in + i] * delta[j])
                            .sum()
                    })
                    .collect();
            }
        }
    }
    (loss / n, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be a finite value >= 0"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("train.beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("train.epsilon", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, mlp: &mut FloatMlp, grads: &Grads, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let params = mlp
            .layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()));
        let gs = grads.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias));
        for (((p, g), m), v) in params.zip(gs).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Trains `mlp` and returns the parameters with the lowest validation loss
/// (training loss when `val` is empty) together with the per-epoch history.
pub fn train(
    mlp: &FloatMlp,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(FloatMlp, Vec<EpochLoss>)> {
    cfg.validate()?;
    mlp.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if train_set.n_features() != mlp.spec.input_dim {
        return Err(Error::Argument(format!(
            "dataset has {} features, model expects {}",
            train_set.n_features(),
            mlp.spec.input_dim
        )));
    }
    let scaler = train_set.scaler()?.clone();
    let (tx, ty) = train_set.normalized_with(&scaler);
    let (vx, vy) = val_set.normalized_with(&scaler);
    let ty: Vec<[f64; 1]> = ty.into_iter().map(|t| [t]).collect();
    let vy: Vec<[f64; 1]> = vy.into_iter().map(|t| [t]).collect();
    let mut model = mlp.clone();
    model.scaler = scaler;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.n_params());
    let mut order: Vec<usize> = (0..tx.len()).collect();

    let all_tx: Vec<&[f64]> = tx.iter().map(Vec::as_slice).collect();
    let all_ty: Vec<&[f64]> = ty.iter().map(|t| t.as_slice()).collect();
    let all_vx: Vec<&[f64]> = vx.iter().map(Vec::as_slice).collect();
    let all_vy: Vec<&[f64]> = vy.iter().map(|t| t.as_slice()).collect();

    let mut best: Option<(f64, FloatMlp)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let bx: Vec<&[f64]> = batch.iter().map(|&i| all_tx[i]).collect();
            let by: Vec<&[f64]> = batch.iter().map(|&i| all_ty[i]).collect();
            let (_, grads) = loss_and_grad(&model, &bx, &by);
            adam.update(&mut model, &grads, cfg);
        }
        let train_mse = batch_loss(&model, &all_tx, &all_ty);
        let val_mse = if all_vx.is_empty() {
            train_mse
        } else {
            batch_loss(&model, &all_vx, &all_vy)
        };
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("non-finite loss (train {train_mse}, val {val_mse})"),
            });
        }
        history.push(EpochLoss {
            epoch,
            train_mse,
            val_mse,
        });
        if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
            best = Some((val_mse, model.clone()));
        }
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok((best_model, history))
}

/// Pre-activations closer than this to the ReLU kink are nudged away before
/// a finite-difference check.
pub const KINK_GUARD: f64 = 1e-6;
const KINK_NUDGE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// Maximum relative error between backpropagated and central-difference
/// gradients of the batch MSE, over every parameter.
pub fn gradient_check(mlp: &FloatMlp, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::Argument("gradient check needs a non-empty batch".into()));
    }
    for (x, y) in xs.iter().zip(ys) {
        mlp.check_input(x)?;
        if y.len() != mlp.spec.output_dim {
            return Err(Error::Argument("target width does not match output_dim".into()));
        }
    }
    let bx: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let by: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();

    let mut model = mlp.clone();
    let last = model.layers.len() - 1;
    for _ in 0..32 {
        let mut nudged = false;
        for x in &bx {
            let t = model.trace(x);
            for k in 0..last {
                for (j, z) in t.pre[k].iter().enumerate() {
                    if z.abs() < KINK_GUARD {
                        model.layers[k].bias[j] += KINK_NUDGE;
                        nudged = true;
                    }
                }
            }
        }
        if !nudged {
            break;
        }
    }

    let analytic = loss_and_grad(&model, &bx, &by).1.flatten();
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..model.layers.len() {
        let n_w = model.layers[k].weights.len();
        let n_b = model.layers[k].bias.len();
        for p in 0..n_w + n_b {
            let probe = |delta: f64| {
                let mut m = model.clone();
                let l = &mut m.layers[k];
                if p < n_w {
                    l.weights[p] += delta;
                } else {
                    l.bias[p - n_w] += delta;
                }
                batch_loss(&m, &bx, &by)
            };
            numeric.push((probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP));
        }
    }
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

/// Regression metrics on denormalized flow (m³/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub mape_percent: f64,
    pub r2: f64,
}

impl Metrics {
    pub fn from_predictions(pred: &[f64], target: &[f64]) -> Result<Self> {
        if pred.is_empty() || pred.len() != target.len() {
            return Err(Error::Argument(
                "metrics need equally sized, non-empty prediction and target sets".into(),
            ));
        }
        if target.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Argument("MAPE needs strictly positive targets".into()));
        }
        let n = pred.len() as f64;
        let mean = target.iter().sum::<f64>() / n;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        let mut abs = 0.0;
        let mut pct = 0.0;
        for (&p, &t) in pred.iter().zip(target) {
            let e = p - t;
            ss_res += e * e;
            ss_tot += (t - mean) * (t - mean);
            abs += e.abs();
            pct += (e / t).abs();
        }
        if ss_tot == 0.0 {
            return Err(Error::Degenerate(
                "targets have zero variance; r2 is undefined".into(),
            ));
        }
        Ok(Metrics {
            mse: ss_res / n,
            mae: abs / n,
            mape_percent: 100.0 * pct / n,
            r2: 1.0 - ss_res / ss_tot,
        })
    }

    /// MAPE-based accuracy in percent (100 − MAPE).
    pub fn accuracy_percent(&self) -> f64 {
        100.0 - self.mape_percent
    }
}

pub fn evaluate(mlp: &FloatMlp, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let pred = dataset
        .samples
        .iter()
        .map(|s| mlp.predict_flow(&s.levels_m))
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_predictions(&pred, &dataset.targets())
}
