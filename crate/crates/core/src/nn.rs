//! Dense backbone `f_θ1`, optional whitening `φ`, linear classifier `f_θ2`,
//! cross-entropy loss and SGD with momentum and weight decay.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::FeatureBatch;
use crate::error::{Error, Result};
use crate::whitening::{self, CovarianceDivisor, WhiteningConfig, WhiteningState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Tanh,
}

impl Activation {
    fn apply(self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Tanh => x.map(f64::tanh),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Relu => pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Tanh => pre.map(|v| 1.0 - v.tanh().powi(2)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhiteningSettings {
    pub enabled: bool,
    pub epsilon: f64,
    pub momentum: f64,
    pub divisor: CovarianceDivisor,
}

impl Default for WhiteningSettings {
    fn default() -> Self {
        let params = WhiteningConfig::default();
        Self {
            enabled: true,
            epsilon: params.epsilon,
            momentum: params.momentum,
            divisor: params.divisor,
        }
    }
}

impl WhiteningSettings {
    pub fn params(&self) -> WhiteningConfig {
        WhiteningConfig {
            epsilon: self.epsilon,
            momentum: self.momentum,
            divisor: self.divisor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Widths of the hidden layers before the feature layer.
    pub hidden: Vec<usize>,
    /// `C`, width of the last hidden layer fed to the classifier.
    pub feature_dim: usize,
    pub activation: Activation,
    pub whitening: WhiteningSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            feature_dim: 32,
            activation: Activation::Tanh,
            whitening: WhiteningSettings::default(),
        }
    }
}

/// Affine layer `y = W x + b`; the bias is kept as an `out × 1` matrix so all
/// parameters share one type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DMatrix<f64>,
}

impl Dense {
    fn init(inputs: usize, outputs: usize, bound: f64, bias_bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let weight = DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-bound..=bound));
        let bias = if bias_bound > 0.0 {
            DMatrix::from_fn(outputs, 1, |_, _| rng.random_range(-bias_bound..=bias_bound))
        } else {
            DMatrix::zeros(outputs, 1)
        };
        Self { weight, bias }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.weight * x;
        let b = self.bias.column(0);
        for mut col in y.column_iter_mut() {
            col += &b;
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub backbone: Vec<Dense>,
    pub activation: Activation,
    pub classifier: Dense,
    pub whitening: Option<WhiteningState>,
}

/// Intermediate values of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input of every backbone layer.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of every backbone layer.
    pre: Vec<DMatrix<f64>>,
    /// `Z`
    pub features: DMatrix<f64>,
    /// `Ẑ` (equal to `Z` without whitening).
    pub classifier_input: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

/// Gradients ordered like [`Model::params`].
pub type Gradients = Vec<DMatrix<f64>>;

impl Model {
    pub fn new(input_dim: usize, num_classes: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || config.feature_dim == 0 || config.hidden.contains(&0) {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![input_dim];
        widths.extend(&config.hidden);
        widths.push(config.feature_dim);
        let gain = match config.activation {
            Activation::Relu => 6.0f64,
            Activation::Tanh => 3.0,
        };
        let backbone = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], (gain / w[0] as f64).sqrt(), 0.0, &mut rng))
            .collect();
        let bound = 1.0 / (config.feature_dim as f64).sqrt();
        let classifier = Dense::init(config.feature_dim, num_classes, bound, bound, &mut rng);
        let whitening = if config.whitening.enabled {
            Some(WhiteningState::new(config.feature_dim, &config.whitening.params())?)
        } else {
            None
        };
        Ok(Self {
            backbone,
            activation: config.activation,
            classifier,
            whitening,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone
            .first()
            .map_or(self.classifier.weight.ncols(), |l| l.weight.ncols())
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.weight.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.weight.nrows()
    }

    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        self.backbone
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.backbone
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// `Z = f_θ1(X)` for a `D × B` input.
    pub fn extract_features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.backbone
            .iter()
            .fold(x.clone(), |h, layer| self.activation.apply(&layer.forward(&h)))
    }

    /// Training-mode forward pass. Refits the whitening statistics to this
    /// batch but does not touch the running averages.
    pub fn forward_train(&mut self, x: &DMatrix<f64>) -> Result<ForwardTrace> {
        let mut inputs = Vec::with_capacity(self.backbone.len());
        let mut pre = Vec::with_capacity(self.backbone.len());
        let mut h = x.clone();
        for layer in &self.backbone {
            let p = layer.forward(&h);
            inputs.push(h);
            h = self.activation.apply(&p);
            pre.push(p);
        }
        let features = h;
        let classifier_input = match &mut self.whitening {
            Some(state) => state
                .forward_train(&FeatureBatch::new(features.clone())?)?
                .into_matrix(),
            None => features.clone(),
        };
        let logits = self.classifier.forward(&classifier_input);
        Ok(ForwardTrace {
            inputs,
            pre,
            features,
            classifier_input,
            logits,
        })
    }

    /// Classifier input computed with batch statistics, leaving the model
    /// untouched.
    pub fn probe_classifier_input(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let z = self.extract_features(x);
        match &self.whitening {
            Some(state) => {
                let mut scratch = state.clone();
                Ok(scratch.forward_train(&FeatureBatch::new(z)?)?.into_matrix())
            }
            None => Ok(z),
        }
    }

    /// Inference-mode logits (running whitening statistics).
    pub fn predict_logits(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let z = self.extract_features(x);
        let zhat = match &self.whitening {
            Some(state) => whitening::zca_inference(&FeatureBatch::new(z)?, state)?.into_matrix(),
            None => z,
        };
        Ok(self.classifier.forward(&zhat))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        let logits = self.predict_logits(x)?;
        Ok(logits.column_iter().map(|c| c.argmax().0).collect())
    }

    /// Back-propagates `dL/dlogits` through a training trace.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &DMatrix<f64>) -> Result<(Gradients, usize)> {
        let mut grads: Vec<DMatrix<f64>> = Vec::with_capacity(2 * (self.backbone.len() + 1));
        let classifier_grads = [grad_logits * trace.classifier_input.transpose(), row_sums(grad_logits)];
        let grad_zhat = self.classifier.weight.transpose() * grad_logits;
        let (mut grad_h, degenerate) = match &self.whitening {
            Some(state) => {
                let g = whitening::zca_backward(
                    &FeatureBatch::from_matrix_unchecked(grad_zhat),
                    &FeatureBatch::from_matrix_unchecked(trace.features.clone()),
                    state,
                )?;
                (g.grad_input.into_matrix(), g.degenerate_pairs)
            }
            None => (grad_zhat, 0),
        };
        let mut layer_grads = Vec::with_capacity(self.backbone.len());
        for (i, layer) in self.backbone.iter().enumerate().rev() {
            let grad_pre = grad_h.component_mul(&self.activation.derivative(&trace.pre[i]));
            layer_grads.push([&grad_pre * trace.inputs[i].transpose(), row_sums(&grad_pre)]);
            if i > 0 {
                grad_h = layer.weight.transpose() * grad_pre;
            }
        }
        for [w, b] in layer_grads.into_iter().rev() {
            grads.push(w);
            grads.push(b);
        }
        grads.extend(classifier_grads);
        Ok((grads, degenerate))
    }
}

fn row_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s: DVector<f64> = m.column_sum();
    DMatrix::from_column_slice(s.len(), 1, s.as_slice())
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let b = logits.ncols();
    let mut grad = DMatrix::zeros(logits.nrows(), b);
    let mut loss = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let col = logits.column(j);
        let max = col.max();
        let exps = col.map(|v| (v - max).exp());
        let sum = exps.sum();
        loss += sum.ln() + max - col[y];
        for k in 0..col.len() {
            grad[(k, j)] = exps[k] / sum / b as f64;
        }
        grad[(y, j)] -= 1.0 / b as f64;
    }
    (loss / b as f64, grad)
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<DMatrix<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model
                .params()
                .iter()
                .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) {
        for ((param, grad), vel) in model.params_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            let d = grad + self.weight_decay * &*param;
            *vel = self.momentum * &*vel + d;
            *param -= lr * &*vel;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = DMatrix::zeros(4, 3);
        let (loss, grad) = cross_entropy(&logits, &[0, 1, 2]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        // each column sums to zero
        for c in grad.column_iter() {
            assert!(c.sum().abs() < 1e-15);
        }
    }

    #[test]
    fn parameter_layout() {
        let cfg = ModelConfig {
            hidden: vec![5],
            feature_dim: 3,
            ..Default::default()
        };
        let m = Model::new(4, 2, &cfg, 1).unwrap();
        let shapes: Vec<_> = m.params().iter().map(|p| p.shape()).collect();
        assert_eq!(shapes, vec![(5, 4), (5, 1), (3, 5), (3, 1), (2, 3), (2, 1)]);
        assert_eq!(m.input_dim(), 4);
        assert_eq!(m.feature_dim(), 3);
    }

    #[test]
    fn deterministic_init() {
        let cfg = ModelConfig::default();
        assert_eq!(Model::new(8, 3, &cfg, 9).unwrap(), Model::new(8, 3, &cfg, 9).unwrap());
        assert_ne!(Model::new(8, 3, &cfg, 9).unwrap(), Model::new(8, 3, &cfg, 10).unwrap());
    }

    #[test]
    fn sgd_zero_lr_keeps_params() {
        let cfg = ModelConfig {
            hidden: vec![4],
            feature_dim: 2,
            ..Default::default()
        };
        let mut m = Model::new(3, 2, &cfg, 1).unwrap();
        let before = m.clone();
        let grads: Gradients = m
            .params()
            .iter()
            .map(|p| DMatrix::from_element(p.nrows(), p.ncols(), 1.0))
            .collect();
        let mut opt = Sgd::new(&m, 0.9, 1e-4);
        opt.step(&mut m, &grads, 0.0);
        assert_eq!(m, before);
    }
}
