//! Small self-contained classifiers trained with minibatch SGD.
//!
//! Tensor names are fixed: `w0`, `b0` for the first layer and `w1`, `b1` for
//! the output layer of the MLP. Matrices are stored `[fan_in, fan_out]`
//! row-major. All arithmetic is f64 regardless of the storage dtype.

use thiserror::Error;

use crate::data::LocalDataset;
use crate::rng::SeededRng;
use crate::tensor::{DType, Tensor, TensorData, Weights};

const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("model expects {expected} features, data has {actual}")]
    FeatureMismatch { expected: usize, actual: usize },
    #[error("model has {expected} classes, data has {actual}")]
    ClassMismatch { expected: usize, actual: usize },
    #[error("weights do not match the architecture: {0}")]
    LayoutMismatch(String),
    #[error("dataset is empty")]
    EmptyData,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Logistic {
        num_features: usize,
        num_classes: usize,
    },
    Mlp {
        num_features: usize,
        hidden: usize,
        num_classes: usize,
    },
}

impl Architecture {
    pub fn num_features(&self) -> usize {
        match *self {
            Architecture::Logistic { num_features, .. } | Architecture::Mlp { num_features, .. } => {
                num_features
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            Architecture::Logistic { num_classes, .. } | Architecture::Mlp { num_classes, .. } => {
                num_classes
            }
        }
    }

    /// `(name, shape)` per tensor, in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Architecture::Logistic {
                num_features,
                num_classes,
            } => vec![
                ("w0", vec![num_features, num_classes]),
                ("b0", vec![num_classes]),
            ],
            Architecture::Mlp {
                num_features,
                hidden,
                num_classes,
            } => vec![
                ("w0", vec![num_features, hidden]),
                ("b0", vec![hidden]),
                ("w1", vec![hidden, num_classes]),
                ("b1", vec![num_classes]),
            ],
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Architecture plus its parameters, one flat buffer per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: Vec<Vec<f64>>,
}

impl Model {
    /// Matrices uniform in (-0.05, 0.05) under `seed`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let params = arch
            .layout()
            .iter()
            .map(|(name, shape)| {
                let n = shape.iter().product::<usize>();
                if name.starts_with('w') {
                    (0..n).map(|_| rng.uniform(-INIT_RANGE, INIT_RANGE)).collect()
                } else {
                    vec![0.0; n]
                }
            })
            .collect();
        Self { arch, params }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let params = arch
            .layout()
            .iter()
            .map(|(_, s)| vec![0.0; s.iter().product()])
            .collect();
        Self { arch, params }
    }

    pub fn from_weights(arch: Architecture, weights: &Weights) -> Result<Self, TrainError> {
        let layout = arch.layout();
        if weights.len() != layout.len() {
            return Err(TrainError::LayoutMismatch(format!(
                "expected {} tensors, got {}",
                layout.len(),
                weights.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for ((name, shape), t) in layout.iter().zip(weights.tensors()) {
            if t.name() != *name || t.shape() != shape.as_slice() {
                return Err(TrainError::LayoutMismatch(format!(
                    "expected `{name}` {shape:?}, got `{}` {:?}",
                    t.name(),
                    t.shape()
                )));
            }
            params.push(t.data().to_f64_vec());
        }
        Ok(Self { arch, params })
    }

    /// Weights in f64.
    pub fn to_weights(&self) -> Weights {
        self.to_weights_as(None)
    }

    /// Weights using the dtypes of `like` (tensor by tensor), or f64.
    pub fn to_weights_as(&self, like: Option<&Weights>) -> Weights {
        let tensors = self
            .arch
            .layout()
            .into_iter()
            .zip(&self.params)
            .enumerate()
            .map(|(i, ((name, shape), p))| {
                let dtype = like
                    .and_then(|w| w.tensors().get(i))
                    .map_or(DType::F64, Tensor::dtype);
                let data = match dtype {
                    DType::F64 => TensorData::F64(p.clone()),
                    DType::F32 => TensorData::F32(p.iter().map(|&x| x as f32).collect()),
                };
                Tensor::new(name, shape, data).expect("layout matches params")
            })
            .collect();
        Weights::new(tensors).expect("layout names are distinct")
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    fn check_data(&self, data: &LocalDataset) -> Result<(), TrainError> {
        if data.num_features() != self.arch.num_features() {
            return Err(TrainError::FeatureMismatch {
                expected: self.arch.num_features(),
                actual: data.num_features(),
            });
        }
        if data.num_classes() > self.arch.num_classes() {
            return Err(TrainError::ClassMismatch {
                expected: self.arch.num_classes(),
                actual: data.num_classes(),
            });
        }
        Ok(())
    }

    /// Class probabilities for one input row.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut logits = self.forward(x, None);
        softmax_in_place(&mut logits);
        logits
    }

    /// Output logits; stores the hidden activations in `hidden` for the MLP.
    fn forward(&self, x: &[f64], hidden: Option<&mut Vec<f64>>) -> Vec<f64> {
        match self.arch {
            Architecture::Logistic { num_classes, .. } => {
                affine(x, &self.params[0], &self.params[1], num_classes)
            }
            Architecture::Mlp {
                hidden: h,
                num_classes,
                ..
            } => {
                let mut a = affine(x, &self.params[0], &self.params[1], h);
                a.iter_mut().for_each(|v| *v = v.tanh());
                let out = affine(&a, &self.params[2], &self.params[3], num_classes);
                if let Some(slot) = hidden {
                    *slot = a;
                }
                out
            }
        }
    }

    /// Mean cross-entropy over `batch` plus `(mu/2)·‖w − reference‖²`.
    pub fn objective(&self, data: &LocalDataset, batch: &[usize], prox: Option<&Proximal<'_>>) -> f64 {
        let mut loss = 0.0;
        for &i in batch {
            let logits = self.forward(data.row(i), None);
            loss += cross_entropy(&logits, data.label(i) as usize);
        }
        loss /= batch.len() as f64;
        if let Some(p) = prox {
            loss += p.penalty(&self.params);
        }
        loss
    }

    /// Objective gradient. Returns `(data loss, gradient)`; the reported loss
    /// excludes the proximal penalty.
    pub fn gradient(
        &self,
        data: &LocalDataset,
        batch: &[usize],
        prox: Option<&Proximal<'_>>,
    ) -> (f64, Vec<Vec<f64>>) {
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        let mut hidden = Vec::new();
        for &i in batch {
            let x = data.row(i);
            let y = data.label(i) as usize;
            let mut probs = self.forward(x, Some(&mut hidden));
            loss += cross_entropy(&probs, y);
            softmax_in_place(&mut probs);
            // d(loss)/d(logits) = p - onehot(y)
            probs[y] -= 1.0;
            let dz = probs;
            match self.arch {
                Architecture::Logistic { .. } => {
                    outer_accumulate(&mut grads[0], x, &dz, scale);
                    axpy(&mut grads[1], &dz, scale);
                }
                Architecture::Mlp { hidden: h, .. } => {
                    outer_accumulate(&mut grads[2], &hidden, &dz, scale);
                    axpy(&mut grads[3], &dz, scale);
                    let w1 = &self.params[2];
                    let k = dz.len();
                    let dpre: Vec<f64> = (0..h)
                        .map(|j| {
                            let da: f64 = (0..k).map(|c| w1[j * k + c] * dz[c]).sum();
                            da * (1.0 - hidden[j] * hidden[j])
                        })
                        .collect();
                    outer_accumulate(&mut grads[0], x, &dpre, scale);
                    axpy(&mut grads[1], &dpre, scale);
                }
            }
        }
        if let Some(p) = prox {
            p.add_gradient(&self.params, &mut grads);
        }
        (loss * scale, grads)
    }
}

/// The `(mu/2)·‖w − reference‖²` term pulling local weights toward the
/// global model.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub mu: f64,
    pub reference: &'a [Vec<f64>],
}

impl Proximal<'_> {
    pub fn penalty(&self, params: &[Vec<f64>]) -> f64 {
        let sq: f64 = params
            .iter()
            .zip(self.reference)
            .flat_map(|(p, r)| p.iter().zip(r).map(|(a, b)| (a - b) * (a - b)))
            .sum();
        0.5 * self.mu * sq
    }

    pub fn add_gradient(&self, params: &[Vec<f64>], grads: &mut [Vec<f64>]) {
        for ((g, p), r) in grads.iter_mut().zip(params).zip(self.reference) {
            for ((gi, pi), ri) in g.iter_mut().zip(p).zip(r) {
                *gi += self.mu * (pi - ri);
            }
        }
    }
}

fn affine(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let mut z = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * out..(i + 1) * out];
        for (zj, wj) in z.iter_mut().zip(row) {
            *zj += xi * wj;
        }
    }
    z
}

fn outer_accumulate(g: &mut [f64], a: &[f64], b: &[f64], scale: f64) {
    let n = b.len();
    for (i, &ai) in a.iter().enumerate() {
        let s = ai * scale;
        for (gij, bj) in g[i * n..(i + 1) * n].iter_mut().zip(b) {
            *gij += s * bj;
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    log_sum_exp(logits) - logits[y]
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub proximal_mu: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 0.1,
            proximal_mu: 0.0,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Minibatch SGD on cross-entropy, plus the proximal term toward
/// `global_ref` when `proximal_mu > 0`.
///
/// Each epoch shuffles example indices with a generator seeded from
/// `cfg.seed` and walks them in `batch_size` chunks (the last chunk may be
/// short). Returns the mean per-example data loss of the final epoch,
/// measured on each batch before its update.
pub fn sgd_fit(
    model: &mut Model,
    data: &LocalDataset,
    cfg: &SgdConfig,
    global_ref: Option<&Model>,
) -> Result<f64, TrainError> {
    model.check_data(data)?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if cfg.epochs == 0 {
        return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(TrainError::InvalidConfig("learning rate must be positive".into()));
    }
    if !(cfg.proximal_mu >= 0.0 && cfg.proximal_mu.is_finite()) {
        return Err(TrainError::InvalidConfig("proximal_mu must be non-negative".into()));
    }
    let reference: Option<Vec<Vec<f64>>> = match global_ref {
        Some(g) if cfg.proximal_mu > 0.0 => {
            if g.arch != model.arch {
                return Err(TrainError::LayoutMismatch(
                    "proximal reference has a different architecture".into(),
                ));
            }
            Some(g.params.clone())
        }
        _ => None,
    };
    let prox = reference.as_deref().map(|r| Proximal {
        mu: cfg.proximal_mu,
        reference: r,
    });

    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = 0.0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = model.gradient(data, batch, prox.as_ref());
            epoch_loss += loss * batch.len() as f64;
            for (p, g) in model.params.iter_mut().zip(&grads) {
                axpy(p, g, -cfg.learning_rate);
            }
        }
        epoch_loss /= data.len() as f64;
    }
    Ok(epoch_loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub num_examples: usize,
}

/// Mean cross-entropy and top-1 accuracy (ties go to the lowest class id).
pub fn evaluate_model(model: &Model, data: &LocalDataset) -> Result<Evaluation, TrainError> {
    model.check_data(data)?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let logits = model.forward(data.row(i), None);
        let y = data.label(i) as usize;
        loss += cross_entropy(&logits, y);
        let pred = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &v)| {
                if v > best.1 {
                    (c, v)
                } else {
                    best
                }
            })
            .0;
        correct += usize::from(pred == y);
    }
    let n = data.len();
    Ok(Evaluation {
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
        num_examples: n,
    })
}
