//! Analytic traffic per training round, without training.

use fedrs::protocol::encoded_len;
use fedrs::tensor::weights_byte_size;
use fedrs::{ConfigMap, DType, Message, Tensor, Weights};

use crate::config::{DTypeName, ExperimentConfig};
use crate::experiment::initial_weights;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRow {
    pub sampling_rate: f64,
    pub clients: usize,
    pub bytes_per_round: u64,
}

/// Metrics a trainer client attaches to every `FitRes`.
pub fn trainer_fit_metrics() -> ConfigMap {
    ConfigMap::new()
        .with("train_loss", 0.0)
        .with("fit_duration_s", 0.0)
}

/// Fit traffic for one round: each of `clients` receives a `FitIns` and
/// answers with a `FitRes`, i.e. `2 × clients × weights_byte_size` plus
/// headers, config and metrics.
pub fn fit_round_bytes(weights: &Weights, clients: usize, config: &ConfigMap, metrics: &ConfigMap) -> u64 {
    let payload = weights_byte_size(weights) as u64;
    let empty = weights_byte_size(&Weights::empty()) as u64;
    let ins = encoded_len(&Message::FitIns {
        weights: Weights::empty(),
        config: config.clone(),
    }) as u64
        - empty
        + payload;
    let res = encoded_len(&Message::FitRes {
        weights: Weights::empty(),
        num_examples: 0,
        metrics: metrics.clone(),
    }) as u64
        - empty
        + payload;
    clients as u64 * (ins + res)
}

/// The model `replay-bytes` accounts for: the `[replay]` dummy tensor when
/// configured, otherwise the trainer's initial weights.
pub fn replay_weights(cfg: &ExperimentConfig) -> Weights {
    match &cfg.replay {
        Some(r) => {
            let dtype = match r.dtype {
                DTypeName::F32 => DType::F32,
                DTypeName::F64 => DType::F64,
            };
            Weights::new(vec![Tensor::zeros("dummy", vec![r.elements], dtype)]).expect("one tensor")
        }
        None => {
            let arch = cfg.architecture(cfg.data.num_features, cfg.data.num_classes);
            initial_weights(cfg, arch)
        }
    }
}

/// One row per sampling rate 0.1, 0.2, …, 1.0 of `num_clients`.
pub fn replay_bytes(cfg: &ExperimentConfig) -> Vec<ReplayRow> {
    let weights = replay_weights(cfg);
    let config = cfg.fedavg_config().fit_config(cfg.rounds);
    let metrics = trainer_fit_metrics();
    (1..=10)
        .map(|tenths| {
            let rate = tenths as f64 / 10.0;
            let clients = ((rate * cfg.num_clients as f64).round() as usize).max(1);
            ReplayRow {
                sampling_rate: rate,
                clients,
                bytes_per_round: fit_round_bytes(&weights, clients, &config, &metrics),
            }
        })
        .collect()
}
