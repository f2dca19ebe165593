//! Round policies: who trains, with which settings, and how results merge.
//!
//! Built-ins: [`FedAvg`], [`FaultTolerantFedAvg`], [`FedProx`], [`QFedAvg`]
//! and [`FedFs`]. All aggregation runs in F64 and sums results in ascending
//! client-id order, so the outcome does not depend on arrival order.

use std::sync::Arc;

use log::warn;
use thiserror::Error;

use crate::protocol::ConfigMap;
use crate::rng::SeededRng;
use crate::server::{ClientHandle, ClientManager, ServerError};
use crate::tensor::Weights;

/// Lower clip applied to client losses before raising them to `q`.
pub const QFFL_LOSS_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error("no results to aggregate")]
    Empty,
    #[error("result {index} does not match the model layout")]
    ShapeMismatch { index: usize },
    #[error("results carry zero examples in total")]
    ZeroExamples,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid strategy setting `{key}`: {reason}")]
pub struct StrategyConfigError {
    pub key: &'static str,
    pub reason: String,
}

fn bad(key: &'static str, reason: impl Into<String>) -> StrategyConfigError {
    StrategyConfigError {
        key,
        reason: reason.into(),
    }
}

/// One selected client and the config its instruction carries. The weights
/// sent are always the current global model.
#[derive(Debug, Clone)]
pub struct Instruction {
    pub client: Arc<ClientHandle>,
    pub config: ConfigMap,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub client: String,
    pub weights: Weights,
    pub num_examples: u64,
    pub metrics: ConfigMap,
}

#[derive(Debug, Clone)]
pub struct EvaluateResult {
    pub client: String,
    pub loss: f64,
    pub num_examples: u64,
    pub metrics: ConfigMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub client: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluateAggregate {
    pub loss: f64,
    /// Example-weighted `accuracy` metric, if any client reported one.
    pub accuracy: Option<f64>,
}

pub trait Strategy: Send {
    fn name(&self) -> &'static str;

    fn configure_fit(
        &mut self,
        round: u64,
        global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError>;

    fn configure_evaluate(
        &mut self,
        round: u64,
        global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError>;

    /// `Ok(None)` keeps the current global model.
    fn aggregate_fit(
        &mut self,
        round: u64,
        global: &Weights,
        results: &[FitResult],
        failures: &[Failure],
    ) -> Result<Option<Weights>, AggregationError>;

    fn aggregate_evaluate(
        &mut self,
        round: u64,
        results: &[EvaluateResult],
        failures: &[Failure],
    ) -> Option<EvaluateAggregate>;

    /// Warnings raised since the last call (e.g. results excluded from
    /// aggregation).
    fn take_warnings(&mut self) -> usize {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedAvgConfig {
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Clients asked to evaluate each round; 0 skips distributed evaluation.
    pub eval_clients: usize,
}

impl FedAvgConfig {
    pub fn new(clients_per_round: usize, local_epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            clients_per_round,
            local_epochs,
            learning_rate,
            seed,
            eval_clients: clients_per_round,
        }
    }

    pub fn validate(&self) -> Result<(), StrategyConfigError> {
        if self.clients_per_round == 0 {
            return Err(bad("clients_per_round", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(bad("local_epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }

    /// `epochs`, `lr` and `round`.
    pub fn fit_config(&self, round: u64) -> ConfigMap {
        ConfigMap::new()
            .with("epochs", self.local_epochs as i64)
            .with("lr", self.learning_rate)
            .with("round", round as i64)
    }

    pub fn evaluate_config(&self, round: u64) -> ConfigMap {
        ConfigMap::new().with("round", round as i64)
    }

    /// Sampling stream for `round`; fit and evaluation draw independently.
    pub fn round_rng(&self, round: u64, evaluate: bool) -> SeededRng {
        SeededRng::derive(self.seed, round * 2 + u64::from(evaluate))
    }
}

/// Uniformly samples `cfg.clients_per_round` clients and gives each the same
/// fit config.
pub fn default_configure_fit(
    cfg: &FedAvgConfig,
    round: u64,
    mgr: &ClientManager,
    config: ConfigMap,
) -> Result<Vec<Instruction>, ServerError> {
    let mut rng = cfg.round_rng(round, false);
    Ok(mgr
        .sample(cfg.clients_per_round, &mut rng)?
        .into_iter()
        .map(|client| Instruction {
            client,
            config: config.clone(),
        })
        .collect())
}

pub fn default_configure_evaluate(
    cfg: &FedAvgConfig,
    round: u64,
    mgr: &ClientManager,
) -> Result<Vec<Instruction>, ServerError> {
    if cfg.eval_clients == 0 {
        return Ok(Vec::new());
    }
    let mut rng = cfg.round_rng(round, true);
    let config = cfg.evaluate_config(round);
    Ok(mgr
        .sample(cfg.eval_clients, &mut rng)?
        .into_iter()
        .map(|client| Instruction {
            client,
            config: config.clone(),
        })
        .collect())
}

/// Per-element `Σ n_k·w_k / Σ n_k`, summed in slice order. The output keeps
/// the first result's dtypes.
pub fn fedavg_aggregate(results: &[(&Weights, u64)]) -> Result<Weights, AggregationError> {
    let (first, _) = results.first().ok_or(AggregationError::Empty)?;
    let mut acc = vec![0.0f64; first.num_elements()];
    let mut total = 0.0f64;
    for (index, (w, n)) in results.iter().enumerate() {
        if !w.same_layout(first) {
            return Err(AggregationError::ShapeMismatch { index });
        }
        let n = *n as f64;
        total += n;
        let mut i = 0;
        for t in w.tensors() {
            let data = t.data();
            for j in 0..data.len() {
                acc[i] += n * data.get_f64(j);
                i += 1;
            }
        }
    }
    if total == 0.0 {
        return Err(AggregationError::ZeroExamples);
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(first.with_flat_values(&acc))
}

/// `None` when fewer than `min_completion` results came back.
pub fn fault_tolerant_aggregate(
    results: &[(&Weights, u64)],
    min_completion: usize,
) -> Result<Option<Weights>, AggregationError> {
    if results.len() < min_completion {
        return Ok(None);
    }
    fedavg_aggregate(results).map(Some)
}

/// q-fair update. Each result is `(w_k, n_k, F_k)` with `F_k` the client's
/// training loss:
///
/// ```text
/// Δ_k = L·(global − w_k)
/// h_k = q·F_k^(q−1)·‖Δ_k‖² + L·F_k^q
/// new = global − Σ F_k^q·Δ_k / Σ h_k
/// ```
pub fn qfedavg_aggregate(
    global: &Weights,
    results: &[(&Weights, u64, f64)],
    q: f64,
    lipschitz: f64,
) -> Result<Weights, AggregationError> {
    if results.is_empty() {
        return Err(AggregationError::Empty);
    }
    let g = global.flatten_f64();
    let mut num = vec![0.0f64; g.len()];
    let mut den = 0.0f64;
    let mut delta = vec![0.0f64; g.len()];
    for (index, (w, _, loss)) in results.iter().enumerate() {
        if !w.same_layout(global) {
            return Err(AggregationError::ShapeMismatch { index });
        }
        let f = loss.max(QFFL_LOSS_FLOOR);
        let fq = f.powf(q);
        let mut norm_sq = 0.0;
        let mut i = 0;
        for t in w.tensors() {
            let data = t.data();
            for j in 0..data.len() {
                let d = lipschitz * (g[i] - data.get_f64(j));
                delta[i] = d;
                norm_sq += d * d;
                i += 1;
            }
        }
        let h = if q == 0.0 {
            lipschitz * fq
        } else {
            q * f.powf(q - 1.0) * norm_sq + lipschitz * fq
        };
        den += h;
        for (n, d) in num.iter_mut().zip(&delta) {
            *n += fq * d;
        }
    }
    let new: Vec<f64> = g.iter().zip(&num).map(|(gi, n)| gi - n / den).collect();
    Ok(global.with_flat_values(&new))
}

fn sorted_by_client<T>(items: &[T], key: impl Fn(&T) -> &str) -> Vec<&T> {
    let mut v: Vec<&T> = items.iter().collect();
    v.sort_by(|a, b| key(a).cmp(key(b)));
    v
}

fn weighted_pairs(results: &[FitResult]) -> Vec<(&Weights, u64)> {
    sorted_by_client(results, |r| &r.client)
        .into_iter()
        .map(|r| (&r.weights, r.num_examples))
        .collect()
}

/// Example-weighted loss and accuracy.
pub fn weighted_evaluate(results: &[EvaluateResult]) -> Option<EvaluateAggregate> {
    let sorted = sorted_by_client(results, |r| &r.client);
    let total: f64 = sorted.iter().map(|r| r.num_examples as f64).sum();
    if total == 0.0 {
        return None;
    }
    let loss = sorted
        .iter()
        .map(|r| r.num_examples as f64 * r.loss)
        .sum::<f64>()
        / total;
    let with_acc: Vec<(f64, f64)> = sorted
        .iter()
        .filter_map(|r| r.metrics.get_f64("accuracy").map(|a| (r.num_examples as f64, a)))
        .collect();
    let acc_total: f64 = with_acc.iter().map(|(n, _)| n).sum();
    let accuracy =
        (acc_total > 0.0).then(|| with_acc.iter().map(|(n, a)| n * a).sum::<f64>() / acc_total);
    Some(EvaluateAggregate { loss, accuracy })
}

#[derive(Debug, Clone)]
pub struct FedAvg {
    pub config: FedAvgConfig,
}

impl FedAvg {
    pub fn new(config: FedAvgConfig) -> Result<Self, StrategyConfigError> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl Strategy for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn configure_fit(
        &mut self,
        round: u64,
        _global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError> {
        default_configure_fit(&self.config, round, mgr, self.config.fit_config(round))
    }

    fn configure_evaluate(
        &mut self,
        round: u64,
        _global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError> {
        default_configure_evaluate(&self.config, round, mgr)
    }

    fn aggregate_fit(
        &mut self,
        _round: u64,
        _global: &Weights,
        results: &[FitResult],
        _failures: &[Failure],
    ) -> Result<Option<Weights>, AggregationError> {
        if results.is_empty() {
            return Ok(None);
        }
        fedavg_aggregate(&weighted_pairs(results)).map(Some)
    }

    fn aggregate_evaluate(
        &mut self,
        _round: u64,
        results: &[EvaluateResult],
        _failures: &[Failure],
    ) -> Option<EvaluateAggregate> {
        weighted_evaluate(results)
    }
}

/// FedAvg that only replaces the model when at least `min_completion`
/// selected clients succeed.
#[derive(Debug, Clone)]
pub struct FaultTolerantFedAvg {
    pub base: FedAvg,
    pub min_completion: usize,
}

impl FaultTolerantFedAvg {
    pub fn new(config: FedAvgConfig, min_completion: usize) -> Result<Self, StrategyConfigError> {
        config.validate()?;
        if min_completion == 0 || min_completion > config.clients_per_round {
            return Err(bad(
                "min_completion",
                format!(
                    "must be between 1 and clients_per_round ({}), got {min_completion}",
                    config.clients_per_round
                ),
            ));
        }
        Ok(Self {
            base: FedAvg { config },
            min_completion,
        })
    }
}

impl Strategy for FaultTolerantFedAvg {
    fn name(&self) -> &'static str {
        "fault_tolerant_fedavg"
    }

    fn configure_fit(
        &mut self,
        round: u64,
        global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError> {
        self.base.configure_fit(round, global, mgr)
    }

    fn configure_evaluate(
        &mut self,
        round: u64,
        global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError> {
        self.base.configure_evaluate(round, global, mgr)
    }

    fn aggregate_fit(
        &mut self,
        _round: u64,
        _global: &Weights,
        results: &[FitResult],
        _failures: &[Failure],
    ) -> Result<Option<Weights>, AggregationError> {
        fault_tolerant_aggregate(&weighted_pairs(results), self.min_completion)
    }

    fn aggregate_evaluate(
        &mut self,
        round: u64,
        results: &[EvaluateResult],
        failures: &[Failure],
    ) -> Option<EvaluateAggregate> {
        self.base.aggregate_evaluate(round, results, failures)
    }
}

/// FedAvg on the server; clients add `mu/2·‖w − global‖²` to their
/// objective, driven by the `proximal_mu` fit config key.
#[derive(Debug, Clone)]
pub struct FedProx {
    pub base: FedAvg,
    pub mu: f64,
}

impl FedProx {
    pub fn new(config: FedAvgConfig, mu: f64) -> Result<Self, StrategyConfigError> {
        config.validate()?;
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(bad("mu", format!("must be non-negative, got {mu}")));
        }
        Ok(Self {
            base: FedAvg { config },
            mu,
        })
    }
}

impl Strategy for FedProx {
    fn name(&self) -> &'static str {
        "fedprox"
    }

    fn configure_fit(
        &mut self,
        round: u64,
        _global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError> {
        let cfg = &self.base.config;
        let config = cfg.fit_config(round).with("proximal_mu", self.mu);
        default_configure_fit(cfg, round, mgr, config)
    }

    fn configure_evaluate(
        &mut self,
        round: u64,
        global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError> {
        self.base.configure_evaluate(round, global, mgr)
    }

    fn aggregate_fit(
        &mut self,
        round: u64,
        global: &Weights,
        results: &[FitResult],
        failures: &[Failure],
    ) -> Result<Option<Weights>, AggregationError> {
        self.base.aggregate_fit(round, global, results, failures)
    }

    fn aggregate_evaluate(
        &mut self,
        round: u64,
        results: &[EvaluateResult],
        failures: &[Failure],
    ) -> Option<EvaluateAggregate> {
        self.base.aggregate_evaluate(round, results, failures)
    }
}

/// q-fair federated averaging. Clients must report `train_loss`; results
/// without it are left out and counted as warnings.
#[derive(Debug, Clone)]
pub struct QFedAvg {
    pub base: FedAvg,
    pub q: f64,
    pub lipschitz: f64,
    warnings: usize,
}

impl QFedAvg {
    pub fn new(config: FedAvgConfig, q: f64, lipschitz: f64) -> Result<Self, StrategyConfigError> {
        config.validate()?;
        if !(q >= 0.0 && q.is_finite()) {
            return Err(bad("q", format!("must be non-negative, got {q}")));
        }
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(bad("lipschitz", format!("must be positive, got {lipschitz}")));
        }
        Ok(Self {
            base: FedAvg { config },
            q,
            lipschitz,
            warnings: 0,
        })
    }
}

impl Strategy for QFedAvg {
    fn name(&self) -> &'static str {
        "qfedavg"
    }

    fn configure_fit(
        &mut self,
        round: u64,
        global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError> {
        self.base.configure_fit(round, global, mgr)
    }

    fn configure_evaluate(
        &mut self,
        round: u64,
        global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError> {
        self.base.configure_evaluate(round, global, mgr)
    }

    fn aggregate_fit(
        &mut self,
        round: u64,
        global: &Weights,
        results: &[FitResult],
        _failures: &[Failure],
    ) -> Result<Option<Weights>, AggregationError> {
        let mut usable = Vec::with_capacity(results.len());
        for r in sorted_by_client(results, |r| &r.client) {
            match r.metrics.get_f64("train_loss") {
                Some(loss) if loss.is_finite() => usable.push((&r.weights, r.num_examples, loss)),
                _ => {
                    warn!("round {round}: {} sent no usable train_loss, skipped", r.client);
                    self.warnings += 1;
                }
            }
        }
        if usable.is_empty() {
            return Ok(None);
        }
        qfedavg_aggregate(global, &usable, self.q, self.lipschitz).map(Some)
    }

    fn aggregate_evaluate(
        &mut self,
        round: u64,
        results: &[EvaluateResult],
        failures: &[Failure],
    ) -> Option<EvaluateAggregate> {
        self.base.aggregate_evaluate(round, results, failures)
    }

    fn take_warnings(&mut self) -> usize {
        std::mem::take(&mut self.warnings)
    }
}

/// Straggler-aware selection. This is an interpretation of a scheduler the
/// source describes only by intent:
///
/// 1. Rank connected clients by the mean duration of their last
///    `window` fit attempts; clients with no history count as fastest.
///    Ties keep a seeded random order.
/// 2. Take the fastest `⌈fast_fraction·C⌉`, then fill up to `C` with a
///    uniform draw from the rest.
/// 3. Selected clients that have history and sit outside the fast group get
///    `max(1, round(E·slow_epoch_scale))` epochs.
///
/// Aggregation is plain FedAvg. With no history anywhere the selection equals
/// [`FedAvg`]'s.
#[derive(Debug, Clone)]
pub struct FedFs {
    pub base: FedAvg,
    pub fast_fraction: f64,
    pub slow_epoch_scale: f64,
    pub window: usize,
}

impl FedFs {
    pub fn new(
        config: FedAvgConfig,
        fast_fraction: f64,
        slow_epoch_scale: f64,
    ) -> Result<Self, StrategyConfigError> {
        config.validate()?;
        if !(fast_fraction > 0.0 && fast_fraction <= 1.0) {
            return Err(bad("fast_fraction", format!("must be in (0, 1], got {fast_fraction}")));
        }
        if !(slow_epoch_scale > 0.0 && slow_epoch_scale <= 1.0) {
            return Err(bad(
                "slow_epoch_scale",
                format!("must be in (0, 1], got {slow_epoch_scale}"),
            ));
        }
        Ok(Self {
            base: FedAvg { config },
            fast_fraction,
            slow_epoch_scale,
            window: 3,
        })
    }

    pub fn slow_epochs(&self) -> usize {
        ((self.base.config.local_epochs as f64 * self.slow_epoch_scale).round() as usize).max(1)
    }

    pub fn fast_count(&self) -> usize {
        let c = self.base.config.clients_per_round;
        ((self.fast_fraction * c as f64).ceil() as usize).clamp(1, c)
    }
}

impl Strategy for FedFs {
    fn name(&self) -> &'static str {
        "fedfs"
    }

    fn configure_fit(
        &mut self,
        round: u64,
        _global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError> {
        let cfg = &self.base.config;
        let c = cfg.clients_per_round;
        // Same permutation the default sampler would draw from.
        let mut shuffled = mgr.wait_for(c)?;
        cfg.round_rng(round, false).shuffle(&mut shuffled);
        let scores: Vec<Option<f64>> = shuffled
            .iter()
            .map(|h| h.mean_fit_duration(self.window))
            .collect();
        let mut order: Vec<usize> = (0..shuffled.len()).collect();
        order.sort_by(|&a, &b| {
            let sa = scores[a].unwrap_or(f64::NEG_INFINITY);
            let sb = scores[b].unwrap_or(f64::NEG_INFINITY);
            sa.total_cmp(&sb)
        });
        let n_fast = self.fast_count();
        let mut picked: Vec<usize> = order[..n_fast].to_vec();
        let mut rest: Vec<usize> = order[n_fast..].to_vec();
        // `rest` back in shuffled order, so the fill is a uniform draw.
        rest.sort_unstable();
        picked.extend(rest.into_iter().take(c - n_fast));

        let fast: std::collections::HashSet<usize> = order[..n_fast].iter().copied().collect();
        let slow_epochs = self.slow_epochs() as i64;
        Ok(picked
            .into_iter()
            .map(|i| {
                let mut config = cfg.fit_config(round);
                if !fast.contains(&i) && scores[i].is_some() {
                    config.insert("epochs", slow_epochs);
                }
                Instruction {
                    client: Arc::clone(&shuffled[i]),
                    config,
                }
            })
            .collect())
    }

    fn configure_evaluate(
        &mut self,
        round: u64,
        global: &Weights,
        mgr: &ClientManager,
    ) -> Result<Vec<Instruction>, ServerError> {
        self.base.configure_evaluate(round, global, mgr)
    }

    fn aggregate_fit(
        &mut self,
        round: u64,
        global: &Weights,
        results: &[FitResult],
        failures: &[Failure],
    ) -> Result<Option<Weights>, AggregationError> {
        self.base.aggregate_fit(round, global, results, failures)
    }

    fn aggregate_evaluate(
        &mut self,
        round: u64,
        results: &[EvaluateResult],
        failures: &[Failure],
    ) -> Option<EvaluateAggregate> {
        self.base.aggregate_evaluate(round, results, failures)
    }
}

/// Strategy choice with its specific parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrategySpec {
    FedAvg,
    FaultTolerant { min_completion: usize },
    FedProx { mu: f64 },
    QFedAvg { q: f64, lipschitz: f64 },
    FedFs { fast_fraction: f64, slow_epoch_scale: f64 },
}

pub fn build_strategy(
    spec: StrategySpec,
    config: FedAvgConfig,
) -> Result<Box<dyn Strategy>, StrategyConfigError> {
    Ok(match spec {
        StrategySpec::FedAvg => Box::new(FedAvg::new(config)?),
        StrategySpec::FaultTolerant { min_completion } => {
            Box::new(FaultTolerantFedAvg::new(config, min_completion)?)
        }
        StrategySpec::FedProx { mu } => Box::new(FedProx::new(config, mu)?),
        StrategySpec::QFedAvg { q, lipschitz } => Box::new(QFedAvg::new(config, q, lipschitz)?),
        StrategySpec::FedFs {
            fast_fraction,
            slow_epoch_scale,
        } => Box::new(FedFs::new(config, fast_fraction, slow_epoch_scale)?),
    })
}
