//! The round engine.
//!
//! Each round: the strategy picks clients and configs, every selected client
//! gets its instruction concurrently, replies and failures are collected, and
//! the strategy aggregates. Client failures are recorded, never raised.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use thiserror::Error;

use crate::protocol::{ConfigMap, Message};
use crate::rng::SeededRng;
use crate::strategy::{EvaluateResult, Failure, FitResult, Instruction, Strategy};
use crate::tensor::Weights;
use crate::transport::{AcceptedClient, Connection, OnConnect};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServerError {
    #[error("needed {wanted} connected clients, only {available} available")]
    InsufficientClients { wanted: usize, available: usize },
    #[error("invalid server setting: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Fit,
    Evaluate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Success,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub round: u64,
    pub phase: Phase,
    pub duration: Duration,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub outcome: Outcome,
}

/// A registered client. The history only grows.
#[derive(Debug)]
pub struct ClientHandle {
    id: String,
    capabilities: ConfigMap,
    connection: Connection,
    history: Mutex<Vec<HistoryEntry>>,
}

impl ClientHandle {
    pub fn new(id: impl Into<String>, capabilities: ConfigMap, connection: Connection) -> Self {
        Self {
            id: id.into(),
            capabilities,
            connection,
            history: Mutex::new(Vec::new()),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn capabilities(&self) -> &ConfigMap {
        &self.capabilities
    }

    pub fn connection(&self) -> &Connection {
        &self.connection
    }

    pub fn history(&self) -> Vec<HistoryEntry> {
        self.history.lock().unwrap().clone()
    }

    pub fn record(&self, entry: HistoryEntry) {
        self.history.lock().unwrap().push(entry);
    }

    /// Mean duration in seconds of the last `window` fit attempts.
    pub fn mean_fit_duration(&self, window: usize) -> Option<f64> {
        let history = self.history.lock().unwrap();
        let recent: Vec<f64> = history
            .iter()
            .rev()
            .filter(|e| e.phase == Phase::Fit)
            .take(window.max(1))
            .map(|e| e.duration.as_secs_f64())
            .collect();
        (!recent.is_empty()).then(|| recent.iter().sum::<f64>() / recent.len() as f64)
    }
}

/// Thread-safe registry of connected clients, keyed by id.
#[derive(Debug)]
pub struct ClientManager {
    clients: Mutex<BTreeMap<String, Arc<ClientHandle>>>,
    changed: Condvar,
    sample_wait: Duration,
}

impl ClientManager {
    /// `sample_wait` bounds how long sampling waits for enough clients.
    pub fn new(sample_wait: Duration) -> Self {
        Self {
            clients: Mutex::new(BTreeMap::new()),
            changed: Condvar::new(),
            sample_wait,
        }
    }

    /// Adds a client. An existing client with the same id is evicted and its
    /// connection closed.
    pub fn register(&self, handle: ClientHandle) -> Arc<ClientHandle> {
        let handle = Arc::new(handle);
        let old = self
            .clients
            .lock()
            .unwrap()
            .insert(handle.id.clone(), Arc::clone(&handle));
        if let Some(old) = old {
            info!("client {} re-registered, evicting previous connection", old.id);
            old.connection.close();
        }
        self.changed.notify_all();
        handle
    }

    /// Removes and disconnects a client; unknown ids are ignored.
    pub fn unregister(&self, id: &str) {
        let old = self.clients.lock().unwrap().remove(id);
        if let Some(old) = old {
            old.connection.close();
            self.changed.notify_all();
        }
    }

    /// Callback registering every client accepted by a transport server.
    pub fn on_connect(self: &Arc<Self>) -> OnConnect {
        let mgr = Arc::clone(self);
        Arc::new(move |c: AcceptedClient| {
            mgr.register(ClientHandle::new(c.name, c.capabilities, c.connection));
        })
    }

    pub fn get(&self, id: &str) -> Option<Arc<ClientHandle>> {
        self.clients.lock().unwrap().get(id).cloned()
    }

    fn live(map: &mut BTreeMap<String, Arc<ClientHandle>>) -> Vec<Arc<ClientHandle>> {
        map.retain(|_, h| !h.connection.is_closed());
        map.values().cloned().collect()
    }

    /// Open clients, sorted by id.
    pub fn connected(&self) -> Vec<Arc<ClientHandle>> {
        Self::live(&mut self.clients.lock().unwrap())
    }

    pub fn len(&self) -> usize {
        self.connected().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Waits until at least `k` clients are connected and returns all of
    /// them sorted by id.
    pub fn wait_for(&self, k: usize) -> Result<Vec<Arc<ClientHandle>>, ServerError> {
        self.wait_for_within(k, self.sample_wait)
    }

    pub fn wait_for_within(
        &self,
        k: usize,
        wait: Duration,
    ) -> Result<Vec<Arc<ClientHandle>>, ServerError> {
        let deadline = Instant::now() + wait;
        let mut map = self.clients.lock().unwrap();
        loop {
            let live = Self::live(&mut map);
            if live.len() >= k {
                return Ok(live);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(ServerError::InsufficientClients {
                    wanted: k,
                    available: live.len(),
                });
            }
            // Closed connections do not notify, so re-check periodically.
            let slice = (deadline - now).min(Duration::from_millis(50));
            map = self.changed.wait_timeout(map, slice).unwrap().0;
        }
    }

    /// `k` distinct connected clients, a seeded uniform draw: the id-sorted
    /// registry is shuffled with `rng` and truncated.
    pub fn sample(&self, k: usize, rng: &mut SeededRng) -> Result<Vec<Arc<ClientHandle>>, ServerError> {
        if k == 0 {
            return Err(ServerError::InvalidConfig("sample size must be at least 1".into()));
        }
        let mut all = self.wait_for(k)?;
        rng.shuffle(&mut all);
        all.truncate(k);
        Ok(all)
    }

    /// Closes every connection and empties the registry.
    pub fn clear(&self) {
        let old = std::mem::take(&mut *self.clients.lock().unwrap());
        for h in old.values() {
            h.connection.close();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub num_rounds: u64,
    /// Per-request reply deadline; a client exceeding it counts as failed.
    pub read_timeout: Duration,
    /// Clients that must be connected before the first round starts.
    pub min_available_clients: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            num_rounds: 1,
            read_timeout: Duration::from_secs(600),
            min_available_clients: 1,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        if self.num_rounds == 0 {
            return Err(ServerError::InvalidConfig("num_rounds must be at least 1".into()));
        }
        if self.read_timeout.is_zero() {
            return Err(ServerError::InvalidConfig("read_timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub num_selected: usize,
    pub num_success: usize,
    pub num_failures: usize,
    /// Whether aggregation replaced the global model.
    pub model_updated: bool,
    /// Mean pairwise L2 distance between successful client models.
    pub update_divergence: Option<f64>,
    pub eval_selected: usize,
    pub eval_success: usize,
    /// Evaluation was attempted but produced no result.
    pub eval_failed: bool,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub centralized_loss: Option<f64>,
    pub centralized_accuracy: Option<f64>,
    pub warnings: usize,
    pub bytes_fit: u64,
    pub bytes_evaluate: u64,
    pub bytes_total: u64,
    pub wall_time: Duration,
}

impl RoundRecord {
    fn new(round: u64) -> Self {
        Self {
            round,
            num_selected: 0,
            num_success: 0,
            num_failures: 0,
            model_updated: false,
            update_divergence: None,
            eval_selected: 0,
            eval_success: 0,
            eval_failed: false,
            eval_loss: None,
            eval_accuracy: None,
            centralized_loss: None,
            centralized_accuracy: None,
            warnings: 0,
            bytes_fit: 0,
            bytes_evaluate: 0,
            bytes_total: 0,
            wall_time: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitRound {
    /// `None` when the strategy kept the current model.
    pub weights: Option<Weights>,
    pub num_selected: usize,
    pub num_success: usize,
    pub num_failures: usize,
    pub bytes: u64,
    pub update_divergence: Option<f64>,
    pub warnings: usize,
}

#[derive(Debug, Clone)]
pub struct EvaluateRound {
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub num_selected: usize,
    pub num_success: usize,
    pub bytes: u64,
}

struct Reply<T> {
    client: String,
    bytes: u64,
    result: Result<T, String>,
}

/// Sends one instruction per selected client in parallel and collects the
/// parsed replies, sorted by client id.
fn dispatch<T: Send>(
    instructions: &[Instruction],
    global: &Weights,
    round: u64,
    phase: Phase,
    timeout: Duration,
    parse: impl Fn(Message) -> Result<T, String> + Sync,
) -> Vec<Reply<T>> {
    let parse = &parse;
    let mut replies: Vec<Reply<T>> = thread::scope(|s| {
        let workers: Vec<_> = instructions
            .iter()
            .map(|ins| {
                s.spawn(move || {
                    let msg = match phase {
                        Phase::Fit => Message::FitIns {
                            weights: global.clone(),
                            config: ins.config.clone(),
                        },
                        Phase::Evaluate => Message::EvaluateIns {
                            weights: global.clone(),
                            config: ins.config.clone(),
                        },
                    };
                    let started = Instant::now();
                    let (bytes, reply) = ins.client.connection().exchange(&msg, timeout);
                    let duration = started.elapsed();
                    let result = reply.map_err(|e| e.to_string()).and_then(parse);
                    ins.client.record(HistoryEntry {
                        round,
                        phase,
                        duration,
                        bytes_up: bytes.up,
                        bytes_down: bytes.down,
                        outcome: match &result {
                            Ok(_) => Outcome::Success,
                            Err(e) => Outcome::Failed(e.clone()),
                        },
                    });
                    Reply {
                        client: ins.client.id().to_owned(),
                        bytes: bytes.total(),
                        result,
                    }
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().expect("dispatch worker panicked")).collect()
    });
    replies.sort_by(|a, b| a.client.cmp(&b.client));
    replies
}

/// Mean pairwise Euclidean distance; `None` for fewer than two models.
pub fn mean_pairwise_distance(models: &[Vec<f64>]) -> Option<f64> {
    if models.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let d: f64 = models[i]
                .iter()
                .zip(&models[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sum += d.sqrt();
            pairs += 1;
        }
    }
    Some(sum / pairs as f64)
}

pub fn fit_round(
    strategy: &mut dyn Strategy,
    mgr: &ClientManager,
    global: &Weights,
    round: u64,
    timeout: Duration,
) -> Result<FitRound, ServerError> {
    let instructions = strategy.configure_fit(round, global, mgr)?;
    let replies = dispatch(&instructions, global, round, Phase::Fit, timeout, |m| match m {
        Message::FitRes {
            weights,
            num_examples,
            metrics,
        } => {
            if weights.same_layout(global) {
                Ok((weights, num_examples, metrics))
            } else {
                Err("returned weights do not match the model layout".into())
            }
        }
        other => Err(format!("unexpected {:?}", other.message_type())),
    });

    let mut bytes = 0;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for r in replies {
        bytes += r.bytes;
        match r.result {
            Ok((weights, num_examples, metrics)) => results.push(FitResult {
                client: r.client,
                weights,
                num_examples,
                metrics,
            }),
            Err(reason) => {
                warn!("round {round}: fit on {} failed: {reason}", r.client);
                failures.push(Failure {
                    client: r.client,
                    reason,
                })
            }
        }
    }

    let flat: Vec<Vec<f64>> = results.iter().map(|r| r.weights.flatten_f64()).collect();
    let update_divergence = mean_pairwise_distance(&flat);
    drop(flat);

    let mut warnings = 0;
    let weights = match strategy.aggregate_fit(round, global, &results, &failures) {
        Ok(w) => w,
        Err(e) => {
            warn!("round {round}: aggregation failed, keeping model: {e}");
            warnings += 1;
            None
        }
    };
    warnings += strategy.take_warnings();
    Ok(FitRound {
        weights,
        num_selected: instructions.len(),
        num_success: results.len(),
        num_failures: failures.len(),
        bytes,
        update_divergence,
        warnings,
    })
}

pub fn evaluate_round(
    strategy: &mut dyn Strategy,
    mgr: &ClientManager,
    global: &Weights,
    round: u64,
    timeout: Duration,
) -> Result<EvaluateRound, ServerError> {
    let instructions = strategy.configure_evaluate(round, global, mgr)?;
    let replies = dispatch(&instructions, global, round, Phase::Evaluate, timeout, |m| match m {
        Message::EvaluateRes {
            loss,
            num_examples,
            metrics,
        } => Ok((loss, num_examples, metrics)),
        other => Err(format!("unexpected {:?}", other.message_type())),
    });
    let mut bytes = 0;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for r in replies {
        bytes += r.bytes;
        match r.result {
            Ok((loss, num_examples, metrics)) => results.push(EvaluateResult {
                client: r.client,
                loss,
                num_examples,
                metrics,
            }),
            Err(reason) => failures.push(Failure {
                client: r.client,
                reason,
            }),
        }
    }
    let agg = if instructions.is_empty() {
        None
    } else {
        strategy.aggregate_evaluate(round, &results, &failures)
    };
    Ok(EvaluateRound {
        loss: agg.map(|a| a.loss),
        accuracy: agg.and_then(|a| a.accuracy),
        num_selected: instructions.len(),
        num_success: results.len(),
        bytes,
    })
}

/// Optional server-side evaluation of the global model: `(loss, accuracy)`.
pub type CentralizedEval<'a> = &'a mut dyn FnMut(&Weights) -> (f64, f64);

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_weights: Weights,
    /// Set when the run stopped early; `records` holds the finished rounds.
    pub error: Option<ServerError>,
}

/// Runs `config.num_rounds` rounds of fit then evaluate, starting from
/// `initial`. Rounds are numbered from 1.
pub fn run(
    strategy: &mut dyn Strategy,
    mgr: &ClientManager,
    config: &ServerConfig,
    initial: Weights,
    mut centralized_eval: Option<CentralizedEval<'_>>,
) -> RunOutput {
    let mut out = RunOutput {
        records: Vec::new(),
        final_weights: initial,
        error: None,
    };
    if let Err(e) = config.validate() {
        out.error = Some(e);
        return out;
    }
    if let Err(e) = mgr.wait_for(config.min_available_clients) {
        out.error = Some(e);
        return out;
    }
    for round in 1..=config.num_rounds {
        let started = Instant::now();
        let mut rec = RoundRecord::new(round);
        let fit = match fit_round(strategy, mgr, &out.final_weights, round, config.read_timeout) {
            Ok(f) => f,
            Err(e) => {
                warn!("round {round}: {e}");
                out.error = Some(e);
                return out;
            }
        };
        rec.num_selected = fit.num_selected;
        rec.num_success = fit.num_success;
        rec.num_failures = fit.num_failures;
        rec.update_divergence = fit.update_divergence;
        rec.warnings = fit.warnings;
        rec.bytes_fit = fit.bytes;
        if let Some(w) = fit.weights {
            rec.model_updated = true;
            out.final_weights = w;
        }

        match evaluate_round(strategy, mgr, &out.final_weights, round, config.read_timeout) {
            Ok(ev) => {
                rec.eval_selected = ev.num_selected;
                rec.eval_success = ev.num_success;
                rec.eval_failed = ev.num_selected > 0 && ev.loss.is_none();
                rec.eval_loss = ev.loss;
                rec.eval_accuracy = ev.accuracy;
                rec.bytes_evaluate = ev.bytes;
            }
            Err(e) => {
                warn!("round {round}: evaluation skipped: {e}");
                rec.eval_failed = true;
            }
        }
        if let Some(eval) = centralized_eval.as_mut() {
            let (loss, acc) = eval(&out.final_weights);
            rec.centralized_loss = Some(loss);
            rec.centralized_accuracy = Some(acc);
        }
        rec.bytes_total = rec.bytes_fit + rec.bytes_evaluate;
        rec.wall_time = started.elapsed();
        info!(
            "round {round}: {}/{} fit ok, updated={}, eval loss={:?} acc={:?}, {} bytes, {:.3}s",
            rec.num_success,
            rec.num_selected,
            rec.model_updated,
            rec.eval_loss,
            rec.eval_accuracy,
            rec.bytes_total,
            rec.wall_time.as_secs_f64()
        );
        out.records.push(rec);
    }
    out
}
