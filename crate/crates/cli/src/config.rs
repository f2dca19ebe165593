//! Experiment configuration file (TOML).
//!
//! ```toml
//! seed = 42
//! rounds = 20
//! num_clients = 100
//!
//! [strategy]
//! name = "fedavg"            # fedavg | fault_tolerant | fedprox | qfedavg | fedfs
//! clients_per_round = 10
//! local_epochs = 5
//! learning_rate = 0.1
//!
//! [data]
//! num_examples = 10000
//! num_features = 20
//! num_classes = 10
//! class_separation = 6.0
//! iid_fraction = 1.0
//!
//! [[links]]
//! clients = [3]
//! bandwidth_mbps = 20.0
//!
//! [[failures]]
//! client = 2
//! round = 4
//! mode = "error"             # error | abort | stall
//! ```
//!
//! Every section except `[strategy]` is optional. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fedrs::model::Architecture;
use fedrs::sim::{ComputeProfile, LinkProfile};
use fedrs::strategy::{FedAvgConfig, StrategySpec};
use fedrs::SeededRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_owned(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub rounds: u64,
    pub num_clients: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub strategy: StrategySection,
    #[serde(default)]
    pub client: ClientSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkAssignment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub compute: Vec<ComputeAssignment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FailureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<ReplaySection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Fedavg,
    FaultTolerant,
    Fedprox,
    Qfedavg,
    Fedfs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    pub name: StrategyName,
    pub clients_per_round: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Defaults to `clients_per_round`; 0 turns distributed evaluation off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_clients: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_completion: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fast_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slow_epoch_scale: Option<f64>,
}

fn one() -> usize {
    1
}

fn default_lr() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSection {
    pub model: ModelKind,
    pub hidden: usize,
    pub batch_size: usize,
    /// Share of each client's partition held out for evaluation.
    pub test_fraction: f64,
}

impl Default for ClientSection {
    fn default() -> Self {
        Self {
            model: ModelKind::Logistic,
            hidden: 16,
            batch_size: 32,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Read examples from this CSV (features..., label) instead of
    /// generating blobs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    pub num_examples: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub class_separation: f64,
    pub iid_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            csv: None,
            num_examples: 10_000,
            num_features: 20,
            num_classes: 10,
            class_separation: 6.0,
            iid_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    /// Listen address for `server`, dial address for `client`.
    pub address: String,
    pub read_timeout_s: f64,
    /// How long a round waits for enough clients to be connected.
    pub sample_wait_s: f64,
    /// Clients required before round 1; defaults to `num_clients`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_available_clients: Option<usize>,
    /// Evaluate the global model on the pooled client test splits.
    pub centralized_eval: bool,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            address: "127.0.0.1:8080".into(),
            read_timeout_s: 600.0,
            sample_wait_s: 30.0,
            min_available_clients: None,
            centralized_eval: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkAssignment {
    pub clients: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_mbps: Option<f64>,
    #[serde(default)]
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeAssignment {
    pub clients: Vec<usize>,
    pub slowdown: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// `fit` reports an error; the connection stays up.
    Error,
    /// The client drops its connection instead of answering.
    Abort,
    /// `fit` sleeps past the server's read timeout before answering.
    Stall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    pub client: usize,
    pub round: u64,
    pub mode: FailureMode,
    /// Stall length; defaults to the read timeout plus one second.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stall_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DTypeName {
    F32,
    F64,
}

/// Dummy model used by `replay-bytes` instead of the trainer's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    pub elements: usize,
    #[serde(default = "default_replay_dtype")]
    pub dtype: DTypeName,
}

fn default_replay_dtype() -> DTypeName {
    DTypeName::F32
}

/// Independent seed streams derived from the top-level seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Data = 0,
    Partition = 1,
    Sampling = 2,
    Init = 3,
    Client = 4,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn derived_seed(&self, stream: SeedStream) -> u64 {
        SeededRng::derive(self.seed, stream as u64).next_u64()
    }

    pub fn client_seed(&self, index: usize) -> u64 {
        SeededRng::derive(self.derived_seed(SeedStream::Client), index as u64).next_u64()
    }

    pub fn client_name(index: usize) -> String {
        format!("client{index:05}")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        if self.num_clients == 0 {
            return Err(invalid("num_clients", "must be at least 1"));
        }
        let s = &self.strategy;
        if s.clients_per_round == 0 {
            return Err(invalid("strategy.clients_per_round", "must be at least 1"));
        }
        if s.clients_per_round > self.num_clients {
            return Err(invalid(
                "strategy.clients_per_round",
                format!(
                    "sample size {} exceeds num_clients {}",
                    s.clients_per_round, self.num_clients
                ),
            ));
        }
        if let Some(e) = s.eval_clients {
            if e > self.num_clients {
                return Err(invalid(
                    "strategy.eval_clients",
                    format!("{e} exceeds num_clients {}", self.num_clients),
                ));
            }
        }
        fedrs::strategy::build_strategy(self.strategy_spec()?, self.fedavg_config())
            .map_err(|e| invalid(&format!("strategy.{}", e.key), e.reason))?;

        let c = &self.client;
        if c.batch_size == 0 {
            return Err(invalid("client.batch_size", "must be at least 1"));
        }
        if c.model == ModelKind::Mlp && c.hidden == 0 {
            return Err(invalid("client.hidden", "must be at least 1"));
        }
        if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
            return Err(invalid("client.test_fraction", "must be in (0, 1)"));
        }

        let d = &self.data;
        if !(0.0..=1.0).contains(&d.iid_fraction) {
            return Err(invalid("data.iid_fraction", "must be in [0, 1]"));
        }
        if d.csv.is_none() {
            self.synthetic_spec()
                .validate()
                .map_err(|e| invalid("data", e.to_string()))?;
        }

        let sv = &self.server;
        if !(sv.read_timeout_s > 0.0 && sv.read_timeout_s.is_finite()) {
            return Err(invalid("server.read_timeout_s", "must be positive"));
        }
        if !(sv.sample_wait_s >= 0.0 && sv.sample_wait_s.is_finite()) {
            return Err(invalid("server.sample_wait_s", "must be non-negative"));
        }
        if let Some(m) = sv.min_available_clients {
            if m > self.num_clients {
                return Err(invalid(
                    "server.min_available_clients",
                    format!("{m} exceeds num_clients {}", self.num_clients),
                ));
            }
        }

        let check_ids = |key: &str, ids: &[usize]| -> Result<(), ConfigError> {
            match ids.iter().find(|&&i| i >= self.num_clients) {
                Some(i) => Err(invalid(
                    key,
                    format!("client {i} out of range, num_clients is {}", self.num_clients),
                )),
                None => Ok(()),
            }
        };
        let mut seen = BTreeSet::new();
        for l in &self.links {
            check_ids("links.clients", &l.clients)?;
            if let Some(b) = l.bandwidth_mbps {
                LinkProfile::with_latency(b * 1e6, l.latency_ms / 1e3)
                    .map_err(|e| invalid("links", e.to_string()))?;
            } else if !(l.latency_ms >= 0.0 && l.latency_ms.is_finite()) {
                return Err(invalid("links.latency_ms", "must be non-negative"));
            }
            for &i in &l.clients {
                if !seen.insert(i) {
                    return Err(invalid("links.clients", format!("client {i} listed twice")));
                }
            }
        }
        seen.clear();
        for c in &self.compute {
            check_ids("compute.clients", &c.clients)?;
            ComputeProfile::new(c.slowdown).map_err(|e| invalid("compute.slowdown", e.to_string()))?;
            for &i in &c.clients {
                if !seen.insert(i) {
                    return Err(invalid("compute.clients", format!("client {i} listed twice")));
                }
            }
        }
        for f in &self.failures {
            check_ids("failures.client", &[f.client])?;
            if f.round == 0 || f.round > self.rounds {
                return Err(invalid(
                    "failures.round",
                    format!("round {} outside 1..={}", f.round, self.rounds),
                ));
            }
            if let Some(s) = f.stall_s {
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(invalid("failures.stall_s", "must be non-negative"));
                }
            }
        }
        if let Some(r) = &self.replay {
            if r.elements == 0 {
                return Err(invalid("replay.elements", "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn fedavg_config(&self) -> FedAvgConfig {
        let s = &self.strategy;
        FedAvgConfig {
            clients_per_round: s.clients_per_round,
            local_epochs: s.local_epochs,
            learning_rate: s.learning_rate,
            seed: self.derived_seed(SeedStream::Sampling),
            eval_clients: s.eval_clients.unwrap_or(s.clients_per_round),
        }
    }

    pub fn strategy_spec(&self) -> Result<StrategySpec, ConfigError> {
        let s = &self.strategy;
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| invalid(&format!("strategy.{key}"), "required by this strategy"))
        };
        Ok(match s.name {
            StrategyName::Fedavg => StrategySpec::FedAvg,
            StrategyName::FaultTolerant => StrategySpec::FaultTolerant {
                min_completion: s.min_completion.ok_or_else(|| {
                    invalid("strategy.min_completion", "required by this strategy")
                })?,
            },
            StrategyName::Fedprox => StrategySpec::FedProx {
                mu: need(s.mu, "mu")?,
            },
            StrategyName::Qfedavg => StrategySpec::QFedAvg {
                q: need(s.q, "q")?,
                lipschitz: need(s.lipschitz, "lipschitz")?,
            },
            StrategyName::Fedfs => StrategySpec::FedFs {
                fast_fraction: need(s.fast_fraction, "fast_fraction")?,
                slow_epoch_scale: need(s.slow_epoch_scale, "slow_epoch_scale")?,
            },
        })
    }

    pub fn synthetic_spec(&self) -> fedrs::data::SyntheticSpec {
        fedrs::data::SyntheticSpec {
            num_examples: self.data.num_examples,
            num_features: self.data.num_features,
            num_classes: self.data.num_classes,
            class_separation: self.data.class_separation,
            seed: self.derived_seed(SeedStream::Data),
        }
    }

    pub fn architecture(&self, num_features: usize, num_classes: usize) -> Architecture {
        match self.client.model {
            ModelKind::Logistic => Architecture::Logistic {
                num_features,
                num_classes,
            },
            ModelKind::Mlp => Architecture::Mlp {
                num_features,
                hidden: self.client.hidden,
                num_classes,
            },
        }
    }

    pub fn link_for(&self, client: usize) -> LinkProfile {
        self.links
            .iter()
            .find(|l| l.clients.contains(&client))
            .map(|l| LinkProfile {
                bandwidth_bps: l.bandwidth_mbps.map_or(f64::INFINITY, |b| b * 1e6),
                latency_s: l.latency_ms / 1e3,
            })
            .unwrap_or_else(LinkProfile::unlimited)
    }

    pub fn compute_for(&self, client: usize) -> ComputeProfile {
        self.compute
            .iter()
            .find(|c| c.clients.contains(&client))
            .map(|c| ComputeProfile {
                slowdown: c.slowdown,
            })
            .unwrap_or_else(ComputeProfile::unthrottled)
    }

    pub fn failures_for(&self, client: usize) -> Vec<FailureSpec> {
        self.failures
            .iter()
            .filter(|f| f.client == client)
            .cloned()
            .collect()
    }

    pub fn read_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.server.read_timeout_s)
    }

    pub fn sample_wait(&self) -> Duration {
        Duration::from_secs_f64(self.server.sample_wait_s)
    }

    pub fn min_available_clients(&self) -> usize {
        self.server.min_available_clients.unwrap_or(self.num_clients)
    }
}
