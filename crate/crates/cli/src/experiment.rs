//! Running federations from an [`ExperimentConfig`]: all in one process over
//! the loopback transport, or as separate server and client processes over
//! TCP.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use fedrs::client::{
    start_client, Client, ClientError, ClientOptions, ClientRunError, EvaluateOutput, FitOutput,
    TrainerClient,
};
use fedrs::data::{make_synthetic, partition, read_csv_path, DataError, LocalDataset, PartitionSpec};
use fedrs::local::LocalFederation;
use fedrs::model::{evaluate_model, Architecture, Model};
use fedrs::server::{run, ClientManager, RunOutput, ServerConfig, ServerError};
use fedrs::sim::{ShapedDialer, ThrottledClient};
use fedrs::strategy::build_strategy;
use fedrs::transport::{serve, ServerEndpoint, TcpDialer, TransportError};
use fedrs::{ConfigMap, Weights};
use log::info;
use thiserror::Error;

use crate::config::{ExperimentConfig, FailureMode, SeedStream};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("client {index}: {source}")]
    Client {
        index: usize,
        source: ClientRunError,
    },
    #[error("client index {index} out of range, num_clients is {num_clients}")]
    ClientIndex { index: usize, num_clients: usize },
}

/// Per-client train/test splits plus everything derived from them.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub arch: Architecture,
    pub clients: Vec<(LocalDataset, LocalDataset)>,
}

impl PreparedData {
    /// All client test splits, for server-side evaluation.
    pub fn pooled_test(&self) -> LocalDataset {
        let tests: Vec<LocalDataset> = self.clients.iter().map(|(_, t)| t.clone()).collect();
        LocalDataset::concat(&tests).expect("at least one client")
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, DataError> {
    let data = match &cfg.data.csv {
        Some(path) => read_csv_path(path, None)?,
        None => make_synthetic(&cfg.synthetic_spec())?,
    };
    let parts = partition(
        &data,
        &PartitionSpec {
            num_clients: cfg.num_clients,
            iid_fraction: cfg.data.iid_fraction,
            seed: cfg.derived_seed(SeedStream::Partition),
        },
    )?;
    let arch = cfg.architecture(data.num_features(), data.num_classes());
    let clients = parts
        .iter()
        .map(|p| p.train_test_split(cfg.client.test_fraction))
        .collect();
    Ok(PreparedData { arch, clients })
}

pub fn initial_weights(cfg: &ExperimentConfig, arch: Architecture) -> Weights {
    Model::init(arch, cfg.derived_seed(SeedStream::Init)).to_weights()
}

/// Wraps a client with the configured failure injections, keyed by round.
pub struct FaultyClient<C> {
    inner: C,
    faults: BTreeMap<u64, (FailureMode, Duration)>,
}

impl<C: Client> FaultyClient<C> {
    pub fn new(inner: C, cfg: &ExperimentConfig, index: usize) -> Self {
        let default_stall = cfg.read_timeout() + Duration::from_secs(1);
        let faults = cfg
            .failures_for(index)
            .into_iter()
            .map(|f| {
                let stall = f.stall_s.map_or(default_stall, Duration::from_secs_f64);
                (f.round, (f.mode, stall))
            })
            .collect();
        Self { inner, faults }
    }
}

impl<C: Client> Client for FaultyClient<C> {
    fn get_weights(&mut self) -> Result<Weights, ClientError> {
        self.inner.get_weights()
    }

    fn fit(&mut self, weights: Weights, config: &ConfigMap) -> Result<FitOutput, ClientError> {
        let round = config.get_i64("round").unwrap_or(0) as u64;
        match self.faults.get(&round) {
            Some((FailureMode::Error, _)) => {
                return Err(ClientError::Failed(format!("injected failure in round {round}")))
            }
            Some((FailureMode::Abort, _)) => {
                return Err(ClientError::Abort(format!("injected abort in round {round}")))
            }
            Some((FailureMode::Stall, d)) => thread::sleep(*d),
            None => {}
        }
        self.inner.fit(weights, config)
    }

    fn evaluate(&self, weights: Weights, config: &ConfigMap) -> Result<EvaluateOutput, ClientError> {
        self.inner.evaluate(weights, config)
    }
}

/// The client the experiment assigns to `index`, fully wrapped.
pub fn build_client(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    index: usize,
) -> FaultyClient<ThrottledClient<TrainerClient>> {
    let (train, test) = data.clients[index].clone();
    let trainer = TrainerClient::new(data.arch, train, test, cfg.client_seed(index));
    let throttled = ThrottledClient::new(trainer, cfg.compute_for(index));
    FaultyClient::new(throttled, cfg, index)
}

fn server_config(cfg: &ExperimentConfig) -> ServerConfig {
    ServerConfig {
        num_rounds: cfg.rounds,
        read_timeout: cfg.read_timeout(),
        min_available_clients: cfg.min_available_clients(),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub run: RunOutput,
    pub elapsed: Duration,
}

impl ExperimentOutput {
    /// All configured rounds ran (rounds without a model update included).
    pub fn completed(&self, cfg: &ExperimentConfig) -> bool {
        self.run.error.is_none() && self.run.records.len() as u64 == cfg.rounds
    }
}

fn centralized(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Option<impl FnMut(&Weights) -> (f64, f64)> {
    let test = cfg.server.centralized_eval.then(|| data.pooled_test())?;
    let arch = data.arch;
    Some(move |w: &Weights| {
        let model = Model::from_weights(arch, w).expect("global model matches architecture");
        let e = evaluate_model(&model, &test).expect("pooled test set is valid");
        (e.loss, e.accuracy)
    })
}

/// Server and all clients in this process, over the loopback transport.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let data = prepare_data(cfg)?;
    let mut strategy = build_strategy(cfg.strategy_spec().expect("validated"), cfg.fedavg_config())
        .expect("validated");
    let mut fed = LocalFederation::start(cfg.sample_wait());
    for i in 0..cfg.num_clients {
        fed.spawn(ExperimentConfig::client_name(i), build_client(cfg, &data, i), cfg.link_for(i));
    }
    fed.wait_connected(cfg.sample_wait().max(Duration::from_secs(10)))?;
    info!("{} clients connected, starting {} rounds", cfg.num_clients, cfg.rounds);

    let mut eval = centralized(cfg, &data);
    let started = Instant::now();
    let run_out = run(
        strategy.as_mut(),
        fed.manager(),
        &server_config(cfg),
        initial_weights(cfg, data.arch),
        eval.as_mut().map(|f| f as &mut dyn FnMut(&Weights) -> (f64, f64)),
    );
    let elapsed = started.elapsed();
    for (name, result) in fed.shutdown() {
        if let Err(e) = result {
            info!("{name} ended with: {e}");
        }
    }
    Ok(ExperimentOutput {
        run: run_out,
        elapsed,
    })
}

/// Serves the configured experiment over TCP at `server.address`.
pub fn run_server(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let data = prepare_data(cfg)?;
    let mut strategy = build_strategy(cfg.strategy_spec().expect("validated"), cfg.fedavg_config())
        .expect("validated");
    let mgr = Arc::new(ClientManager::new(cfg.sample_wait()));
    let endpoint = ServerEndpoint {
        bind_address: cfg.server.address.clone(),
        read_timeout: cfg.read_timeout(),
        ..ServerEndpoint::default()
    };
    let handle = serve(endpoint, mgr.on_connect())?;
    info!("listening on {}", handle.local_addr());
    let mut eval = centralized(cfg, &data);
    let started = Instant::now();
    let run_out = run(
        strategy.as_mut(),
        &mgr,
        &server_config(cfg),
        initial_weights(cfg, data.arch),
        eval.as_mut().map(|f| f as &mut dyn FnMut(&Weights) -> (f64, f64)),
    );
    let elapsed = started.elapsed();
    handle.shutdown();
    Ok(ExperimentOutput {
        run: run_out,
        elapsed,
    })
}

/// Runs client `index` of the experiment against `server.address`.
pub fn run_client(cfg: &ExperimentConfig, index: usize) -> Result<(), ExperimentError> {
    if index >= cfg.num_clients {
        return Err(ExperimentError::ClientIndex {
            index,
            num_clients: cfg.num_clients,
        });
    }
    let data = prepare_data(cfg)?;
    let mut client = build_client(cfg, &data, index);
    let dialer = ShapedDialer {
        inner: TcpDialer::new(cfg.server.address.clone()),
        profile: cfg.link_for(index),
    };
    let options = ClientOptions::named(ExperimentConfig::client_name(index));
    // The server may still be starting up.
    let mut attempts = 0;
    loop {
        match start_client(&dialer, &mut client, &options) {
            Err(ClientRunError::Transport(e)) if e.is_retriable() && attempts < CONNECT_ATTEMPTS => {
                attempts += 1;
                thread::sleep(CONNECT_RETRY);
            }
            other => return other.map_err(|source| ExperimentError::Client { index, source }),
        }
    }
}

const CONNECT_ATTEMPTS: u32 = 50;
const CONNECT_RETRY: Duration = Duration::from_millis(200);
