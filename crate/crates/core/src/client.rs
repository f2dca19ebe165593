//! Client side: the `Client` interface, the app loop that connects it to a
//! server, and a ready-made client backed by the built-in trainer.

use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info};
use thiserror::Error;

use crate::data::LocalDataset;
use crate::model::{evaluate_model, sgd_fit, Architecture, Model, SgdConfig, TrainError};
use crate::protocol::{ConfigMap, DisconnectReason, Message};
use crate::rng::SeededRng;
use crate::tensor::Weights;
use crate::transport::{dial, Connection, Dialer, TransportError};

pub const ERR_FIT: u16 = 1;
pub const ERR_EVALUATE: u16 = 2;
pub const ERR_UNEXPECTED: u16 = 3;
pub const ERR_GET_WEIGHTS: u16 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutput {
    pub weights: Weights,
    pub num_examples: u64,
    pub metrics: ConfigMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOutput {
    pub loss: f64,
    pub num_examples: u64,
    pub metrics: ConfigMap,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    /// Reported to the server as `ErrorRes`; the client stays connected.
    #[error("{0}")]
    Failed(String),
    /// Drop the connection without replying, as a crashed device would.
    #[error("aborted: {0}")]
    Abort(String),
}

impl From<TrainError> for ClientError {
    fn from(e: TrainError) -> Self {
        ClientError::Failed(e.to_string())
    }
}

/// User logic run by [`start_client`].
///
/// `fit` must return weights with the same layout as it received.
pub trait Client: Send {
    fn get_weights(&mut self) -> Result<Weights, ClientError>;
    fn fit(&mut self, weights: Weights, config: &ConfigMap) -> Result<FitOutput, ClientError>;
    fn evaluate(&self, weights: Weights, config: &ConfigMap) -> Result<EvaluateOutput, ClientError>;
}

impl<C: Client + ?Sized> Client for Box<C> {
    fn get_weights(&mut self) -> Result<Weights, ClientError> {
        (**self).get_weights()
    }

    fn fit(&mut self, weights: Weights, config: &ConfigMap) -> Result<FitOutput, ClientError> {
        (**self).fit(weights, config)
    }

    fn evaluate(&self, weights: Weights, config: &ConfigMap) -> Result<EvaluateOutput, ClientError> {
        (**self).evaluate(weights, config)
    }
}

#[derive(Debug, Error)]
pub enum ClientRunError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("client aborted the connection: {0}")]
    Aborted(String),
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub name: String,
    pub capabilities: ConfigMap,
}

impl ClientOptions {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            capabilities: ConfigMap::new(),
        }
    }
}

/// How a session on one connection ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEnd {
    /// `ReconnectIns{0}`: the server is done with this client.
    Shutdown,
    /// `ReconnectIns{s}` with `s > 0`.
    ReconnectAfter(Duration),
}

/// Connects through `dialer` and serves instructions until the server sends
/// `ReconnectIns{0}`. `ReconnectIns{s > 0}` closes the connection, sleeps `s`
/// seconds and redials.
pub fn start_client(
    dialer: &dyn Dialer,
    client: &mut dyn Client,
    options: &ClientOptions,
) -> Result<(), ClientRunError> {
    loop {
        let conn = dial(dialer, &options.name, options.capabilities.clone())?;
        info!("{} connected to {}", options.name, dialer.address());
        match run_session(&conn, client)? {
            SessionEnd::Shutdown => return Ok(()),
            SessionEnd::ReconnectAfter(delay) => {
                conn.close();
                debug!("{} reconnecting in {delay:?}", options.name);
                thread::sleep(delay);
            }
        }
    }
}

/// Serves instructions on an already-announced connection.
pub fn run_session(conn: &Connection, client: &mut dyn Client) -> Result<SessionEnd, ClientRunError> {
    loop {
        let (ins, _) = conn.recv(None)?;
        let reply = match ins {
            Message::GetWeightsIns => match client.get_weights() {
                Ok(weights) => Message::GetWeightsRes { weights },
                Err(e) => error_reply(conn, ERR_GET_WEIGHTS, e)?,
            },
            Message::FitIns { weights, config } => {
                let layout = weights.clone();
                match client.fit(weights, &config) {
                    Ok(out) if out.weights.same_layout(&layout) => Message::FitRes {
                        weights: out.weights,
                        num_examples: out.num_examples,
                        metrics: out.metrics,
                    },
                    Ok(_) => Message::ErrorRes {
                        code: ERR_FIT,
                        detail: "fit returned weights with a different layout".into(),
                    },
                    Err(e) => error_reply(conn, ERR_FIT, e)?,
                }
            }
            Message::EvaluateIns { weights, config } => match client.evaluate(weights, &config) {
                Ok(out) if out.num_examples >= 1 => Message::EvaluateRes {
                    loss: out.loss,
                    num_examples: out.num_examples,
                    metrics: out.metrics,
                },
                Ok(_) => Message::ErrorRes {
                    code: ERR_EVALUATE,
                    detail: "evaluate reported zero examples".into(),
                },
                Err(e) => error_reply(conn, ERR_EVALUATE, e)?,
            },
            Message::ReconnectIns { seconds: 0 } => {
                conn.send(&Message::DisconnectRes {
                    reason: DisconnectReason::Shutdown,
                })?;
                conn.close();
                return Ok(SessionEnd::Shutdown);
            }
            Message::ReconnectIns { seconds } => {
                conn.send(&Message::DisconnectRes {
                    reason: DisconnectReason::ReconnectLater,
                })?;
                return Ok(SessionEnd::ReconnectAfter(Duration::from_secs(seconds as u64)));
            }
            other => Message::ErrorRes {
                code: ERR_UNEXPECTED,
                detail: format!("unexpected {:?}", other.message_type()),
            },
        };
        conn.send(&reply)?;
    }
}

fn error_reply(conn: &Connection, code: u16, err: ClientError) -> Result<Message, ClientRunError> {
    match err {
        ClientError::Failed(detail) => Ok(Message::ErrorRes { code, detail }),
        ClientError::Abort(why) => {
            conn.close();
            Err(ClientRunError::Aborted(why))
        }
    }
}

/// Client running [`sgd_fit`] on a local train split and [`evaluate_model`]
/// on a local test split.
///
/// Config keys read by `fit`: `epochs` (1), `lr` (0.1), `proximal_mu` (0),
/// `batch_size` (32), `seed`, `round`. Unknown keys are ignored. `fit`
/// reports `train_loss` and `fit_duration_s`; `evaluate` reports `accuracy`.
#[derive(Debug, Clone)]
pub struct TrainerClient {
    arch: Architecture,
    train: LocalDataset,
    test: LocalDataset,
    seed: u64,
    current: Model,
}

impl TrainerClient {
    pub fn new(arch: Architecture, train: LocalDataset, test: LocalDataset, seed: u64) -> Self {
        Self {
            arch,
            train,
            test,
            seed,
            current: Model::init(arch, seed),
        }
    }

    pub fn train_data(&self) -> &LocalDataset {
        &self.train
    }

    pub fn test_data(&self) -> &LocalDataset {
        &self.test
    }

    /// SGD settings this client would use for `config`.
    pub fn sgd_config(&self, config: &ConfigMap) -> Result<SgdConfig, ClientError> {
        let positive = |key: &str, default: i64| -> Result<usize, ClientError> {
            match config.get_i64(key) {
                None => Ok(default as usize),
                Some(v) if v >= 1 => Ok(v as usize),
                Some(v) => Err(ClientError::Failed(format!("{key} must be at least 1, got {v}"))),
            }
        };
        let base = config.get_i64("seed").map_or(self.seed, |s| s as u64);
        let round = config.get_i64("round").unwrap_or(0) as u64;
        Ok(SgdConfig {
            epochs: positive("epochs", 1)?,
            learning_rate: config.get_f64("lr").unwrap_or(0.1),
            proximal_mu: config.get_f64("proximal_mu").unwrap_or(0.0),
            batch_size: positive("batch_size", 32)?,
            seed: SeededRng::derive(base, round).next_u64(),
        })
    }
}

impl Client for TrainerClient {
    fn get_weights(&mut self) -> Result<Weights, ClientError> {
        Ok(self.current.to_weights())
    }

    fn fit(&mut self, weights: Weights, config: &ConfigMap) -> Result<FitOutput, ClientError> {
        let started = Instant::now();
        let cfg = self.sgd_config(config)?;
        let global = Model::from_weights(self.arch, &weights)?;
        let mut local = global.clone();
        let train_loss = sgd_fit(&mut local, &self.train, &cfg, Some(&global))?;
        let out = local.to_weights_as(Some(&weights));
        self.current = local;
        Ok(FitOutput {
            weights: out,
            num_examples: self.train.len() as u64,
            metrics: ConfigMap::new()
                .with("train_loss", train_loss)
                .with("fit_duration_s", started.elapsed().as_secs_f64()),
        })
    }

    fn evaluate(&self, weights: Weights, _config: &ConfigMap) -> Result<EvaluateOutput, ClientError> {
        let model = Model::from_weights(self.arch, &weights)?;
        let e = evaluate_model(&model, &self.test)?;
        Ok(EvaluateOutput {
            loss: e.loss,
            num_examples: e.num_examples as u64,
            metrics: ConfigMap::new().with("accuracy", e.accuracy),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::transport::duplex;

    fn trainer() -> TrainerClient {
        let data = make_synthetic(&SyntheticSpec {
            num_examples: 60,
            num_features: 3,
            num_classes: 2,
            class_separation: 4.0,
            seed: 1,
        })
        .unwrap();
        let (train, test) = data.train_test_split(0.25);
        TrainerClient::new(
            Architecture::Logistic {
                num_features: 3,
                num_classes: 2,
            },
            train,
            test,
            7,
        )
    }

    #[test]
    fn fit_preserves_layout_and_reports_metrics() {
        let mut c = trainer();
        let w = c.get_weights().unwrap();
        let out = c
            .fit(w.clone(), &ConfigMap::new().with("epochs", 2i64))
            .unwrap();
        assert!(out.weights.same_layout(&w));
        assert_eq!(out.num_examples, 45);
        assert!(out.metrics.get_f64("train_loss").unwrap() > 0.0);
        assert!(out.metrics.get_f64("fit_duration_s").unwrap() >= 0.0);
    }

    #[test]
    fn evaluate_is_idempotent() {
        let c = trainer();
        let w = Model::init(c.arch, 3).to_weights();
        let a = c.evaluate(w.clone(), &ConfigMap::new()).unwrap();
        let b = c.evaluate(w, &ConfigMap::new()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_examples, 15);
    }

    #[test]
    fn unknown_config_keys_are_ignored() {
        let mut c = trainer();
        let w = c.get_weights().unwrap();
        let base = ConfigMap::new().with("epochs", 1i64).with("round", 2i64);
        let extra = base.clone().with("something_new", "x");
        let a = c.fit(w.clone(), &base).unwrap();
        let b = c.fit(w, &extra).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn invalid_epochs_is_a_client_error() {
        let mut c = trainer();
        let w = c.get_weights().unwrap();
        assert!(matches!(
            c.fit(w, &ConfigMap::new().with("epochs", 0i64)),
            Err(ClientError::Failed(_))
        ));
    }

    struct Scripted {
        fail_fit: bool,
    }

    impl Client for Scripted {
        fn get_weights(&mut self) -> Result<Weights, ClientError> {
            Ok(Weights::empty())
        }

        fn fit(&mut self, weights: Weights, _: &ConfigMap) -> Result<FitOutput, ClientError> {
            if std::mem::take(&mut self.fail_fit) {
                return Err(ClientError::Failed("fit exploded".into()));
            }
            Ok(FitOutput {
                weights,
                num_examples: 1,
                metrics: ConfigMap::new(),
            })
        }

        fn evaluate(&self, _: Weights, _: &ConfigMap) -> Result<EvaluateOutput, ClientError> {
            Ok(EvaluateOutput {
                loss: 0.5,
                num_examples: 1,
                metrics: ConfigMap::new(),
            })
        }
    }

    #[test]
    fn session_handles_errors_and_shutdown() {
        let (a, b) = duplex(1 << 16);
        let server = Connection::new(Box::new(a)).unwrap();
        let client_conn = Connection::new(Box::new(b)).unwrap();
        let t = thread::spawn(move || {
            let mut c = Scripted { fail_fit: true };
            run_session(&client_conn, &mut c)
        });
        let timeout = Duration::from_secs(5);
        let reply = server.request(&Message::GetWeightsIns, timeout).unwrap();
        assert_eq!(
            reply,
            Message::GetWeightsRes {
                weights: Weights::empty()
            }
        );
        let fit = Message::FitIns {
            weights: Weights::empty(),
            config: ConfigMap::new(),
        };
        let err = server.request(&fit, timeout).unwrap_err();
        assert!(matches!(err, TransportError::ClientError { code: ERR_FIT, .. }));
        // The next instruction is still served.
        assert!(matches!(
            server.request(&fit, timeout).unwrap(),
            Message::FitRes { .. }
        ));
        let err = server
            .request(&Message::ReconnectIns { seconds: 0 }, timeout)
            .unwrap();
        assert_eq!(
            err,
            Message::DisconnectRes {
                reason: DisconnectReason::Shutdown
            }
        );
        assert_eq!(t.join().unwrap().unwrap(), SessionEnd::Shutdown);
    }
}
