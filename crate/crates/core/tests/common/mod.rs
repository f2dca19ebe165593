#![allow(dead_code)]

use std::collections::BTreeSet;
use std::thread;
use std::time::Duration;

use fedrs::client::{Client, ClientError, EvaluateOutput, FitOutput};
use fedrs::{ConfigMap, Tensor, Weights};

pub fn vector(values: &[f64]) -> Weights {
    Weights::new(vec![Tensor::from_f64("w", vec![values.len()], values.to_vec()).unwrap()]).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    Error,
    Abort,
    Stall(Duration),
}

/// Returns `global + shift` from fit and a fixed loss from evaluate.
#[derive(Debug, Clone)]
pub struct ScriptedClient {
    pub shift: f64,
    pub num_examples: u64,
    pub loss: f64,
    pub train_loss: Option<f64>,
    pub fault: Option<Fault>,
    pub fault_rounds: BTreeSet<i64>,
    pub eval_fault: bool,
    pub fit_sleep: Duration,
}

impl ScriptedClient {
    pub fn new(shift: f64, num_examples: u64) -> Self {
        Self {
            shift,
            num_examples,
            loss: 0.5,
            train_loss: Some(1.0),
            fault: None,
            fault_rounds: BTreeSet::new(),
            eval_fault: false,
            fit_sleep: Duration::ZERO,
        }
    }

    pub fn failing(mut self, fault: Fault, rounds: impl IntoIterator<Item = i64>) -> Self {
        self.fault = Some(fault);
        self.fault_rounds = rounds.into_iter().collect();
        self
    }
}

impl Client for ScriptedClient {
    fn get_weights(&mut self) -> Result<Weights, ClientError> {
        Ok(vector(&[0.0]))
    }

    fn fit(&mut self, weights: Weights, config: &ConfigMap) -> Result<FitOutput, ClientError> {
        let round = config.get_i64("round").unwrap_or(0);
        if self.fault_rounds.contains(&round) {
            match self.fault {
                Some(Fault::Error) => return Err(ClientError::Failed("injected".into())),
                Some(Fault::Abort) => return Err(ClientError::Abort("injected".into())),
                Some(Fault::Stall(d)) => thread::sleep(d),
                None => {}
            }
        }
        thread::sleep(self.fit_sleep);
        let flat: Vec<f64> = weights.flatten_f64().iter().map(|v| v + self.shift).collect();
        let mut metrics = ConfigMap::new();
        if let Some(l) = self.train_loss {
            metrics.insert("train_loss", l);
        }
        for (k, v) in config.iter() {
            metrics.insert(format!("cfg_{k}"), v.clone());
        }
        Ok(FitOutput {
            weights: weights.with_flat_values(&flat),
            num_examples: self.num_examples,
            metrics,
        })
    }

    fn evaluate(&self, _weights: Weights, _config: &ConfigMap) -> Result<EvaluateOutput, ClientError> {
        if self.eval_fault {
            return Err(ClientError::Failed("no test data".into()));
        }
        Ok(EvaluateOutput {
            loss: self.loss,
            num_examples: self.num_examples,
            metrics: ConfigMap::new().with("accuracy", 1.0 - self.loss),
        })
    }
}
