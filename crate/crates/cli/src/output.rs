//! Result files.
//!
//! `metrics.csv` has one row per round with these columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `round` | 1-based round index |
//! | `loss`, `accuracy` | example-weighted distributed evaluation (empty if none) |
//! | `centralized_loss`, `centralized_accuracy` | server-side evaluation (empty if off) |
//! | `num_selected`, `num_success`, `num_failures` | fit outcome counts |
//! | `model_updated` | whether the global model changed |
//! | `update_divergence` | mean pairwise L2 distance of returned client models |
//! | `warnings` | results the strategy skipped |
//! | `bytes_fit`, `bytes_evaluate`, `bytes_total` | frame bytes moved |
//!
//! Wall-clock times go to `timing.csv` (`round,wall_time_s`) so that
//! `metrics.csv` is byte-identical across reruns of the same config.

use std::fs;
use std::io;
use std::path::Path;

use fedrs::server::RoundRecord;
use fedrs::tensor::encode_weights;
use fedrs::Weights;

use crate::config::ExperimentConfig;
use crate::replay::ReplayRow;

pub const METRICS_HEADER: [&str; 14] = [
    "round",
    "loss",
    "accuracy",
    "centralized_loss",
    "centralized_accuracy",
    "num_selected",
    "num_success",
    "num_failures",
    "model_updated",
    "update_divergence",
    "warnings",
    "bytes_fit",
    "bytes_evaluate",
    "bytes_total",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics(w: impl io::Write, records: &[RoundRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in records {
        out.write_record([
            r.round.to_string(),
            opt(r.eval_loss),
            opt(r.eval_accuracy),
            opt(r.centralized_loss),
            opt(r.centralized_accuracy),
            r.num_selected.to_string(),
            r.num_success.to_string(),
            r.num_failures.to_string(),
            u8::from(r.model_updated).to_string(),
            opt(r.update_divergence),
            r.warnings.to_string(),
            r.bytes_fit.to_string(),
            r.bytes_evaluate.to_string(),
            r.bytes_total.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_timing(w: impl io::Write, records: &[RoundRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["round", "wall_time_s"])?;
    for r in records {
        out.write_record([r.round.to_string(), r.wall_time.as_secs_f64().to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_replay(w: impl io::Write, rows: &[ReplayRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sampling_rate", "clients", "bytes_per_round", "gb_per_round"])?;
    for r in rows {
        out.write_record([
            format!("{:.1}", r.sampling_rate),
            r.clients.to_string(),
            r.bytes_per_round.to_string(),
            format!("{:.3}", r.bytes_per_round as f64 / 1e9),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `metrics.csv`, `timing.csv`, `final_weights.bin` and
/// `config.toml` (the resolved config) into `dir`.
pub fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    records: &[RoundRecord],
    final_weights: &Weights,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics(fs::File::create(dir.join("metrics.csv"))?, records)?;
    write_timing(fs::File::create(dir.join("timing.csv"))?, records)?;
    let bytes = encode_weights(final_weights).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    fs::write(dir.join("final_weights.bin"), bytes)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}
