//! Optimisers, the training loop, evaluation with i.i.d and o.o.d
//! batch-norm statistics, and the N×M sweep.

mod eval;
mod models;
mod optim;
mod sweep;
mod train;

use std::path::Path;

pub use eval::{evaluate, predict_probs, score, EvalMode, EvalResult};
pub use models::AnyModel;
pub use optim::{Optimizer, ADAM_BETAS, ADAM_EPS};
pub use sweep::{sweep, sweep_csv, SweepCell, SWEEP_CSV_HEADER};
pub use train::{
    ct_recon_error, epoch_batches, train, train_model, EvalRow, LossTerms, RunMetrics, TrainOutput, CSV_HEADER,
};

use crate::error::Result;
use crate::model::ExperimentConfig;

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const BEST_CHECKPOINT_FILE: &str = "best.ckpt";
pub const FINAL_CHECKPOINT_FILE: &str = "final.ckpt";

/// Metrics, summary, resolved config and both checkpoints under `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &TrainOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(METRICS_FILE), out.metrics.to_csv().as_bytes())?;
    write_atomic(&dir.join(SUMMARY_FILE), out.metrics.summary().as_bytes())?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_kv_text().as_bytes())?;
    write_atomic(&dir.join(BEST_CHECKPOINT_FILE), &out.best.to_bytes())?;
    write_atomic(&dir.join(FINAL_CHECKPOINT_FILE), &out.model.checkpoint(cfg).to_bytes())?;
    Ok(())
}
