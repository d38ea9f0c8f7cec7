//! Linear warm-up / linear decay learning-rate schedule.

use super::TrainConfig;
use crate::error::{Error, Result};

/// Linear ramp 0 → peak over `warmup_steps`, then linear decay
/// peak → 0 at `total_steps`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Precondition(format!(
            "step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return Ok(cfg.peak_lr);
        }
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let decay_span = (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.peak_lr * (cfg.total_steps - step) as f64 / decay_span)
}
