//! Peak-memory and wall-time measurement.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::numerics::{gauge_live_bytes, gauge_peak_bytes, gauge_reset_peak};

/// Net tensor-byte high-water mark of a run: the peak of live bytes during
/// `run` minus the live bytes at entry. Counts payloads plus the fixed
/// per-tensor header charge; deterministic for deterministic runs.
pub fn measure_peak_memory<R>(run: impl FnOnce() -> R) -> (u64, R) {
    let base = gauge_live_bytes();
    gauge_reset_peak();
    let out = run();
    let peak = gauge_peak_bytes();
    (peak.saturating_sub(base), out)
}

#[derive(Debug, Clone, Copy)]
pub struct Timing {
    pub mean_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub runs: u32,
}

/// Mean wall time over `repeats` runs after one untimed warm-up.
pub fn measure_time(mut run: impl FnMut(), repeats: u32) -> Result<Timing> {
    if repeats < 1 {
        return Err(Error::Precondition("measure_time needs at least one repeat".into()));
    }
    run(); // warm-up, untimed
    let mut total = 0.0f64;
    let mut min = f64::INFINITY;
    let mut max = 0.0f64;
    for _ in 0..repeats {
        let t0 = Instant::now();
        run();
        let dt = t0.elapsed().as_secs_f64();
        total += dt;
        min = min.min(dt);
        max = max.max(dt);
    }
    Ok(Timing { mean_seconds: total / repeats as f64, min_seconds: min, max_seconds: max, runs: repeats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tensor, TENSOR_OVERHEAD_BYTES};

    #[test]
    fn peak_counts_one_tensor_with_header() {
        let (peak, _) = measure_peak_memory(|| {
            let _t = Tensor::<f32>::zeros(vec![1000]);
        });
        assert_eq!(peak, 4000 + TENSOR_OVERHEAD_BYTES);
    }

    #[test]
    fn sequential_allocations_do_not_stack() {
        let (peak, _) = measure_peak_memory(|| {
            {
                let _a = Tensor::<f32>::zeros(vec![1000]);
            }
            {
                let _b = Tensor::<f32>::zeros(vec![1000]);
            }
        });
        assert_eq!(peak, 4000 + TENSOR_OVERHEAD_BYTES);
        let (peak2, _) = measure_peak_memory(|| {
            let _a = Tensor::<f32>::zeros(vec![1000]);
            let _b = Tensor::<f32>::zeros(vec![1000]);
        });
        assert_eq!(peak2, 2 * (4000 + TENSOR_OVERHEAD_BYTES));
    }

    #[test]
    fn repeated_measurement_of_a_deterministic_run_is_identical() {
        let work = || {
            let a = Tensor::<f64>::zeros(vec![64, 64]);
            let _b = a.clone();
        };
        let (p1, _) = measure_peak_memory(work);
        let (p2, _) = measure_peak_memory(work);
        assert_eq!(p1, p2);
    }

    #[test]
    fn timing_brackets_and_noop_is_small() {
        let t = measure_time(|| {}, 10).unwrap();
        assert!(t.mean_seconds >= 0.0 && t.mean_seconds < 0.01);
        assert!(t.min_seconds <= t.mean_seconds && t.mean_seconds <= t.max_seconds);
        assert_eq!(t.runs, 10);
        assert!(measure_time(|| {}, 0).is_err());
    }
}
