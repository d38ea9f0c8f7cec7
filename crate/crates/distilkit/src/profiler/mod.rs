//! Profiling harness: per-model peak memory, multiply-accumulate counts,
//! and execution time over increasing utterance lengths.

pub mod macs;
pub mod measure;
pub mod svg;
pub mod sweep;

pub use macs::count_macs;
pub use measure::{measure_peak_memory, measure_time, Timing};
pub use svg::{line_chart, Series};
pub use sweep::{
    parse_profile_csv, records_to_csv, sweep_profile, write_profile_svgs, ProfileRecord,
    PROFILE_CSV_HEADER,
};
