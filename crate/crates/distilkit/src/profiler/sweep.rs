//! Profiling sweep: (model × utterance length) cross-product measuring
//! peak memory, analytic MACs, and mean wall time, emitted as CSV plus one
//! SVG line chart per metric.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::macs::count_macs;
use super::measure::{measure_peak_memory, measure_time};
use super::svg::{line_chart, Series};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRecord {
    pub model_name: String,
    pub utterance_seconds: f64,
    pub peak_bytes: u64,
    pub macs: u64,
    pub mean_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub runs: u32,
}

pub const PROFILE_CSV_HEADER: &str =
    "model,seconds,peak_bytes,macs,mean_time_s,min_time_s,max_time_s,runs";

fn csv_row(r: &ProfileRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.model_name,
        r.utterance_seconds,
        r.peak_bytes,
        r.macs,
        r.mean_seconds,
        r.min_seconds,
        r.max_seconds,
        r.runs
    )
}

pub fn records_to_csv(records: &[ProfileRecord]) -> String {
    let mut s = String::from(PROFILE_CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&csv_row(r));
        s.push('\n');
    }
    s
}

pub fn parse_profile_csv(text: &str) -> Result<Vec<ProfileRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != PROFILE_CSV_HEADER {
                return Err(Error::Precondition(format!("unexpected profile header '{line}'")));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Precondition(format!("bad profile row '{line}'")));
        }
        let bad = |what: &str| Error::Precondition(format!("bad {what} in '{line}'"));
        out.push(ProfileRecord {
            model_name: f[0].to_string(),
            utterance_seconds: f[1].parse().map_err(|_| bad("seconds"))?,
            peak_bytes: f[2].parse().map_err(|_| bad("peak_bytes"))?,
            macs: f[3].parse().map_err(|_| bad("macs"))?,
            mean_seconds: f[4].parse().map_err(|_| bad("mean"))?,
            min_seconds: f[5].parse().map_err(|_| bad("min"))?,
            max_seconds: f[6].parse().map_err(|_| bad("max"))?,
            runs: f[7].parse().map_err(|_| bad("runs"))?,
        });
    }
    Ok(out)
}

fn probe_wave(seconds: f64, sample_rate: u32) -> Vec<f32> {
    let n = (seconds * sample_rate as f64).round() as usize;
    (0..n)
        .map(|i| {
            (std::f64::consts::TAU * 220.0 * i as f64 / sample_rate as f64).sin() as f32 * 0.5
        })
        .collect()
}

/// Full model × length cross-product, sorted by (model, length). When
/// `csv_path` is given, rows are flushed as they are produced, so a
/// failing sub-measurement leaves a partial CSV behind.
pub fn sweep_profile(
    models: &[(String, ModelConfig)],
    lengths_seconds: &[f64],
    repeats: u32,
    sample_rate: u32,
    csv_path: Option<&Path>,
) -> Result<Vec<ProfileRecord>> {
    if models.is_empty() || lengths_seconds.is_empty() {
        return Err(Error::EmptyInput("profile sweep needs models and lengths".into()));
    }
    let mut models: Vec<&(String, ModelConfig)> = models.iter().collect();
    models.sort_by(|a, b| a.0.cmp(&b.0));
    let mut lengths = lengths_seconds.to_vec();
    lengths.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut csv = match csv_path {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{PROFILE_CSV_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((f, p.to_path_buf()))
        }
        None => None,
    };

    let mut records = Vec::with_capacity(models.len() * lengths.len());
    for (name, cfg) in models {
        let model: Model<f32> = Model::init(cfg, &mut Rng::new(42))?;
        for &seconds in &lengths {
            let wave = probe_wave(seconds, sample_rate);
            let macs = count_macs(cfg, wave.len())?;
            // validate once, then time the validated closure
            model.forward_infer(&wave)?;
            let (peak_bytes, _) = measure_peak_memory(|| model.forward_infer(&wave).unwrap());
            let timing = measure_time(
                || {
                    model.forward_infer(&wave).unwrap();
                },
                repeats,
            )?;
            let rec = ProfileRecord {
                model_name: name.clone(),
                utterance_seconds: seconds,
                peak_bytes,
                macs,
                mean_seconds: timing.mean_seconds,
                min_seconds: timing.min_seconds,
                max_seconds: timing.max_seconds,
                runs: timing.runs,
            };
            if let Some((f, p)) = csv.as_mut() {
                writeln!(f, "{}", csv_row(&rec)).map_err(|e| Error::io(&*p, e))?;
                f.flush().map_err(|e| Error::io(&*p, e))?;
            }
            records.push(rec);
        }
    }
    Ok(records)
}

/// One chart per metric (peak bytes, GMACs, mean seconds), one polyline
/// per model. Returns the paths written.
pub fn write_profile_svgs(records: &[ProfileRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut names: Vec<&str> = records.iter().map(|r| r.model_name.as_str()).collect();
    names.sort_unstable();
    names.dedup();

    let series_for = |metric: &dyn Fn(&ProfileRecord) -> f64| -> Vec<Series> {
        names
            .iter()
            .map(|&n| Series {
                name: n.to_string(),
                points: records
                    .iter()
                    .filter(|r| r.model_name == n)
                    .map(|r| (r.utterance_seconds, metric(r)))
                    .collect(),
            })
            .collect()
    };

    let charts: [(&str, String); 3] = [
        (
            "profile_peak_bytes.svg",
            line_chart(
                "Peak memory allocation",
                "utterance seconds",
                "bytes",
                &series_for(&|r| r.peak_bytes as f64),
            ),
        ),
        (
            "profile_gmacs.svg",
            line_chart(
                "Multiply-accumulate operations",
                "utterance seconds",
                "GMACs",
                &series_for(&|r| r.macs as f64 / 1e9),
            ),
        ),
        (
            "profile_time.svg",
            line_chart(
                "Execution time",
                "utterance seconds",
                "mean seconds",
                &series_for(&|r| r.mean_seconds),
            ),
        ),
    ];

    let mut written = Vec::new();
    for (file, content) in charts {
        let path = dir.join(file);
        fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, HeadKind};

    fn mini(arch: Arch) -> ModelConfig {
        ModelConfig {
            encoder_channels: 8,
            encoder_strides: vec![5, 4, 4, 4],
            encoder_kernels: vec![10, 4, 4, 4],
            arch,
            num_layers: 1,
            hidden: if arch == Arch::Bilstm { 6 } else { 8 },
            ffn: 16,
            heads: 2,
            num_clusters: 4,
            head: HeadKind::Linear,
            head_dim: 4,
            head_temperature: 0.1,
            pos_conv_kernel: 3,
            pos_conv_groups: 1,
        }
    }

    #[test]
    fn cross_product_count_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("profile.csv");
        let models = vec![
            ("bilstm".to_string(), mini(Arch::Bilstm)),
            ("transformer".to_string(), mini(Arch::Transformer)),
        ];
        let recs =
            sweep_profile(&models, &[0.2, 0.3, 0.25, 0.35, 0.4], 2, 16000, Some(&p)).unwrap();
        assert_eq!(recs.len(), 10);
        // sorted by (model, length)
        for w in recs.windows(2) {
            assert!(
                (w[0].model_name.as_str(), w[0].utterance_seconds)
                    <= (w[1].model_name.as_str(), w[1].utterance_seconds)
            );
        }
        let text = fs::read_to_string(&p).unwrap();
        let parsed = parse_profile_csv(&text).unwrap();
        assert_eq!(parsed, recs);
        assert_eq!(parse_profile_csv(&records_to_csv(&recs)).unwrap(), recs);
    }

    #[test]
    fn svgs_are_written_per_metric() {
        let dir = tempfile::tempdir().unwrap();
        let models = vec![("m".to_string(), mini(Arch::Bilstm))];
        let recs = sweep_profile(&models, &[0.2, 0.4], 1, 16000, None).unwrap();
        let written = write_profile_svgs(&recs, dir.path()).unwrap();
        assert_eq!(written.len(), 3);
        for p in written {
            let text = fs::read_to_string(p).unwrap();
            assert!(text.starts_with("<svg") && text.ends_with("</svg>\n"));
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(sweep_profile(&[], &[1.0], 1, 16000, None).is_err());
        let models = vec![("m".to_string(), mini(Arch::Bilstm))];
        assert!(sweep_profile(&models, &[], 1, 16000, None).is_err());
    }
}
