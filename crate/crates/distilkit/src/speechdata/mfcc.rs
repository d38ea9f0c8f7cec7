//! Mel-frequency cepstral coefficients.
//!
//! Per frame: pre-emphasis, Hann window, power spectrum (rustfft), mel
//! filterbank, log with floor, orthonormal DCT-II, first `num_ceps`
//! coefficients kept. The default hop is 20 ms so rows align with the
//! conv encoder's frame rate.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: u32,
    /// Analysis window in samples (25 ms at 16 kHz).
    pub frame_len: usize,
    /// Hop in samples (20 ms at 16 kHz, matching the encoder frame rate).
    pub hop: usize,
    pub num_mel: usize,
    pub num_ceps: usize,
    pub pre_emphasis: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16000,
            frame_len: 400,
            hop: 320,
            num_mel: 26,
            num_ceps: 13,
            pre_emphasis: 0.97,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.hop == 0 || self.num_mel == 0 || self.num_ceps == 0 {
            return Err(Error::BadConfig("mfcc sizes must be positive".into()));
        }
        if self.num_ceps > self.num_mel {
            return Err(Error::BadConfig("num_ceps cannot exceed num_mel".into()));
        }
        Ok(())
    }

    /// Frame-count arithmetic: ⌊(N − frame)/hop⌋ + 1.
    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        if samples < self.frame_len {
            None
        } else {
            Some((samples - self.frame_len) / self.hop + 1)
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided spectrum.
fn mel_filterbank(cfg: &MfccConfig, fft_size: usize) -> Vec<Vec<(usize, f64)>> {
    let bins = fft_size / 2 + 1;
    let sr = cfg.sample_rate as f64;
    let mel_max = hz_to_mel(sr / 2.0);
    let points: Vec<f64> = (0..cfg.num_mel + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.num_mel + 1) as f64))
        .collect();
    let to_bin = |hz: f64| (hz * fft_size as f64 / sr).floor() as usize;
    let mut filters = Vec::with_capacity(cfg.num_mel);
    for m in 0..cfg.num_mel {
        let (lo, mid, hi) = (to_bin(points[m]), to_bin(points[m + 1]), to_bin(points[m + 2]));
        let mut taps = Vec::new();
        for b in lo..=hi.min(bins - 1) {
            let w = if b < mid {
                if mid == lo { 1.0 } else { (b - lo) as f64 / (mid - lo) as f64 }
            } else if hi == mid {
                1.0
            } else {
                (hi - b) as f64 / (hi - mid) as f64
            };
            if w > 0.0 {
                taps.push((b, w));
            }
        }
        filters.push(taps);
    }
    filters
}

const LOG_FLOOR: f64 = 1e-10;

/// T'×num_ceps coefficient matrix.
pub fn mfcc(samples: &[f32], cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let frames = cfg.frame_count(samples.len()).ok_or_else(|| {
        Error::InputTooShort(format!(
            "{} samples is shorter than one {}-sample analysis frame",
            samples.len(),
            cfg.frame_len
        ))
    })?;

    // pre-emphasis over the whole signal
    let mut emphasized = Vec::with_capacity(samples.len());
    let mut prev = 0.0f64;
    for &s in samples {
        let v = s as f64;
        emphasized.push(v - cfg.pre_emphasis * prev);
        prev = v;
    }

    let fft_size = cfg.frame_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let window: Vec<f64> = (0..cfg.frame_len)
        .map(|n| {
            0.5 - 0.5
                * (std::f64::consts::TAU * n as f64 / (cfg.frame_len - 1) as f64).cos()
        })
        .collect();
    let filters = mel_filterbank(cfg, fft_size);

    // orthonormal DCT-II basis
    let m = cfg.num_mel as f64;
    let dct: Vec<Vec<f64>> = (0..cfg.num_ceps)
        .map(|i| {
            let scale = if i == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            (0..cfg.num_mel)
                .map(|j| {
                    scale
                        * (std::f64::consts::PI * i as f64 * (j as f64 + 0.5) / m).cos()
                })
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for f in 0..frames {
        let start = f * cfg.hop;
        for i in 0..fft_size {
            let v = if i < cfg.frame_len { emphasized[start + i] * window[i] } else { 0.0 };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> =
            buf[..fft_size / 2 + 1].iter().map(|c| c.norm_sqr() / fft_size as f64).collect();
        let log_mel: Vec<f64> = filters
            .iter()
            .map(|taps| {
                let e: f64 = taps.iter().map(|&(b, w)| power[b] * w).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        let ceps: Vec<f64> = dct
            .iter()
            .map(|row| row.iter().zip(&log_mel).map(|(&d, &e)| d * e).sum())
            .collect();
        out.push(ceps);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64) -> Vec<f32> {
        (0..(16000.0 * seconds) as usize)
            .map(|i| (std::f64::consts::TAU * freq * i as f64 / 16000.0).sin() as f32 * 0.5)
            .collect()
    }

    #[test]
    fn row_count_matches_hop_arithmetic() {
        let cfg = MfccConfig::default();
        for n in [400usize, 401, 719, 720, 721, 16000] {
            let samples = vec![0.0f32; n];
            let rows = mfcc(&samples, &cfg).unwrap().len();
            assert_eq!(rows, (n - 400) / 320 + 1, "n={n}");
        }
        assert!(matches!(mfcc(&vec![0.0; 399], &cfg), Err(Error::InputTooShort(_))));
    }

    #[test]
    fn silence_yields_constant_rows() {
        let cfg = MfccConfig::default();
        let rows = mfcc(&vec![0.0f32; 4000], &cfg).unwrap();
        for row in &rows[1..] {
            for (a, b) in row.iter().zip(&rows[0]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distinct_tones_are_separated_beyond_within_class_spread() {
        let cfg = MfccConfig::default();
        let a = mfcc(&tone(440.0, 0.5), &cfg).unwrap();
        let b = mfcc(&tone(3000.0, 0.5), &cfg).unwrap();
        let dist = |x: &[f64], y: &[f64]| -> f64 {
            x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        };
        // mean within-class spread (adjacent frames of the same tone)
        let spread_a: f64 =
            a.windows(2).map(|w| dist(&w[0], &w[1])).sum::<f64>() / (a.len() - 1) as f64;
        let spread_b: f64 =
            b.windows(2).map(|w| dist(&w[0], &w[1])).sum::<f64>() / (b.len() - 1) as f64;
        let between = dist(&a[a.len() / 2], &b[b.len() / 2]);
        assert!(
            between > 5.0 * spread_a.max(spread_b),
            "between {between}, spreads {spread_a} {spread_b}"
        );
    }
}
