//! Minimal RIFF/WAVE reader and writer for PCM16 mono files.

use std::fs;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

fn u16le(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32le(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a PCM16 mono RIFF/WAVE file. Integer samples are scaled by
/// 1/32768 into [−1, 1). When `expected_rate` is given, a differing file
/// rate is an error (no resampling).
pub fn read_wav(path: &Path, expected_rate: Option<u32>) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let wave = parse_wav(&bytes)
        .map_err(|msg| Error::WavFormat(format!("{}: {msg}", path.display())))?;
    if let Some(rate) = expected_rate {
        if wave.0 != rate {
            return Err(Error::SampleRate { found: wave.0, expected: rate });
        }
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Waveform::new(wave.1, wave.0, id)
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<(u32, Vec<f32>), String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32le(bytes, pos + 4) as usize;
        let body_at = pos + 8;
        if body_at + size > bytes.len() {
            return Err("chunk extends past end of file".into());
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err("fmt chunk too short".into());
                }
                fmt = Some((
                    u16le(bytes, body_at),
                    u16le(bytes, body_at + 2),
                    u32le(bytes, body_at + 4),
                    u16le(bytes, body_at + 14),
                ));
            }
            b"data" => data = Some(&bytes[body_at..body_at + size]),
            _ => {}
        }
        pos = body_at + size + (size & 1); // chunks are word-aligned
    }
    let (format, channels, rate, bits) = fmt.ok_or("missing fmt chunk")?;
    if format != 1 {
        return Err(format!("unsupported encoding {format} (only PCM is supported)"));
    }
    if channels != 1 {
        return Err(format!("unsupported channel count {channels} (only mono is supported)"));
    }
    if bits != 16 {
        return Err(format!("unsupported bit depth {bits} (only 16-bit is supported)"));
    }
    let data = data.ok_or("missing data chunk")?;
    let samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Ok((rate, samples))
}

/// Writes a waveform as PCM16 mono, rounding and clamping samples.
pub fn write_wav(wave: &Waveform, path: &Path) -> Result<()> {
    let n = wave.samples.len();
    let data_bytes = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in &wave.samples {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm16_file(rate: u32, channels: u16, samples: &[i16]) -> Vec<u8> {
        let data_bytes = (samples.len() * 2) as u32;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_bytes.to_le_bytes());
        for &s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    #[test]
    fn zeros_round_trip_and_scaling_convention() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        fs::write(&p, pcm16_file(16000, 1, &[0, 0, 0, -32768, 16384])).unwrap();
        let w = read_wav(&p, Some(16000)).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(&w.samples[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(w.samples[3], -1.0);
        assert_eq!(w.samples[4], 0.5);
        assert_eq!(w.id, "a");
    }

    #[test]
    fn stereo_is_an_explicit_unsupported_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        fs::write(&p, pcm16_file(16000, 2, &[0, 0])).unwrap();
        match read_wav(&p, None) {
            Err(Error::WavFormat(msg)) => assert!(msg.contains("mono"), "{msg}"),
            other => panic!("expected WavFormat error, got {other:?}"),
        }
    }

    #[test]
    fn sample_rate_mismatch_is_an_error_not_a_resample() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sr.wav");
        fs::write(&p, pcm16_file(8000, 1, &[1, 2, 3])).unwrap();
        assert!(matches!(
            read_wav(&p, Some(16000)),
            Err(Error::SampleRate { found: 8000, expected: 16000 })
        ));
        assert!(read_wav(&p, None).is_ok());
    }

    #[test]
    fn malformed_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.wav");
        fs::write(&p, b"definitely not audio").unwrap();
        assert!(matches!(read_wav(&p, None), Err(Error::WavFormat(_))));
    }

    #[test]
    fn writer_reader_round_trip_is_quantization_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let samples: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.013).sin() * 0.8).collect();
        let w = Waveform::new(samples, 16000, "rt".into()).unwrap();
        write_wav(&w, &p).unwrap();
        let r = read_wav(&p, Some(16000)).unwrap();
        assert_eq!(r.samples.len(), w.samples.len());
        for (&a, &b) in w.samples.iter().zip(&r.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
        // a second write of the read-back data is byte-identical
        let p2 = dir.path().join("rt2.wav");
        write_wav(&r, &p2).unwrap();
        let r2 = read_wav(&p2, Some(16000)).unwrap();
        assert_eq!(r.samples, r2.samples);
    }
}
