//! Per-frame pseudo-labels and their cache file.
//!
//! Cache layout (versioned): a magic line, a JSON directory line
//! (`version`, `num_clusters`, per-record id and frame count), then all
//! label values as u16 little-endian in record order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mfcc::{mfcc, MfccConfig};
use super::{kmeans, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSequence {
    pub utterance_id: String,
    pub labels: Vec<u16>,
    pub num_clusters: usize,
}

impl PseudoLabelSequence {
    pub fn new(utterance_id: String, labels: Vec<u16>, num_clusters: usize) -> Result<Self> {
        if num_clusters == 0 || num_clusters > u16::MAX as usize + 1 {
            return Err(Error::BadConfig(format!("cluster count {num_clusters} unsupported")));
        }
        for &l in &labels {
            if l as usize >= num_clusters {
                return Err(Error::LabelOutOfRange { label: l as usize, classes: num_clusters });
            }
        }
        Ok(PseudoLabelSequence { utterance_id, labels, num_clusters })
    }

    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

const MAGIC: &str = "distilkit-labels v1";

#[derive(Serialize, Deserialize)]
struct LabelHeader {
    version: u32,
    num_clusters: usize,
    records: Vec<LabelRecord>,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    id: String,
    frames: usize,
}

pub fn save_labels(seqs: &[PseudoLabelSequence], path: &Path) -> Result<()> {
    let num_clusters = seqs.first().map(|s| s.num_clusters).unwrap_or(0);
    for s in seqs {
        if s.num_clusters != num_clusters {
            return Err(Error::BadConfig("mixed cluster counts in one cache".into()));
        }
    }
    let header = LabelHeader {
        version: 1,
        num_clusters,
        records: seqs
            .iter()
            .map(|s| LabelRecord { id: s.utterance_id.clone(), frames: s.frames() })
            .collect(),
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
    buf.push(b'\n');
    for s in seqs {
        for &l in &s.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<Vec<PseudoLabelSequence>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut parts = bytes.splitn(3, |&b| b == b'\n');
    if parts.next().unwrap_or_default() != MAGIC.as_bytes() {
        return Err(Error::CacheMismatch(format!("{}: not a label cache", path.display())));
    }
    let header: LabelHeader = serde_json::from_slice(
        parts.next().ok_or_else(|| Error::CacheMismatch("missing header".into()))?,
    )?;
    if header.version != 1 {
        return Err(Error::CacheMismatch(format!("unsupported version {}", header.version)));
    }
    let mut payload = parts.next().unwrap_or_default();
    let mut out = Vec::with_capacity(header.records.len());
    for rec in header.records {
        let n = rec.frames * 2;
        if payload.len() < n {
            return Err(Error::CacheMismatch("label payload truncated".into()));
        }
        let labels: Vec<u16> =
            payload[..n].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        payload = &payload[n..];
        out.push(PseudoLabelSequence::new(rec.id, labels, header.num_clusters)?);
    }
    if !payload.is_empty() {
        return Err(Error::CacheMismatch(format!("{} trailing bytes", payload.len())));
    }
    Ok(out)
}

/// MFCC → k-means pipeline: fits one model on all frames, assigns each
/// utterance, and truncates labels to the encoder frame count so Eq.-style
/// per-timestep indexing lines up (residual off-by-ones resolved by
/// truncation to the shorter).
pub fn build_pseudo_labels(
    waves: &[Waveform],
    encoder_frames: &[usize],
    mfcc_cfg: &MfccConfig,
    clusters: usize,
    kmeans_iters: usize,
    seed: u64,
) -> Result<(Vec<PseudoLabelSequence>, kmeans::KMeansFit)> {
    if waves.len() != encoder_frames.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} waveforms with {} frame counts",
            waves.len(),
            encoder_frames.len()
        )));
    }
    let mut per_utt: Vec<Vec<Vec<f64>>> = Vec::with_capacity(waves.len());
    for (w, &t_enc) in waves.iter().zip(encoder_frames) {
        let mut rows = mfcc(&w.samples, mfcc_cfg)?;
        rows.truncate(t_enc);
        per_utt.push(rows);
    }
    let all: Vec<Vec<f64>> = per_utt.iter().flatten().cloned().collect();
    let fit = kmeans::kmeans_fit(&all, clusters, kmeans_iters, seed)?;
    let mut out = Vec::with_capacity(waves.len());
    for (w, rows) in waves.iter().zip(&per_utt) {
        let assigned = kmeans::kmeans_assign(rows, &fit.centroids)?;
        let labels: Vec<u16> = assigned.iter().map(|&a| a as u16).collect();
        out.push(PseudoLabelSequence::new(w.id.clone(), labels, clusters)?);
    }
    Ok((out, fit))
}
