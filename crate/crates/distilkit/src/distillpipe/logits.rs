//! Teacher logit cache: per-utterance T×C float32 logits keyed by
//! utterance id, with the teacher checkpoint hash in the header.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::Tensor;
use crate::speechdata::Waveform;

const MAGIC: &str = "distilkit-logits v1";

pub struct LogitCache {
    pub num_clusters: usize,
    pub teacher_hash: String,
    records: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    version: u32,
    num_clusters: usize,
    teacher_hash: String,
    records: Vec<CacheRecord>,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    id: String,
    frames: usize,
}

impl LogitCache {
    pub fn new(num_clusters: usize, teacher_hash: String) -> Self {
        LogitCache { num_clusters, teacher_hash, records: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, id: String, logits: Tensor<f32>) -> Result<()> {
        if logits.cols() != self.num_clusters {
            return Err(Error::ShapeMismatch(format!(
                "logit record has {} columns, cache expects {}",
                logits.cols(),
                self.num_clusters
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Precondition(format!("duplicate utterance id '{id}'")));
        }
        self.index.insert(id.clone(), self.records.len());
        self.records.push((id, logits));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Tensor<f32>> {
        self.index.get(id).map(|&i| &self.records[i].1)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(id, _)| id.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CacheHeader {
            version: 1,
            num_clusters: self.num_clusters,
            teacher_hash: self.teacher_hash.clone(),
            records: self
                .records
                .iter()
                .map(|(id, t)| CacheRecord { id: id.clone(), frames: t.rows() })
                .collect(),
        };
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC.as_bytes());
        buf.push(b'\n');
        buf.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
        buf.push(b'\n');
        for (_, t) in &self.records {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<LogitCache> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut parts = bytes.splitn(3, |&b| b == b'\n');
        if parts.next().unwrap_or_default() != MAGIC.as_bytes() {
            return Err(Error::CacheMismatch(format!("{}: not a logit cache", path.display())));
        }
        let header: CacheHeader = serde_json::from_slice(
            parts.next().ok_or_else(|| Error::CacheMismatch("missing header".into()))?,
        )?;
        if header.version != 1 {
            return Err(Error::CacheMismatch(format!("unsupported version {}", header.version)));
        }
        let mut payload = parts.next().unwrap_or_default();
        let mut cache = LogitCache::new(header.num_clusters, header.teacher_hash);
        for rec in header.records {
            let n = rec.frames * header.num_clusters * 4;
            if payload.len() < n {
                return Err(Error::CacheMismatch("logit payload truncated".into()));
            }
            let data: Vec<f32> = payload[..n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            payload = &payload[n..];
            cache.insert(
                rec.id,
                Tensor::new(vec![rec.frames, header.num_clusters], data)?,
            )?;
        }
        if !payload.is_empty() {
            return Err(Error::CacheMismatch(format!("{} trailing bytes", payload.len())));
        }
        Ok(cache)
    }
}

/// Runs the teacher unmasked over the corpus and collects per-frame
/// logits. Deterministic: re-export of the same teacher is byte-identical.
pub fn export_teacher_logits(
    teacher: &Model<f32>,
    corpus: &[Waveform],
    teacher_hash: String,
) -> Result<LogitCache> {
    let mut cache = LogitCache::new(teacher.config.num_clusters, teacher_hash);
    for w in corpus {
        let out = teacher.forward_infer(&w.samples)?;
        cache.insert(w.id.clone(), out.logits)?;
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, HeadKind, ModelConfig};
    use crate::numerics::Rng;
    use crate::speechdata::{synth_corpus, SynthConfig};

    fn tiny_teacher() -> Model<f32> {
        let cfg = ModelConfig {
            encoder_channels: 6,
            encoder_strides: vec![5, 4, 4, 4],
            encoder_kernels: vec![10, 4, 4, 4],
            arch: Arch::Transformer,
            num_layers: 1,
            hidden: 12,
            ffn: 24,
            heads: 2,
            num_clusters: 5,
            head: HeadKind::Cosine,
            head_dim: 6,
            head_temperature: 0.1,
            pos_conv_kernel: 3,
            pos_conv_groups: 1,
        };
        Model::init(&cfg, &mut Rng::new(5)).unwrap()
    }

    #[test]
    fn export_covers_corpus_and_matches_live_argmax() {
        let teacher = tiny_teacher();
        let synth = SynthConfig {
            num_utterances: 3,
            duration_range: (0.2, 0.25),
            num_latent_classes: 2,
            sample_rate: 16000,
            seed: 10,
        };
        let corpus: Vec<Waveform> =
            synth_corpus(&synth).unwrap().into_iter().map(|u| u.waveform).collect();
        let cache = export_teacher_logits(&teacher, &corpus, "h".into()).unwrap();
        assert_eq!(cache.len(), corpus.len());
        for w in &corpus {
            let live = teacher.forward_infer(&w.samples).unwrap().logits;
            let cached = cache.get(&w.id).unwrap();
            assert_eq!(live.shape(), cached.shape());
            let c = live.cols();
            for r in 0..live.rows() {
                let am = |t: &Tensor<f32>| {
                    t.row(r)
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                        .map(|(i, _)| i)
                        .unwrap()
                };
                assert_eq!(am(&live), am(cached));
            }
            let _ = c;
        }
    }

    #[test]
    fn save_load_reexport_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let teacher = tiny_teacher();
        let synth = SynthConfig {
            num_utterances: 2,
            duration_range: (0.2, 0.22),
            num_latent_classes: 2,
            sample_rate: 16000,
            seed: 11,
        };
        let corpus: Vec<Waveform> =
            synth_corpus(&synth).unwrap().into_iter().map(|u| u.waveform).collect();
        let p1 = dir.path().join("a.cache");
        let p2 = dir.path().join("b.cache");
        export_teacher_logits(&teacher, &corpus, "hash".into()).unwrap().save(&p1).unwrap();
        export_teacher_logits(&teacher, &corpus, "hash".into()).unwrap().save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let loaded = LogitCache::load(&p1).unwrap();
        assert_eq!(loaded.teacher_hash, "hash");
        let p3 = dir.path().join("c.cache");
        loaded.save(&p3).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p3).unwrap());
    }
}
