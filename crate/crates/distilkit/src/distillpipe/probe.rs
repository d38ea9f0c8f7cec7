//! Linear probe on frozen upstream features: trains only the weighted-sum
//! layer weights and a linear classifier, then reports frame accuracy.

use serde::{Deserialize, Serialize};

use super::teacher::check_alignment;
use super::{Adam, BatchSampler};
use crate::error::{Error, Result};
use crate::losses::{ce_rows, Reduction};
use crate::models::layers::uniform_init;
use crate::models::{weighted_sum_features, Model};
use crate::numerics::{Rng, Tape, Tensor};
use crate::speechdata::{PseudoLabelSequence, Waveform};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 300, lr: 1e-2, batch_size: 4, seed: 11 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    /// Softmax-normalized layer weights after training.
    pub layer_weights: Vec<f64>,
    pub num_layers: usize,
}

/// Freezes the model, extracts per-layer outputs for every utterance, and
/// trains (weighted-sum weights, linear classifier) on the train split.
pub fn probe_eval(
    model: &Model<f32>,
    corpus: &[Waveform],
    labels: &[PseudoLabelSequence],
    train_idx: &[usize],
    heldout_idx: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    check_alignment(corpus, labels, &model.config)?;
    if train_idx.is_empty() {
        return Err(Error::Precondition("empty probe training split".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::BadConfig("probe needs positive steps, batch and lr".into()));
    }

    // frozen feature extraction, one pass
    let mut features: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(corpus.len());
    for w in corpus {
        features.push(model.forward_infer(&w.samples)?.layer_outputs);
    }
    let num_layers = features[0].len();
    let feat_dim = features[0][0].cols();
    let classes = model.config.num_clusters;
    let label_vecs: Vec<Vec<usize>> = labels.iter().map(|l| l.labels_usize()).collect();

    let mut rng = Rng::new(cfg.seed);
    let mut layer_w = Tensor::<f32>::zeros(vec![num_layers]);
    layer_w.requires_grad = true;
    let mut clf_w = uniform_init::<f32>(vec![classes, feat_dim], feat_dim, &mut rng);
    let mut clf_b = Tensor::<f32>::zeros(vec![classes]);
    clf_b.requires_grad = true;

    let mut adam: Adam<f32> = Adam::new(&[num_layers, classes * feat_dim, classes]);
    let mut sampler = BatchSampler::new(train_idx, Rng::new(cfg.seed).fork(0x9e0b));

    for _step in 1..=cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let mut tape: Tape<f32> = Tape::new();
        let wv = tape.param(&layer_w);
        let ww = tape.param(&clf_w);
        let wb = tape.param(&clf_b);
        let mut losses = Vec::with_capacity(batch.len());
        for &u in &batch {
            let layer_vars: Vec<_> = features[u]
                .iter()
                .map(|t| tape.constant(t.data(), t.shape().to_vec()))
                .collect();
            let feat = tape.weighted_sum(&layer_vars, wv);
            let logits = tape.affine(feat, ww, Some(wb));
            losses.push(ce_rows(&mut tape, logits, &label_vecs[u], None, Reduction::Mean)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l);
        }
        let total = tape.scale(total, 1.0 / batch.len() as f32);
        if tape.poisoned().is_some() || !tape.scalar_value(total).is_finite() {
            return Err(Error::Diverged(_step));
        }
        tape.backward(total)?;
        let grads = vec![
            tape.grad(wv).map(|g| g.to_vec()),
            tape.grad(ww).map(|g| g.to_vec()),
            tape.grad(wb).map(|g| g.to_vec()),
        ];
        drop(tape);
        adam.step(vec![&mut layer_w, &mut clf_w, &mut clf_b], &grads, cfg.lr);
    }

    let accuracy = |indices: &[usize]| -> Result<f64> {
        if indices.is_empty() {
            return Ok(f64::NAN);
        }
        let (mut hit, mut total) = (0usize, 0usize);
        for &u in indices {
            let feat = weighted_sum_features(&features[u], layer_w.data())?;
            let logits = crate::numerics::kernels::affine(
                feat.data(),
                clf_w.data(),
                Some(clf_b.data()),
                feat.rows(),
                feat_dim,
                classes,
            );
            for (r, &lab) in label_vecs[u].iter().enumerate() {
                let row = &logits[r * classes..(r + 1) * classes];
                let am = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                total += 1;
                if am == lab {
                    hit += 1;
                }
            }
        }
        Ok(hit as f64 / total as f64)
    };

    let mut coeffs: Vec<f32> = layer_w.data().to_vec();
    crate::numerics::kernels::softmax_rows_inplace(&mut coeffs, 1, num_layers);

    Ok(ProbeReport {
        train_accuracy: accuracy(train_idx)?,
        heldout_accuracy: accuracy(heldout_idx)?,
        layer_weights: coeffs.iter().map(|&v| v as f64).collect(),
        num_layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, HeadKind, ModelConfig};
    use crate::speechdata::{synth_corpus, SynthConfig};

    fn fixture() -> (Model<f32>, Vec<Waveform>, Vec<PseudoLabelSequence>) {
        let cfg = ModelConfig {
            encoder_channels: 8,
            encoder_strides: vec![5, 4, 4, 4],
            encoder_kernels: vec![10, 4, 4, 4],
            arch: Arch::Bilstm,
            num_layers: 2,
            hidden: 5,
            ffn: 0,
            heads: 0,
            num_clusters: 3,
            head: HeadKind::Linear,
            head_dim: 4,
            head_temperature: 0.1,
            pos_conv_kernel: 3,
            pos_conv_groups: 1,
        };
        let model = Model::init(&cfg, &mut Rng::new(2)).unwrap();
        let synth = SynthConfig {
            num_utterances: 5,
            duration_range: (0.2, 0.3),
            num_latent_classes: 3,
            sample_rate: 16000,
            seed: 6,
        };
        let corpus: Vec<Waveform> =
            synth_corpus(&synth).unwrap().into_iter().map(|u| u.waveform).collect();
        let labels = corpus
            .iter()
            .map(|w| {
                let t = cfg.frame_count(w.samples.len()).unwrap();
                PseudoLabelSequence::new(
                    w.id.clone(),
                    (0..t).map(|i| (i % 3) as u16).collect(),
                    3,
                )
                .unwrap()
            })
            .collect();
        (model, corpus, labels)
    }

    #[test]
    fn probe_is_deterministic_given_seed() {
        let (model, corpus, labels) = fixture();
        let cfg = ProbeConfig { steps: 20, ..Default::default() };
        let a = probe_eval(&model, &corpus, &labels, &[0, 1, 2, 3], &[4], &cfg).unwrap();
        let b = probe_eval(&model, &corpus, &labels, &[0, 1, 2, 3], &[4], &cfg).unwrap();
        assert_eq!(a.train_accuracy, b.train_accuracy);
        assert_eq!(a.heldout_accuracy, b.heldout_accuracy);
        assert_eq!(a.layer_weights, b.layer_weights);
        assert_eq!(a.num_layers, 2);
    }

    #[test]
    fn probe_weights_are_a_distribution() {
        let (model, corpus, labels) = fixture();
        let cfg = ProbeConfig { steps: 10, ..Default::default() };
        let rep = probe_eval(&model, &corpus, &labels, &[0, 1, 2, 3], &[4], &cfg).unwrap();
        let sum: f64 = rep.layer_weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
        assert!(rep.layer_weights.iter().all(|&w| w >= 0.0));
    }
}
