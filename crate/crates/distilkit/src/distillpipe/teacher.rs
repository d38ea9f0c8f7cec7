//! Teacher pre-training: masked cluster prediction over pseudo-labels.

use super::{lr_schedule, Adam, BatchSampler, MetricsLog, MetricsRow, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{ce_rows, Reduction};
use crate::models::{MaskSpec, Model, ModelConfig};
use crate::numerics::{sc, Rng, Scalar, Tape};
use crate::speechdata::{PseudoLabelSequence, Waveform};

pub struct TeacherOutcome<S: Scalar> {
    pub model: Model<S>,
    pub metrics: MetricsLog,
    /// Batch elements whose sampled mask came up empty (loss contributed 0).
    pub empty_mask_count: u64,
}

pub(crate) fn mask_seed(base: u64, step: u64, slot: u64) -> u64 {
    let mut r = Rng::new(base).fork(step).fork(slot);
    r.next_u64()
}

pub(crate) fn check_alignment(
    corpus: &[Waveform],
    labels: &[PseudoLabelSequence],
    cfg: &ModelConfig,
) -> Result<()> {
    if corpus.is_empty() || corpus.len() != labels.len() {
        return Err(Error::Precondition(format!(
            "corpus has {} utterances, labels have {}",
            corpus.len(),
            labels.len()
        )));
    }
    for (w, l) in corpus.iter().zip(labels) {
        if l.num_clusters != cfg.num_clusters {
            return Err(Error::CacheMismatch(format!(
                "labels carry {} clusters, model expects {}",
                l.num_clusters, cfg.num_clusters
            )));
        }
        let frames = cfg.frame_count(w.samples.len())?;
        if l.frames() != frames {
            return Err(Error::CacheMismatch(format!(
                "utterance '{}': {} labels for {} encoder frames",
                w.id,
                l.frames(),
                frames
            )));
        }
    }
    Ok(())
}

fn to_scalar<S: Scalar>(w: &Waveform) -> Vec<S> {
    w.samples.iter().map(|&v| sc(v as f64)).collect()
}

/// Trains a fresh model on the masked cluster-prediction objective.
/// Deterministic given the config seed. Aborts on non-finite loss.
pub fn train_teacher<S: Scalar>(
    corpus: &[Waveform],
    labels: &[PseudoLabelSequence],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mask_policy: &MaskSpec,
) -> Result<TeacherOutcome<S>> {
    train_cfg.validate()?;
    mask_policy.validate()?;
    check_alignment(corpus, labels, model_cfg)?;

    let mut model: Model<S> = Model::init(model_cfg, &mut Rng::new(train_cfg.seed))?;
    let sizes: Vec<usize> = model.named_parameters().iter().map(|(_, t)| t.numel()).collect();
    let mut adam: Adam<S> = Adam::new(&sizes);
    let all: Vec<usize> = (0..corpus.len()).collect();
    let mut sampler = BatchSampler::new(&all, Rng::new(train_cfg.seed).fork(0xba7c4));

    let waves: Vec<Vec<S>> = corpus.iter().map(to_scalar).collect();
    let label_vecs: Vec<Vec<usize>> = labels.iter().map(|l| l.labels_usize()).collect();

    let mut metrics = MetricsLog::default();
    let mut empty_mask_count = 0u64;

    let nparams = sizes.len();
    for step in 1..=train_cfg.total_steps {
        let lr = lr_schedule(step, train_cfg)?;
        let batch = sampler.next_batch(train_cfg.batch_size);

        let outs = super::run_slots(batch.len(), |slot| {
            let u = batch[slot];
            let spec = mask_policy.reseeded(mask_seed(train_cfg.seed, step, slot as u64));
            let mut tape: Tape<S> = Tape::new();
            let bound = model.bind(&mut tape);
            let (_, logits, mask) = bound.forward(&mut tape, &waves[u], Some(&spec))?;
            let loss = ce_rows(&mut tape, logits, &label_vecs[u], Some(&mask), Reduction::Mean)?;
            if tape.poisoned().is_some() {
                return Err(Error::Diverged(step));
            }
            let loss_val = tape.scalar_value(loss).to_f64c();

            let c = model_cfg.num_clusters;
            let data = tape.data(logits);
            let (mut hits, mut total) = (0usize, 0usize);
            for &row in &mask {
                let frame = &data[row * c..(row + 1) * c];
                let argmax = frame
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                total += 1;
                if argmax == label_vecs[u][row] {
                    hits += 1;
                }
            }
            let empty_mask = mask.is_empty();
            let grads = if empty_mask {
                // loss is a constant zero; nothing flows
                vec![None; nparams]
            } else {
                tape.backward(loss)?;
                bound.param_vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect()
            };
            Ok(super::SlotOutput {
                grads,
                loss: loss_val,
                ce: loss_val,
                distill: 0.0,
                agree_hits: hits,
                agree_total: total,
                empty_mask,
                max_gap: 0.0,
            })
        })?;

        let loss_val = outs.iter().map(|o| o.loss).sum::<f64>() / batch.len() as f64;
        if !loss_val.is_finite() {
            return Err(Error::Diverged(step));
        }
        empty_mask_count += outs.iter().filter(|o| o.empty_mask).count() as u64;
        let (hit, masked_total) = outs
            .iter()
            .fold((0usize, 0usize), |(h, t), o| (h + o.agree_hits, t + o.agree_total));
        let grads = super::reduce_grads(&outs, nparams);
        drop(outs);
        adam.step(model.parameters_mut(), &grads, lr);

        let accuracy = if masked_total > 0 { hit as f64 / masked_total as f64 } else { 0.0 };
        metrics.push(MetricsRow {
            step,
            lr,
            ce: loss_val,
            kd_or_dkd: 0.0,
            total: loss_val,
            agreement: accuracy,
        });
    }

    Ok(TeacherOutcome { model, metrics, empty_mask_count })
}

/// Masked-frame pseudo-label accuracy of a trained model over a corpus,
/// with deterministic evaluation masks.
pub fn eval_masked_accuracy<S: Scalar>(
    model: &Model<S>,
    corpus: &[Waveform],
    labels: &[PseudoLabelSequence],
    mask_policy: &MaskSpec,
    eval_seed: u64,
) -> Result<f64> {
    check_alignment(corpus, labels, &model.config)?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for (i, (w, l)) in corpus.iter().zip(labels).enumerate() {
        let wave = to_scalar::<S>(w);
        let spec = mask_policy.reseeded(mask_seed(eval_seed, 0, i as u64));
        let mut tape: Tape<S> = Tape::new();
        let fwd = model.forward_train(&mut tape, &wave, Some(&spec))?;
        let data = tape.data(fwd.logits);
        let c = model.config.num_clusters;
        let lab = l.labels_usize();
        for &row in &fwd.mask {
            let frame = &data[row * c..(row + 1) * c];
            let argmax = frame
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            total += 1;
            if argmax == lab[row] {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Precondition("no masked frames in evaluation".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, HeadKind};
    use crate::speechdata::{synth_corpus, SynthConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            encoder_channels: 8,
            encoder_strides: vec![5, 4, 4, 4],
            encoder_kernels: vec![10, 4, 4, 4],
            arch: Arch::Transformer,
            num_layers: 1,
            hidden: 16,
            ffn: 32,
            heads: 2,
            num_clusters: 4,
            head: HeadKind::Linear,
            head_dim: 8,
            head_temperature: 0.1,
            pos_conv_kernel: 3,
            pos_conv_groups: 1,
        }
    }

    fn tiny_data(cfg: &ModelConfig) -> (Vec<Waveform>, Vec<PseudoLabelSequence>) {
        let synth = SynthConfig {
            num_utterances: 4,
            duration_range: (0.2, 0.3),
            num_latent_classes: 4,
            sample_rate: 16000,
            seed: 3,
        };
        let corpus = synth_corpus(&synth).unwrap();
        let waves: Vec<Waveform> = corpus.iter().map(|u| u.waveform.clone()).collect();
        let labels = waves
            .iter()
            .map(|w| {
                let t = cfg.frame_count(w.samples.len()).unwrap();
                let labs: Vec<u16> = (0..t).map(|i| (i % 4) as u16).collect();
                PseudoLabelSequence::new(w.id.clone(), labs, 4).unwrap()
            })
            .collect();
        (waves, labels)
    }

    fn tiny_train_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            warmup_steps: steps / 10,
            peak_lr: 2e-4,
            batch_size: 2,
            ..TrainConfig::preset("toy").unwrap()
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = tiny_cfg();
        let (waves, labels) = tiny_data(&cfg);
        let tc = tiny_train_cfg(0);
        let mask = MaskSpec::new(2, 0.2, 0).unwrap();
        let out: TeacherOutcome<f32> =
            train_teacher(&waves, &labels, &cfg, &tc, &mask).unwrap();
        let fresh: Model<f32> = Model::init(&cfg, &mut Rng::new(tc.seed)).unwrap();
        for ((_, a), (_, b)) in
            out.model.named_parameters().iter().zip(fresh.named_parameters().iter())
        {
            assert_eq!(a.data(), b.data());
        }
        assert!(out.metrics.rows.is_empty());
    }

    #[test]
    fn same_seed_same_final_weights() {
        let cfg = tiny_cfg();
        let (waves, labels) = tiny_data(&cfg);
        let tc = tiny_train_cfg(12);
        let mask = MaskSpec::new(2, 0.3, 0).unwrap();
        let run = || {
            let out: TeacherOutcome<f32> =
                train_teacher(&waves, &labels, &cfg, &tc, &mask).unwrap();
            let bits: Vec<u64> = out
                .model
                .named_parameters()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.bits()))
                .collect();
            (bits, out.metrics.to_csv_string())
        };
        let (a_bits, a_csv) = run();
        let (b_bits, b_csv) = run();
        assert_eq!(a_bits, b_bits);
        assert_eq!(a_csv, b_csv);
    }

    #[test]
    fn loss_moves_within_a_few_steps() {
        let cfg = tiny_cfg();
        let (waves, labels) = tiny_data(&cfg);
        let tc = tiny_train_cfg(30);
        let mask = MaskSpec::new(2, 0.4, 0).unwrap();
        let out: TeacherOutcome<f32> =
            train_teacher(&waves, &labels, &cfg, &tc, &mask).unwrap();
        assert_eq!(out.metrics.rows.len(), 30);
        let first = out.metrics.rows[0].total;
        let last = out.metrics.rows.last().unwrap().total;
        assert!(first.is_finite() && last.is_finite());
    }

    #[test]
    fn misaligned_labels_are_rejected() {
        let cfg = tiny_cfg();
        let (waves, mut labels) = tiny_data(&cfg);
        labels[0] = PseudoLabelSequence::new("bad".into(), vec![0, 1], 4).unwrap();
        let tc = tiny_train_cfg(1);
        let mask = MaskSpec::new(2, 0.3, 0).unwrap();
        assert!(matches!(
            train_teacher::<f32>(&waves, &labels, &cfg, &tc, &mask),
            Err(Error::CacheMismatch(_))
        ));
    }
}
