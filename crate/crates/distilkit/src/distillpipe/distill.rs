//! Student distillation: per-frame cross-entropy against pseudo-labels
//! combined with KD or DKD against cached teacher logits.
//!
//! The f64 verification mode routes the distillation term of both modes
//! through the decomposition kernel with per-frame β = 1 − p_t^T (α = 1
//! for kd mode), and asserts at every step that the directly evaluated KD
//! loss agrees with the decomposed value within 1e-9 per frame. Two runs
//! that differ only in `mode` therefore follow bit-identical parameter
//! trajectories, which is the point: the identity holds end-to-end, not
//! just on random samples.

use super::teacher::{check_alignment, mask_seed};
use super::{lr_schedule, Adam, BatchSampler, LogitCache, MetricsLog, MetricsRow, Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{ce_rows, decomposition_gap, dkd_rows, kd_rows, BetaMode, Reduction};
use crate::models::{MaskSpec, Model, ModelConfig};
use crate::numerics::{sc, Rng, Scalar, Tape, Var};
use crate::speechdata::{PseudoLabelSequence, Waveform};

pub const EQUIVALENCE_GAP_TOLERANCE: f64 = 1e-9;

pub struct DistillOutcome<S: Scalar> {
    pub model: Model<S>,
    pub metrics: MetricsLog,
    /// Student-teacher argmax agreement on the held-out split (None when
    /// the split is empty).
    pub heldout_agreement: Option<f64>,
    /// Largest per-frame |direct KD − decomposed| seen (verification mode).
    pub max_equivalence_gap: f64,
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap()
}

fn check_cache(
    corpus: &[Waveform],
    labels: &[PseudoLabelSequence],
    cache: &LogitCache,
    cfg: &ModelConfig,
) -> Result<()> {
    if cache.num_clusters != cfg.num_clusters {
        return Err(Error::CacheMismatch(format!(
            "cache carries {} clusters, student expects {}",
            cache.num_clusters, cfg.num_clusters
        )));
    }
    for (w, l) in corpus.iter().zip(labels) {
        let rec = cache.get(&w.id).ok_or_else(|| {
            Error::CacheMismatch(format!("utterance '{}' missing from logit cache", w.id))
        })?;
        let frames = cfg.frame_count(w.samples.len())?;
        if rec.rows() != frames || l.frames() != frames {
            return Err(Error::CacheMismatch(format!(
                "utterance '{}': {} cached rows / {} labels for {} student frames",
                w.id,
                rec.rows(),
                l.frames(),
                frames
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn distill_term<S: Scalar>(
    tape: &mut Tape<S>,
    teacher_row_data: &[S],
    student_logits: Var,
    targets: &[usize],
    cfg: &TrainConfig,
    max_gap: &mut f64,
) -> Result<Var> {
    if cfg.verify_equivalence {
        let (rows, cols) =
            (tape.value(student_logits).rows(), tape.value(student_logits).cols());
        let gap = decomposition_gap(
            teacher_row_data,
            tape.data(student_logits),
            targets,
            rows,
            cols,
            cfg.tau,
        )?;
        if gap > *max_gap {
            *max_gap = gap;
        }
        if gap > EQUIVALENCE_GAP_TOLERANCE {
            return Err(Error::Verification(format!(
                "decomposition gap {gap} exceeds {EQUIVALENCE_GAP_TOLERANCE}"
            )));
        }
        let alpha = match cfg.mode {
            Mode::Kd => 1.0,
            Mode::Dkd => cfg.alpha,
        };
        return dkd_rows(
            tape,
            teacher_row_data,
            student_logits,
            targets,
            cfg.tau,
            alpha,
            BetaMode::DynamicOneMinusTeacherTarget,
            Reduction::Mean,
        );
    }
    match cfg.mode {
        Mode::Kd => kd_rows(tape, teacher_row_data, student_logits, cfg.tau, Reduction::Mean),
        Mode::Dkd => {
            let beta = if cfg.dynamic_beta {
                BetaMode::DynamicOneMinusTeacherTarget
            } else {
                BetaMode::Constant(cfg.beta)
            };
            dkd_rows(
                tape,
                teacher_row_data,
                student_logits,
                targets,
                cfg.tau,
                cfg.alpha,
                beta,
                Reduction::Mean,
            )
        }
    }
}

/// Distills a fresh student against cached teacher logits over the train
/// split; the student input is unmasked unless `student_mask` is given.
#[allow(clippy::too_many_arguments)]
pub fn distill_student<S: Scalar>(
    corpus: &[Waveform],
    labels: &[PseudoLabelSequence],
    cache: &LogitCache,
    student_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_idx: &[usize],
    heldout_idx: &[usize],
    student_mask: Option<&MaskSpec>,
) -> Result<DistillOutcome<S>> {
    train_cfg.validate()?;
    check_alignment(corpus, labels, student_cfg)?;
    check_cache(corpus, labels, cache, student_cfg)?;
    if train_idx.is_empty() {
        return Err(Error::Precondition("empty training split".into()));
    }

    let mut model: Model<S> = Model::init(student_cfg, &mut Rng::new(train_cfg.seed))?;
    let sizes: Vec<usize> = model.named_parameters().iter().map(|(_, t)| t.numel()).collect();
    let mut adam: Adam<S> = Adam::new(&sizes);
    let mut sampler = BatchSampler::new(train_idx, Rng::new(train_cfg.seed).fork(0xd151));

    let waves: Vec<Vec<S>> =
        corpus.iter().map(|w| w.samples.iter().map(|&v| sc(v as f64)).collect()).collect();
    let label_vecs: Vec<Vec<usize>> = labels.iter().map(|l| l.labels_usize()).collect();
    let teacher_rows: Vec<Vec<S>> = corpus
        .iter()
        .map(|w| cache.get(&w.id).unwrap().data().iter().map(|&v| sc(v as f64)).collect())
        .collect();

    let mut metrics = MetricsLog::default();
    let mut max_gap = 0.0f64;
    let c = student_cfg.num_clusters;

    let nparams = sizes.len();
    for step in 1..=train_cfg.total_steps {
        let lr = lr_schedule(step, train_cfg)?;
        let batch = sampler.next_batch(train_cfg.batch_size);

        let outs = super::run_slots(batch.len(), |slot| {
            let u = batch[slot];
            let spec = student_mask
                .map(|m| m.reseeded(mask_seed(train_cfg.seed ^ 0x5a5a, step, slot as u64)));
            let mut tape: Tape<S> = Tape::new();
            let bound = model.bind(&mut tape);
            let (_, logits, _) = bound.forward(&mut tape, &waves[u], spec.as_ref())?;
            let ce = ce_rows(&mut tape, logits, &label_vecs[u], None, Reduction::Mean)?;
            let mut gap = 0.0f64;
            let distill =
                distill_term(&mut tape, &teacher_rows[u], logits, &label_vecs[u], train_cfg, &mut gap)?;
            let total = tape.add_scaled(
                ce,
                distill,
                sc(train_cfg.ce_weight),
                sc(train_cfg.distill_weight),
            );
            if tape.poisoned().is_some() {
                return Err(Error::Diverged(step));
            }
            let (mut hits, mut seen) = (0usize, 0usize);
            let sdata = tape.data(logits);
            for r in 0..label_vecs[u].len() {
                seen += 1;
                if argmax(&sdata[r * c..(r + 1) * c]) == argmax(&teacher_rows[u][r * c..(r + 1) * c])
                {
                    hits += 1;
                }
            }
            let out = super::SlotOutput {
                loss: tape.scalar_value(total).to_f64c(),
                ce: tape.scalar_value(ce).to_f64c(),
                distill: tape.scalar_value(distill).to_f64c(),
                agree_hits: hits,
                agree_total: seen,
                empty_mask: false,
                max_gap: gap,
                grads: {
                    tape.backward(total)?;
                    bound.param_vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect()
                },
            };
            Ok(out)
        })?;

        let loss_val = outs.iter().map(|o| o.loss).sum::<f64>() / batch.len() as f64;
        if !loss_val.is_finite() {
            return Err(Error::Diverged(step));
        }
        let ce_mean = outs.iter().map(|o| o.ce).sum::<f64>() / batch.len() as f64;
        let distill_mean = outs.iter().map(|o| o.distill).sum::<f64>() / batch.len() as f64;
        let (agree, frames_seen) = outs
            .iter()
            .fold((0usize, 0usize), |(h, t), o| (h + o.agree_hits, t + o.agree_total));
        for o in &outs {
            if o.max_gap > max_gap {
                max_gap = o.max_gap;
            }
        }
        let grads = super::reduce_grads(&outs, nparams);
        drop(outs);
        adam.step(model.parameters_mut(), &grads, lr);

        metrics.push(MetricsRow {
            step,
            lr,
            ce: ce_mean,
            kd_or_dkd: distill_mean,
            total: loss_val,
            agreement: agree as f64 / frames_seen.max(1) as f64,
        });
    }

    let heldout_agreement = if heldout_idx.is_empty() {
        None
    } else {
        Some(eval_agreement(&model, corpus, cache, heldout_idx)?)
    };

    Ok(DistillOutcome { model, metrics, heldout_agreement, max_equivalence_gap: max_gap })
}

/// Frame-level argmax agreement between a student and the cached teacher
/// logits over the given utterances (unmasked forward).
pub fn eval_agreement<S: Scalar>(
    student: &Model<S>,
    corpus: &[Waveform],
    cache: &LogitCache,
    indices: &[usize],
) -> Result<f64> {
    let c = student.config.num_clusters;
    let (mut agree, mut total) = (0usize, 0usize);
    for &i in indices {
        let w = &corpus[i];
        let wave: Vec<S> = w.samples.iter().map(|&v| sc(v as f64)).collect();
        let out = student.forward_infer(&wave)?;
        let teacher = cache
            .get(&w.id)
            .ok_or_else(|| Error::CacheMismatch(format!("'{}' missing from cache", w.id)))?;
        let sdata = out.logits.data();
        for r in 0..out.logits.rows().min(teacher.rows()) {
            total += 1;
            let s = argmax(&sdata[r * c..(r + 1) * c]);
            let t = argmax(teacher.row(r));
            if s == t {
                agree += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Precondition("no frames to evaluate agreement on".into()));
    }
    Ok(agree as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, HeadKind};
    use crate::numerics::Tensor;
    use crate::speechdata::{synth_corpus, SynthConfig};

    fn student_cfg() -> ModelConfig {
        ModelConfig {
            encoder_channels: 8,
            encoder_strides: vec![5, 4, 4, 4],
            encoder_kernels: vec![10, 4, 4, 4],
            arch: Arch::Bilstm,
            num_layers: 1,
            hidden: 6,
            ffn: 0,
            heads: 0,
            num_clusters: 4,
            head: HeadKind::Linear,
            head_dim: 4,
            head_temperature: 0.1,
            pos_conv_kernel: 3,
            pos_conv_groups: 1,
        }
    }

    fn fixture() -> (Vec<Waveform>, Vec<PseudoLabelSequence>, LogitCache) {
        let cfg = student_cfg();
        let synth = SynthConfig {
            num_utterances: 4,
            duration_range: (0.2, 0.3),
            num_latent_classes: 4,
            sample_rate: 16000,
            seed: 17,
        };
        let corpus: Vec<Waveform> =
            synth_corpus(&synth).unwrap().into_iter().map(|u| u.waveform).collect();
        let mut rng = Rng::new(23);
        let mut cache = LogitCache::new(4, "synthetic".into());
        let mut labels = Vec::new();
        for w in &corpus {
            let t = cfg.frame_count(w.samples.len()).unwrap();
            let data: Vec<f32> = (0..t * 4).map(|_| rng.normal() as f32 * 2.0).collect();
            let logits = Tensor::new(vec![t, 4], data).unwrap();
            let labs: Vec<u16> =
                (0..t).map(|r| argmax(logits.row(r)) as u16).collect();
            labels.push(PseudoLabelSequence::new(w.id.clone(), labs, 4).unwrap());
            cache.insert(w.id.clone(), logits).unwrap();
        }
        (corpus, labels, cache)
    }

    fn tiny_cfg(steps: u64, mode: Mode) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            warmup_steps: steps / 10,
            batch_size: 2,
            mode,
            ..TrainConfig::preset("toy").unwrap()
        }
    }

    #[test]
    fn distill_weight_zero_reduces_to_supervised_ce() {
        let (corpus, labels, cache) = fixture();
        let mut tc = tiny_cfg(6, Mode::Kd);
        tc.distill_weight = 0.0;
        let out: DistillOutcome<f32> = distill_student(
            &corpus,
            &labels,
            &cache,
            &student_cfg(),
            &tc,
            &[0, 1, 2],
            &[3],
            None,
        )
        .unwrap();
        for row in &out.metrics.rows {
            assert!((row.total - row.ce).abs() < 1e-5, "total {} ce {}", row.total, row.ce);
        }
    }

    #[test]
    fn same_seed_same_metrics_and_weights() {
        let (corpus, labels, cache) = fixture();
        let tc = tiny_cfg(8, Mode::Dkd);
        let run = || {
            let out: DistillOutcome<f32> = distill_student(
                &corpus,
                &labels,
                &cache,
                &student_cfg(),
                &tc,
                &[0, 1, 2],
                &[3],
                None,
            )
            .unwrap();
            let bits: Vec<u64> = out
                .model
                .named_parameters()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.bits()))
                .collect();
            (bits, out.metrics.to_csv_string())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn verification_mode_trajectories_are_bit_identical_across_modes() {
        let (corpus, labels, cache) = fixture();
        let mut kd_cfg = tiny_cfg(10, Mode::Kd);
        kd_cfg.verify_equivalence = true;
        let mut dkd_cfg = tiny_cfg(10, Mode::Dkd);
        dkd_cfg.verify_equivalence = true;
        dkd_cfg.dynamic_beta = true;
        dkd_cfg.alpha = 1.0;

        let run = |cfg: &TrainConfig| {
            let out: DistillOutcome<f64> = distill_student(
                &corpus,
                &labels,
                &cache,
                &student_cfg(),
                cfg,
                &[0, 1, 2],
                &[3],
                None,
            )
            .unwrap();
            assert!(out.max_equivalence_gap <= EQUIVALENCE_GAP_TOLERANCE);
            let bits: Vec<u64> = out
                .model
                .named_parameters()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.bits()))
                .collect();
            (bits, out.metrics.to_csv_string())
        };
        let (kd_bits, kd_csv) = run(&kd_cfg);
        let (dkd_bits, dkd_csv) = run(&dkd_cfg);
        assert_eq!(kd_bits, dkd_bits);
        assert_eq!(kd_csv, dkd_csv);
    }

    #[test]
    fn cache_mismatch_is_rejected() {
        let (corpus, labels, _) = fixture();
        let other = LogitCache::new(4, "other".into());
        let tc = tiny_cfg(2, Mode::Kd);
        assert!(matches!(
            distill_student::<f32>(
                &corpus,
                &labels,
                &other,
                &student_cfg(),
                &tc,
                &[0],
                &[],
                None
            ),
            Err(Error::CacheMismatch(_))
        ));
    }
}
