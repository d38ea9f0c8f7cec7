//! Span masking over frame sequences.
//!
//! Each frame index independently starts a span with `start_probability`;
//! spans of `span_length` frames are clipped at the sequence end and their
//! union forms the mask set M. The draw is a pure function of the seed.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskSpec {
    pub span_length: usize,
    pub start_probability: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(span_length: usize, start_probability: f64, seed: u64) -> Result<Self> {
        let spec = MaskSpec { span_length, start_probability, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.span_length < 1 {
            return Err(Error::Precondition("span_length must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.start_probability) {
            return Err(Error::Precondition(format!(
                "start_probability {} outside [0, 1]",
                self.start_probability
            )));
        }
        Ok(())
    }

    /// Same policy, different seed. Training derives one per (step, slot).
    pub fn reseeded(&self, seed: u64) -> MaskSpec {
        MaskSpec { seed, ..*self }
    }
}

/// Sorted union of span-covered indices for a sequence of `frames` steps.
pub fn sample_mask(frames: usize, spec: &MaskSpec) -> Vec<usize> {
    let mut rng = Rng::new(spec.seed);
    let mut covered = vec![false; frames];
    for t in 0..frames {
        if rng.next_f64() < spec.start_probability {
            for c in covered.iter_mut().skip(t).take(spec.span_length) {
                *c = true;
            }
        }
    }
    covered.iter().enumerate().filter_map(|(i, &c)| if c { Some(i) } else { None }).collect()
}

/// Returns the masked copy X̃ (masked rows replaced by the embedding) and
/// the mask set M. The unmasked rows are byte-identical to the input.
pub fn apply_span_mask<S: Scalar>(
    frames: &Tensor<S>,
    mask_embedding: &[S],
    spec: &MaskSpec,
) -> Result<(Tensor<S>, Vec<usize>)> {
    spec.validate()?;
    let (t, d) = (frames.rows(), frames.cols());
    if mask_embedding.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "mask embedding has {} values for frame dimension {d}",
            mask_embedding.len()
        )));
    }
    let mask = sample_mask(t, spec);
    let mut data = frames.data().to_vec();
    for &row in &mask {
        data[row * d..(row + 1) * d].copy_from_slice(mask_embedding);
    }
    Ok((Tensor::new(vec![t, d], data)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extreme_probabilities() {
        let t = 37;
        let frames = Tensor::<f32>::zeros(vec![t, 4]);
        let emb = vec![1.0f32; 4];

        let spec = MaskSpec::new(10, 0.0, 7).unwrap();
        let (x, m) = apply_span_mask(&frames, &emb, &spec).unwrap();
        assert!(m.is_empty());
        assert_eq!(x.data(), frames.data());

        let spec = MaskSpec::new(10, 1.0, 7).unwrap();
        let (x, m) = apply_span_mask(&frames, &emb, &spec).unwrap();
        assert_eq!(m, (0..t).collect::<Vec<_>>());
        assert!(x.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deterministic_given_seed_and_spans_clip() {
        let spec = MaskSpec::new(5, 0.2, 99).unwrap();
        let a = sample_mask(50, &spec);
        let b = sample_mask(50, &spec);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&i| i < 50));
        let c = sample_mask(50, &spec.reseeded(100));
        assert_ne!(a, c);
    }

    #[test]
    fn masked_rows_equal_embedding_and_others_are_untouched() {
        let t = 20;
        let d = 3;
        let mut rng = Rng::new(5);
        let data: Vec<f32> = (0..t * d).map(|_| rng.normal() as f32).collect();
        let frames = Tensor::new(vec![t, d], data.clone()).unwrap();
        let emb = vec![9.0f32, 8.0, 7.0];
        let spec = MaskSpec::new(3, 0.15, 1).unwrap();
        let (x, m) = apply_span_mask(&frames, &emb, &spec).unwrap();
        for row in 0..t {
            let got = &x.data()[row * d..(row + 1) * d];
            if m.contains(&row) {
                assert_eq!(got, &emb[..]);
            } else {
                assert_eq!(got, &data[row * d..(row + 1) * d]);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(MaskSpec::new(0, 0.5, 1).is_err());
        assert!(MaskSpec::new(1, 1.5, 1).is_err());
        assert!(MaskSpec::new(1, -0.1, 1).is_err());
    }
}
