//! Data ingestion and pseudo-label generation: WAV parsing, synthetic
//! corpus with known latent structure, MFCC extraction, and k-means
//! fitting/assignment.

pub mod kmeans;
pub mod labels;
pub mod mfcc;
pub mod synth;
pub mod wav;

pub use kmeans::{kmeans_assign, kmeans_assign_one, kmeans_fit, KMeansFit};
pub use labels::{build_pseudo_labels, load_labels, save_labels, PseudoLabelSequence};
pub use mfcc::{mfcc, MfccConfig};
pub use synth::{synth_corpus, SynthConfig, SynthUtterance};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// A mono waveform with samples in [−1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32, id: String) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::BadConfig("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform '{id}'")));
        }
        if samples.iter().any(|&s| !(-1.0..1.0).contains(&s)) {
            return Err(Error::Precondition(format!("waveform '{id}' has samples outside [-1, 1)")));
        }
        Ok(Waveform { samples, sample_rate, id })
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
