//! Network building blocks and model assembly: convolutional waveform
//! encoder, transformer teacher, BiLSTM student, prediction heads, span
//! masking, weighted-sum featurizer, parameter counting, checkpoints.

pub mod checkpoint;
pub mod featurizer;
pub mod layers;
pub mod masking;
pub mod params;

pub use featurizer::weighted_sum_features;
pub use masking::{apply_span_mask, sample_mask, MaskSpec};
pub use params::{count_parameters, parameter_itemization, ParamItem};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::conv_out_len;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Rng, Scalar, Tensor};
use layers::{
    bilstm_layer_taped, conv_layer_taped, head_taped, linear_taped, pos_conv_taped,
    transformer_layer_taped, BiLstmLayer, Binder, ConvLayer, Head, LayerNorm, Linear, PosConv,
    TransformerLayer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Transformer,
    Bilstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Cosine,
    Linear,
}

fn default_head_dim() -> usize {
    64
}
fn default_head_temperature() -> f64 {
    0.1
}
fn default_pos_kernel() -> usize {
    9
}
fn default_pos_groups() -> usize {
    1
}

/// Architecture hyperparameters for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_channels: usize,
    pub encoder_strides: Vec<usize>,
    pub encoder_kernels: Vec<usize>,
    pub arch: Arch,
    pub num_layers: usize,
    pub hidden: usize,
    /// Feed-forward width; transformer only.
    #[serde(default)]
    pub ffn: usize,
    /// Attention heads; transformer only.
    #[serde(default)]
    pub heads: usize,
    pub num_clusters: usize,
    pub head: HeadKind,
    /// Embedding dimension of the cosine head.
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    /// Cosine-head temperature (distinct from the KD temperature).
    #[serde(default = "default_head_temperature")]
    pub head_temperature: f64,
    /// Positional conv kernel (odd); transformer only.
    #[serde(default = "default_pos_kernel")]
    pub pos_conv_kernel: usize,
    #[serde(default = "default_pos_groups")]
    pub pos_conv_groups: usize,
}

const HUBERT_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];
const HUBERT_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];

impl ModelConfig {
    /// Named presets. Toy presets train on a CPU in minutes; full-size
    /// presets exist for parameter-count and shape inspection.
    pub fn preset(name: &str) -> Option<ModelConfig> {
        let base = |channels: usize| ModelConfig {
            encoder_channels: channels,
            encoder_strides: HUBERT_STRIDES.to_vec(),
            encoder_kernels: HUBERT_KERNELS.to_vec(),
            arch: Arch::Transformer,
            num_layers: 0,
            hidden: 0,
            ffn: 0,
            heads: 0,
            num_clusters: 32,
            head: HeadKind::Linear,
            head_dim: default_head_dim(),
            head_temperature: default_head_temperature(),
            pos_conv_kernel: default_pos_kernel(),
            pos_conv_groups: default_pos_groups(),
        };
        match name {
            "toy-teacher" => Some(ModelConfig {
                num_layers: 4,
                hidden: 192,
                ffn: 384,
                heads: 4,
                head: HeadKind::Cosine,
                head_dim: 96,
                pos_conv_groups: 4,
                ..base(64)
            }),
            "toy-student-transformer" => Some(ModelConfig {
                num_layers: 2,
                hidden: 128,
                ffn: 256,
                heads: 4,
                ..base(64)
            }),
            "toy-student-bilstm" => Some(ModelConfig {
                arch: Arch::Bilstm,
                num_layers: 2,
                hidden: 96,
                ..base(64)
            }),
            "lstm-fullsize" => Some(ModelConfig {
                arch: Arch::Bilstm,
                num_layers: 4,
                hidden: 384,
                num_clusters: 500,
                ..base(512)
            }),
            "distilhubert-shape" => Some(ModelConfig {
                num_layers: 2,
                hidden: 768,
                ffn: 3072,
                heads: 12,
                num_clusters: 500,
                pos_conv_kernel: 127,
                pos_conv_groups: 16,
                ..base(512)
            }),
            "hubert-large-shape" => Some(ModelConfig {
                num_layers: 24,
                hidden: 1024,
                ffn: 4096,
                heads: 16,
                num_clusters: 500,
                head: HeadKind::Cosine,
                head_dim: 256,
                pos_conv_kernel: 127,
                pos_conv_groups: 16,
                ..base(512)
            }),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &[
            "toy-teacher",
            "toy-student-transformer",
            "toy-student-bilstm",
            "lstm-fullsize",
            "distilhubert-shape",
            "hubert-large-shape",
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_strides.len() != self.encoder_kernels.len()
            || self.encoder_strides.is_empty()
        {
            return Err(Error::BadConfig(
                "encoder strides and kernels must be equal-length and non-empty".into(),
            ));
        }
        if self.encoder_strides.iter().chain(&self.encoder_kernels).any(|&v| v == 0) {
            return Err(Error::BadConfig("encoder strides/kernels must be positive".into()));
        }
        if self.encoder_channels == 0 || self.hidden == 0 || self.num_layers == 0 {
            return Err(Error::BadConfig("channels, hidden size and layers must be positive".into()));
        }
        if self.num_clusters < 2 {
            return Err(Error::BadConfig("need at least 2 clusters".into()));
        }
        if self.arch == Arch::Transformer {
            if self.heads == 0 || self.hidden % self.heads != 0 {
                return Err(Error::BadConfig(format!(
                    "hidden {} must divide into heads {}",
                    self.hidden, self.heads
                )));
            }
            if self.ffn == 0 {
                return Err(Error::BadConfig("transformer needs a feed-forward width".into()));
            }
            if self.pos_conv_kernel % 2 == 0 || self.pos_conv_groups == 0
                || self.hidden % self.pos_conv_groups != 0
            {
                return Err(Error::BadConfig("positional conv needs an odd kernel and divisible groups".into()));
            }
        }
        if self.head == HeadKind::Cosine {
            if self.head_dim == 0 {
                return Err(Error::BadConfig("cosine head needs a positive head_dim".into()));
            }
            if !(self.head_temperature > 0.0) {
                return Err(Error::BadConfig("head temperature must be positive".into()));
            }
        }
        Ok(())
    }

    /// Encoder frame count for a waveform length, from the per-layer
    /// recurrence T_out = ⌊(T_in − k)/s⌋ + 1.
    pub fn frame_count(&self, samples: usize) -> Result<usize> {
        let mut t = samples;
        for (&k, &s) in self.encoder_kernels.iter().zip(&self.encoder_strides) {
            t = conv_out_len(t, k, s).ok_or_else(|| {
                Error::InputTooShort(format!(
                    "waveform of {samples} samples is shorter than the encoder's receptive field"
                ))
            })?;
        }
        Ok(t)
    }

    /// Width of the frames entering the body (after projection, if any).
    pub fn body_input_dim(&self) -> usize {
        match self.arch {
            Arch::Transformer => self.hidden,
            Arch::Bilstm => self.encoder_channels,
        }
    }

    /// Width of the body's per-frame output.
    pub fn output_dim(&self) -> usize {
        match self.arch {
            Arch::Transformer => self.hidden,
            Arch::Bilstm => 2 * self.hidden,
        }
    }
}

/// A fully assembled model.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub encoder: Vec<ConvLayer<S>>,
    pub frame_proj: Option<Linear<S>>,
    pub mask_embedding: Tensor<S>,
    pub pos_conv: Option<PosConv<S>>,
    pub transformer_layers: Vec<TransformerLayer<S>>,
    pub bilstm_layers: Vec<BiLstmLayer<S>>,
    pub final_norm: Option<LayerNorm<S>>,
    pub head: Head<S>,
}

/// Inference outputs: every body-layer output (equal shapes, for the
/// weighted-sum featurizer) plus the head logits.
pub struct ForwardOutput<S: Scalar> {
    pub layer_outputs: Vec<Tensor<S>>,
    pub logits: Tensor<S>,
}

/// Taped training forward: parameter vars in registration order (matching
/// `named_parameters`), body-layer outputs, logits, and the mask set used.
pub struct TapedForward {
    pub param_vars: Vec<Var>,
    pub layer_outputs: Vec<Var>,
    pub logits: Var,
    pub mask: Vec<usize>,
}

impl<S: Scalar> Model<S> {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Model<S>> {
        config.validate()?;
        let mut rng = rng.fork(0x6d6f64656c); // stable stream for weight init
        let mut encoder = Vec::new();
        let mut c_in = 1;
        for (&k, &s) in config.encoder_kernels.iter().zip(&config.encoder_strides) {
            encoder.push(ConvLayer::init(c_in, config.encoder_channels, k, s, &mut rng));
            c_in = config.encoder_channels;
        }

        let (frame_proj, pos_conv, transformer_layers, bilstm_layers, final_norm) =
            match config.arch {
                Arch::Transformer => {
                    let proj =
                        Linear::init(config.encoder_channels, config.hidden, true, &mut rng);
                    let pos = PosConv::init(
                        config.hidden,
                        config.pos_conv_kernel,
                        config.pos_conv_groups,
                        &mut rng,
                    );
                    let layers = (0..config.num_layers)
                        .map(|_| TransformerLayer::init(config.hidden, config.ffn, &mut rng))
                        .collect();
                    (Some(proj), Some(pos), layers, Vec::new(), Some(LayerNorm::init(config.hidden)))
                }
                Arch::Bilstm => {
                    let mut layers = Vec::new();
                    let mut din = config.encoder_channels;
                    for _ in 0..config.num_layers {
                        layers.push(BiLstmLayer::init(din, config.hidden, &mut rng));
                        din = 2 * config.hidden;
                    }
                    (None, None, Vec::new(), layers, None)
                }
            };

        let mask_dim = config.body_input_dim();
        let mask_embedding = layers::uniform_init(vec![mask_dim], mask_dim, &mut rng);

        let head = match config.head {
            HeadKind::Linear => Head::init_linear(config.output_dim(), config.num_clusters, &mut rng),
            HeadKind::Cosine => Head::init_cosine(
                config.output_dim(),
                config.head_dim,
                config.num_clusters,
                config.head_temperature,
                &mut rng,
            ),
        };

        Ok(Model {
            config: config.clone(),
            encoder,
            frame_proj,
            mask_embedding,
            pos_conv,
            transformer_layers,
            bilstm_layers,
            final_norm,
            head,
        })
    }

    /// All trainable tensors with stable names, in registration order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            l.named(&format!("encoder.{i}"), &mut out);
        }
        if let Some(p) = &self.frame_proj {
            p.named("frame_proj", &mut out);
        }
        out.push(("mask_embedding".to_string(), &self.mask_embedding));
        if let Some(p) = &self.pos_conv {
            p.named("pos_conv", &mut out);
        }
        for (i, l) in self.transformer_layers.iter().enumerate() {
            l.named(&format!("layer.{i}"), &mut out);
        }
        for (i, l) in self.bilstm_layers.iter().enumerate() {
            l.named(&format!("bilstm.{i}"), &mut out);
        }
        if let Some(n) = &self.final_norm {
            n.named("final_norm", &mut out);
        }
        self.head.named("head", &mut out);
        out
    }

    /// Mutable views of the same tensors, in the same order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for l in self.encoder.iter_mut() {
            l.tensors_mut(&mut out);
        }
        if let Some(p) = &mut self.frame_proj {
            p.tensors_mut(&mut out);
        }
        out.push(&mut self.mask_embedding);
        if let Some(p) = &mut self.pos_conv {
            p.tensors_mut(&mut out);
        }
        for l in self.transformer_layers.iter_mut() {
            l.tensors_mut(&mut out);
        }
        for l in self.bilstm_layers.iter_mut() {
            l.tensors_mut(&mut out);
        }
        if let Some(n) = &mut self.final_norm {
            n.tensors_mut(&mut out);
        }
        self.head.tensors_mut(&mut out);
        out
    }

    pub fn num_parameters(&self) -> u64 {
        self.named_parameters().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    fn check_wave(&self, wave: &[S]) -> Result<usize> {
        if wave.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input waveform".into()));
        }
        self.config.frame_count(wave.len())
    }

    /// Inference forward (no masking, no gradients). Intermediates are
    /// dropped as soon as the next stage consumed them, so the allocation
    /// gauge sees the true activation high-water mark.
    pub fn forward_infer(&self, wave: &[S]) -> Result<ForwardOutput<S>> {
        self.check_wave(wave)?;
        let mut x = Tensor::from_parts(vec![wave.len(), 1], wave.to_vec());
        for layer in &self.encoder {
            x = layer.infer(&x);
        }
        if let Some(p) = &self.frame_proj {
            x = p.infer(&x);
        }
        if let Some(p) = &self.pos_conv {
            x = p.infer(&x);
        }
        let mut layer_outputs = Vec::new();
        match self.config.arch {
            Arch::Transformer => {
                for layer in &self.transformer_layers {
                    x = layer.infer(&x, self.config.heads);
                    layer_outputs.push(x.clone());
                }
            }
            Arch::Bilstm => {
                for layer in &self.bilstm_layers {
                    x = layer.infer(&x);
                    layer_outputs.push(x.clone());
                }
            }
        }
        if let Some(n) = &self.final_norm {
            x = n.infer(&x);
        }
        let logits = self.head.infer(&x);
        if !logits.all_finite() {
            return Err(Error::NonFinite("model forward".into()));
        }
        Ok(ForwardOutput { layer_outputs, logits })
    }

    /// Registers all parameters on the tape once; the returned binding can
    /// drive any number of forwards (a whole batch on one tape).
    pub fn bind<'m>(&'m self, tape: &mut Tape<S>) -> BoundModel<'m, S> {
        let mut binder = Binder::new(tape);
        let enc = self.encoder.iter().map(|l| l.bind(&mut binder)).collect();
        let proj = self.frame_proj.as_ref().map(|p| p.bind(&mut binder));
        let mask_var = binder.bind(&self.mask_embedding);
        let pos = self.pos_conv.as_ref().map(|p| p.bind(&mut binder));
        let tls = self.transformer_layers.iter().map(|l| l.bind(&mut binder)).collect();
        let bls = self.bilstm_layers.iter().map(|l| l.bind(&mut binder)).collect();
        let fin = self.final_norm.as_ref().map(|n| n.bind(&mut binder));
        let head = self.head.bind(&mut binder);
        BoundModel {
            model: self,
            param_vars: binder.flat,
            enc,
            proj,
            mask_var,
            pos,
            tls,
            bls,
            fin,
            head,
        }
    }

    /// Recording forward for training. When `mask` is given, span masking
    /// is applied to the body-input frames with the model's learned mask
    /// embedding and the covered indices are returned.
    pub fn forward_train(
        &self,
        tape: &mut Tape<S>,
        wave: &[S],
        mask: Option<&MaskSpec>,
    ) -> Result<TapedForward> {
        let bound = self.bind(tape);
        let param_vars = bound.param_vars.clone();
        let (layer_outputs, logits, mask) = bound.forward(tape, wave, mask)?;
        Ok(TapedForward { param_vars, layer_outputs, logits, mask })
    }
}

/// A model's parameters registered on one tape.
pub struct BoundModel<'m, S: Scalar> {
    model: &'m Model<S>,
    /// Parameter leaves in `named_parameters` order.
    pub param_vars: Vec<Var>,
    enc: Vec<layers::ConvVars>,
    proj: Option<layers::LinearVars>,
    mask_var: Var,
    pos: Option<layers::PosConvVars>,
    tls: Vec<layers::TransformerVars>,
    bls: Vec<layers::BiLstmVars>,
    fin: Option<layers::LayerNormVars>,
    head: layers::HeadVars,
}

impl<S: Scalar> BoundModel<'_, S> {
    /// One utterance's forward on the shared binding. Returns the body
    /// layer outputs, the logits, and the mask set used.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        wave: &[S],
        mask: Option<&MaskSpec>,
    ) -> Result<(Vec<Var>, Var, Vec<usize>)> {
        let frames = self.model.check_wave(wave)?;
        if let Some(spec) = mask {
            spec.validate()?;
        }
        let mut x = tape.constant(wave, vec![wave.len(), 1]);
        for v in &self.enc {
            x = conv_layer_taped(tape, x, v);
        }
        if let Some(p) = &self.proj {
            x = linear_taped(tape, x, p);
        }
        let mask_set = match mask {
            Some(spec) => {
                let m = sample_mask(frames, spec);
                if !m.is_empty() {
                    x = tape.mask_rows(x, self.mask_var, &m);
                }
                m
            }
            None => Vec::new(),
        };
        if let Some(p) = &self.pos {
            x = pos_conv_taped(tape, x, p);
        }
        let mut layer_outputs = Vec::new();
        for v in &self.tls {
            x = transformer_layer_taped(tape, x, v, self.model.config.heads);
            layer_outputs.push(x);
        }
        for v in &self.bls {
            x = bilstm_layer_taped(tape, x, v);
            layer_outputs.push(x);
        }
        if let Some(n) = &self.fin {
            x = tape.layer_norm_rows(x, n.g, n.b, crate::numerics::sc(layers::LN_EPS));
        }
        let logits = head_taped(tape, x, &self.head);
        Ok((layer_outputs, logits, mask_set))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sc;

    fn tiny_transformer() -> ModelConfig {
        ModelConfig {
            encoder_channels: 6,
            encoder_strides: vec![3, 2],
            encoder_kernels: vec![6, 3],
            arch: Arch::Transformer,
            num_layers: 2,
            hidden: 8,
            ffn: 12,
            heads: 2,
            num_clusters: 5,
            head: HeadKind::Cosine,
            head_dim: 4,
            head_temperature: 0.1,
            pos_conv_kernel: 3,
            pos_conv_groups: 1,
        }
    }

    fn tiny_bilstm() -> ModelConfig {
        ModelConfig {
            arch: Arch::Bilstm,
            num_layers: 2,
            hidden: 5,
            head: HeadKind::Linear,
            ..tiny_transformer()
        }
    }

    #[test]
    fn frame_count_matches_hubert_preset_arithmetic() {
        let cfg = ModelConfig::preset("lstm-fullsize").unwrap();
        assert_eq!(cfg.frame_count(16000).unwrap(), 49);
        assert_eq!(cfg.frame_count(8000).unwrap(), 24);
        assert!(matches!(cfg.frame_count(5), Err(Error::InputTooShort(_))));
    }

    #[test]
    fn frame_count_property_against_direct_recurrence() {
        let cfg = tiny_transformer();
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let n = 30 + rng.below(4000);
            let expected = {
                let mut t = n;
                let mut ok = true;
                for (&k, &s) in cfg.encoder_kernels.iter().zip(&cfg.encoder_strides) {
                    if t < k {
                        ok = false;
                        break;
                    }
                    t = (t - k) / s + 1;
                }
                ok.then_some(t)
            };
            match (cfg.frame_count(n), expected) {
                (Ok(t), Some(e)) => assert_eq!(t, e),
                (Err(_), None) => {}
                (got, want) => panic!("length {n}: {got:?} vs {want:?}"),
            }
        }
    }

    #[test]
    fn doubling_input_roughly_doubles_frames() {
        let cfg = tiny_transformer();
        let t1 = cfg.frame_count(2000).unwrap();
        let t2 = cfg.frame_count(4000).unwrap();
        // within one frame per layer of boundary effect
        assert!((t2 as i64 - 2 * t1 as i64).unsigned_abs() as usize <= cfg.encoder_kernels.len());
    }

    #[test]
    fn closed_form_count_matches_instantiated_models_exactly() {
        for cfg in [tiny_transformer(), tiny_bilstm()] {
            let mut model: Model<f32> = Model::init(&cfg, &mut Rng::new(1)).unwrap();
            assert_eq!(model.num_parameters(), count_parameters(&cfg).unwrap());
            let named = model.named_parameters().len();
            assert_eq!(named, model.parameters_mut().len(), "named/mut registries disagree");
        }
        for name in ModelConfig::preset_names() {
            let cfg = ModelConfig::preset(name).unwrap();
            if cfg.encoder_channels > 64 {
                continue; // full-size models are covered by the formula test
            }
            let model: Model<f32> = Model::init(&cfg, &mut Rng::new(1)).unwrap();
            assert_eq!(model.num_parameters(), count_parameters(&cfg).unwrap(), "{name}");
        }
    }

    #[test]
    fn taped_forward_equals_inference_forward_bitwise() {
        for cfg in [tiny_transformer(), tiny_bilstm()] {
            let model: Model<f64> = Model::init(&cfg, &mut Rng::new(7)).unwrap();
            let mut rng = Rng::new(9);
            let wave: Vec<f64> = (0..400).map(|_| rng.normal() * 0.1).collect();
            let infer = model.forward_infer(&wave).unwrap();
            let mut tape = Tape::new();
            let taped = model.forward_train(&mut tape, &wave, None).unwrap();
            let a = infer.logits.data();
            let b = tape.data(taped.logits);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(infer.layer_outputs.len(), taped.layer_outputs.len());
        }
    }

    #[test]
    fn all_zero_waveform_zero_bias_encoder_gives_zero_frames() {
        let cfg = tiny_bilstm();
        let mut model: Model<f64> = Model::init(&cfg, &mut Rng::new(7)).unwrap();
        for layer in model.encoder.iter_mut() {
            for v in layer.bias.data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        let wave = vec![0.0f64; 300];
        let mut x = Tensor::from_parts(vec![wave.len(), 1], wave);
        for layer in &model.encoder {
            x = layer.infer(&x);
        }
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_single_frame_is_finite_and_defined() {
        let cfg = tiny_bilstm();
        let model: Model<f64> = Model::init(&cfg, &mut Rng::new(2)).unwrap();
        let layer = &model.bilstm_layers[0];
        let x = Tensor::new(vec![1, cfg.encoder_channels], vec![0.3; cfg.encoder_channels]).unwrap();
        let y = layer.infer(&x);
        assert_eq!(y.shape(), &[1, 2 * cfg.hidden]);
        assert!(y.all_finite());
    }

    #[test]
    fn bilstm_time_reversal_symmetry() {
        let cfg = tiny_bilstm();
        let model: Model<f64> = Model::init(&cfg, &mut Rng::new(4)).unwrap();
        let layer = &model.bilstm_layers[0];
        let swapped = BiLstmLayer { fwd: layer.bwd.clone(), bwd: layer.fwd.clone() };

        let mut rng = Rng::new(5);
        let t = 9;
        let d = cfg.encoder_channels;
        let data: Vec<f64> = (0..t * d).map(|_| rng.normal()).collect();
        let x = Tensor::new(vec![t, d], data.clone()).unwrap();
        let mut rev = Vec::new();
        for r in (0..t).rev() {
            rev.extend_from_slice(&data[r * d..(r + 1) * d]);
        }
        let xr = Tensor::new(vec![t, d], rev).unwrap();

        let orig = layer.infer(&x);
        let alt = swapped.infer(&xr);
        let h2 = 2 * cfg.hidden;
        // reverse alt in time and swap its directional halves
        for r in 0..t {
            let a = orig.row(r);
            let b = alt.row(t - 1 - r);
            for j in 0..cfg.hidden {
                assert_eq!(a[j].to_bits(), b[cfg.hidden + j].to_bits());
                assert_eq!(a[cfg.hidden + j].to_bits(), b[j].to_bits());
            }
        }
        let _ = h2;
    }

    #[test]
    fn bilstm_bounded_inputs_stay_finite() {
        let cfg = tiny_bilstm();
        let model: Model<f64> = Model::init(&cfg, &mut Rng::new(11)).unwrap();
        let mut rng = Rng::new(12);
        let t = 40;
        let d = cfg.encoder_channels;
        let data: Vec<f64> = (0..t * d).map(|_| rng.uniform(-10.0, 10.0)).collect();
        let mut x = Tensor::new(vec![t, d], data).unwrap();
        for layer in &model.bilstm_layers {
            x = layer.infer(&x);
        }
        assert!(x.all_finite());
    }

    #[test]
    fn transformer_single_frame_and_permutation_equivariance() {
        let cfg = tiny_transformer();
        let model: Model<f64> = Model::init(&cfg, &mut Rng::new(21)).unwrap();
        let layer = &model.transformer_layers[0];

        let one = Tensor::new(vec![1, cfg.hidden], vec![0.25; cfg.hidden]).unwrap();
        let y = layer.infer(&one, cfg.heads);
        assert!(y.all_finite());
        assert_eq!(y.shape(), &[1, cfg.hidden]);

        // permuting frames commutes with the bare layer
        let mut rng = Rng::new(22);
        let t = 7;
        let data: Vec<f64> = (0..t * cfg.hidden).map(|_| rng.normal()).collect();
        let x = Tensor::new(vec![t, cfg.hidden], data.clone()).unwrap();
        let mut perm: Vec<usize> = (0..t).collect();
        rng.shuffle(&mut perm);
        let mut pdata = Vec::new();
        for &r in &perm {
            pdata.extend_from_slice(&data[r * cfg.hidden..(r + 1) * cfg.hidden]);
        }
        let xp = Tensor::new(vec![t, cfg.hidden], pdata).unwrap();

        let y = layer.infer(&x, cfg.heads);
        let yp = layer.infer(&xp, cfg.heads);
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..cfg.hidden {
                let a = yp.data()[i * cfg.hidden + c];
                let b = y.data()[r * cfg.hidden + c];
                assert!((a - b).abs() < 1e-10, "({i},{c}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn cosine_head_geometry() {
        // embeddings parallel / orthogonal to the projected output
        let proj = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let emb = Tensor::new(vec![2, 2], vec![2.0f64, 0.0, 0.0, -3.0]).unwrap();
        let head = Head::Cosine { proj, embeddings: emb, temperature: 0.1 };
        let x = Tensor::new(vec![1, 2], vec![0.7f64, 0.0]).unwrap();
        let logits = head.infer(&x);
        assert!((logits.data()[0] - 10.0).abs() < 1e-9); // cos=1 → 1/τ'
        assert!(logits.data()[1].abs() < 1e-9); // orthogonal → 0

        // positive rescaling of the frame leaves logits unchanged
        let x2 = Tensor::new(vec![1, 2], vec![0.7f64 * 37.5, 0.0]).unwrap();
        let l2 = head.infer(&x2);
        for (a, b) in logits.data().iter().zip(l2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_head_selects_coordinates_with_one_hot_rows() {
        let w = Tensor::new(vec![2, 3], vec![0.0f64, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        let head = Head::Linear(Linear { weight: w, bias: Some(b) });
        let x = Tensor::new(vec![1, 3], vec![5.0f64, 7.0, -2.0]).unwrap();
        let logits = head.infer(&x);
        assert_eq!(logits.data(), &[7.0, -2.0]);

        // zero weights and bias → uniform softmax
        let w = Tensor::<f64>::zeros(vec![4, 3]);
        let b = Tensor::<f64>::zeros(vec![4]);
        let head = Head::Linear(Linear { weight: w, bias: Some(b) });
        let logits = head.infer(&x);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_head_matches_cosine_ranking_on_normalized_inputs() {
        let mut rng = Rng::new(31);
        let (d, c) = (6, 4);
        // unit-norm embedding rows double as linear weights
        let emb_data: Vec<f64> = (0..c * d).map(|_| rng.normal()).collect();
        let emb = {
            let (normed, _) =
                crate::numerics::kernels::normalize_rows(&emb_data, c, d, sc(1e-8));
            Tensor::new(vec![c, d], normed).unwrap()
        };
        let eye = {
            let mut data = vec![0.0f64; d * d];
            for i in 0..d {
                data[i * d + i] = 1.0;
            }
            Tensor::new(vec![d, d], data).unwrap()
        };
        let cos_head = Head::Cosine { proj: eye, embeddings: emb.clone(), temperature: 1.0 };
        let lin_head = Head::Linear(Linear { weight: emb, bias: None });

        let raw: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let (xn, _) = crate::numerics::kernels::normalize_rows(&raw, 1, d, sc(1e-8));
        let x = Tensor::new(vec![1, d], xn).unwrap();
        let a = cos_head.infer(&x);
        let b = lin_head.infer(&x);
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[j].partial_cmp(&v[i]).unwrap());
            idx
        };
        assert_eq!(rank(a.data()), rank(b.data()));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_forward_reports_mask_and_matches_embedding() {
        let cfg = tiny_transformer();
        let model: Model<f64> = Model::init(&cfg, &mut Rng::new(41)).unwrap();
        let wave: Vec<f64> = (0..500).map(|i| (i as f64 * 0.05).sin() * 0.2).collect();
        let spec = MaskSpec::new(3, 0.5, 77).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward_train(&mut tape, &wave, Some(&spec)).unwrap();
        let frames = cfg.frame_count(wave.len()).unwrap();
        assert_eq!(fwd.mask, sample_mask(frames, &spec));
        assert!(!fwd.mask.is_empty());
    }
}
