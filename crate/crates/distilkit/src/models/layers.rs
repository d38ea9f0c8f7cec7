//! Parameter containers and forward rules for the network building blocks.
//!
//! Every block exposes three things kept in lockstep order: `named` (for
//! checkpoints and counting), `bind` (tape registration for training), and
//! an inference forward that calls the same kernels as the taped path.

use crate::numerics::kernels as k;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{sc, Rng, Scalar, Tensor};

pub(crate) fn uniform_init<S: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| sc(rng.uniform(-bound, bound))).collect();
    let mut t = Tensor::from_parts(shape, data);
    t.requires_grad = true;
    t
}

/// Registers parameter tensors on a tape while collecting the flat Var
/// list in registration order (the optimizer indexes gradients by it).
pub(crate) struct Binder<'t, S: Scalar> {
    pub tape: &'t mut Tape<S>,
    pub flat: Vec<Var>,
}

impl<'t, S: Scalar> Binder<'t, S> {
    pub fn new(tape: &'t mut Tape<S>) -> Self {
        Binder { tape, flat: Vec::new() }
    }

    pub fn bind(&mut self, t: &Tensor<S>) -> Var {
        let v = self.tape.param(t);
        self.flat.push(v);
        v
    }
}

type Named<'a, S> = Vec<(String, &'a Tensor<S>)>;

// ── Linear ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>, // dout×din
    pub bias: Option<Tensor<S>>,
}

pub(crate) struct LinearVars {
    pub w: Var,
    pub b: Option<Var>,
}

impl<S: Scalar> Linear<S> {
    pub fn init(din: usize, dout: usize, bias: bool, rng: &mut Rng) -> Self {
        Linear {
            weight: uniform_init(vec![dout, din], din, rng),
            bias: bias.then(|| uniform_init(vec![dout], din, rng)),
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, S>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<S>>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_, S>) -> LinearVars {
        LinearVars { w: b.bind(&self.weight), b: self.bias.as_ref().map(|t| b.bind(t)) }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        let (t, din) = (x.rows(), x.cols());
        let dout = self.weight.rows();
        let data = k::affine(
            x.data(),
            self.weight.data(),
            self.bias.as_ref().map(|b| b.data()),
            t,
            din,
            dout,
        );
        Tensor::from_parts(vec![t, dout], data)
    }
}

pub(crate) fn linear_taped<S: Scalar>(tape: &mut Tape<S>, x: Var, v: &LinearVars) -> Var {
    tape.affine(x, v.w, v.b)
}

// ── Layer norm ───────────────────────────────────────────────────────

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm<S: Scalar> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

pub(crate) struct LayerNormVars {
    pub g: Var,
    pub b: Var,
}

impl<S: Scalar> LayerNorm<S> {
    /// Identity initialization (gain 1, bias 0), the standard exception to
    /// fan-in uniform init.
    pub fn init(dim: usize) -> Self {
        let mut gain = Tensor::from_parts(vec![dim], vec![S::one(); dim]);
        gain.requires_grad = true;
        let mut bias = Tensor::from_parts(vec![dim], vec![S::zero(); dim]);
        bias.requires_grad = true;
        LayerNorm { gain, bias }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, S>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<S>>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_, S>) -> LayerNormVars {
        LayerNormVars { g: b.bind(&self.gain), b: b.bind(&self.bias) }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        let (rows, cols) = (x.rows(), x.cols());
        let (data, _, _) =
            k::layer_norm_rows(x.data(), rows, cols, self.gain.data(), self.bias.data(), sc(LN_EPS));
        Tensor::from_parts(vec![rows, cols], data)
    }
}

// ── Convolution layers ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ConvLayer<S: Scalar> {
    pub weight: Tensor<S>, // [c_out][c_in][k]
    pub bias: Tensor<S>,
    pub stride: usize,
}

pub(crate) struct ConvVars {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
}

impl<S: Scalar> ConvLayer<S> {
    pub fn init(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = c_in * kernel;
        ConvLayer {
            weight: uniform_init(vec![c_out, c_in, kernel], fan_in, rng),
            bias: uniform_init(vec![c_out], fan_in, rng),
            stride,
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, S>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<S>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_, S>) -> ConvVars {
        ConvVars { w: b.bind(&self.weight), b: b.bind(&self.bias), stride: self.stride }
    }

    /// Strided convolution followed by GELU.
    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        let (t_in, c_in) = (x.rows(), x.cols());
        let shape = self.weight.shape();
        let (c_out, kk) = (shape[0], shape[2]);
        let (mut data, t_out) = k::conv1d(
            x.data(),
            t_in,
            c_in,
            self.weight.data(),
            self.bias.data(),
            c_out,
            kk,
            self.stride,
        );
        for v in data.iter_mut() {
            *v = k::gelu_val(*v);
        }
        Tensor::from_parts(vec![t_out, c_out], data)
    }
}

pub(crate) fn conv_layer_taped<S: Scalar>(tape: &mut Tape<S>, x: Var, v: &ConvVars) -> Var {
    let y = tape.conv1d(x, v.w, v.b, v.stride);
    tape.gelu(y)
}

/// Convolutional positional embedding: x + gelu(conv_same(x)).
#[derive(Debug, Clone)]
pub struct PosConv<S: Scalar> {
    pub weight: Tensor<S>, // [c][c/g][k]
    pub bias: Tensor<S>,
    pub groups: usize,
}

pub(crate) struct PosConvVars {
    pub w: Var,
    pub b: Var,
    pub groups: usize,
}

impl<S: Scalar> PosConv<S> {
    pub fn init(dim: usize, kernel: usize, groups: usize, rng: &mut Rng) -> Self {
        let fan_in = (dim / groups) * kernel;
        PosConv {
            weight: uniform_init(vec![dim, dim / groups, kernel], fan_in, rng),
            bias: uniform_init(vec![dim], fan_in, rng),
            groups,
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, S>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<S>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_, S>) -> PosConvVars {
        PosConvVars { w: b.bind(&self.weight), b: b.bind(&self.bias), groups: self.groups }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        let (t, c) = (x.rows(), x.cols());
        let kk = self.weight.shape()[2];
        let mut conv = k::conv1d_same_grouped(
            x.data(),
            t,
            c,
            self.weight.data(),
            self.bias.data(),
            kk,
            self.groups,
        );
        for v in conv.iter_mut() {
            *v = k::gelu_val(*v);
        }
        let data: Vec<S> = x.data().iter().zip(conv.iter()).map(|(&a, &b)| a + b).collect();
        Tensor::from_parts(vec![t, c], data)
    }
}

pub(crate) fn pos_conv_taped<S: Scalar>(tape: &mut Tape<S>, x: Var, v: &PosConvVars) -> Var {
    let c = tape.conv1d_same(x, v.w, v.b, v.groups);
    let g = tape.gelu(c);
    tape.add(x, g)
}

// ── Transformer encoder layer ────────────────────────────────────────

/// Pre-norm self-attention + feed-forward block, bidirectional (no causal
/// mask), no positional encoding of its own.
#[derive(Debug, Clone)]
pub struct TransformerLayer<S: Scalar> {
    pub ln1: LayerNorm<S>,
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub ln2: LayerNorm<S>,
    pub ff1: Linear<S>,
    pub ff2: Linear<S>,
}

pub(crate) struct TransformerVars {
    ln1: LayerNormVars,
    wq: LinearVars,
    wk: LinearVars,
    wv: LinearVars,
    wo: LinearVars,
    ln2: LayerNormVars,
    ff1: LinearVars,
    ff2: LinearVars,
}

impl<S: Scalar> TransformerLayer<S> {
    pub fn init(dim: usize, ffn: usize, rng: &mut Rng) -> Self {
        TransformerLayer {
            ln1: LayerNorm::init(dim),
            wq: Linear::init(dim, dim, true, rng),
            wk: Linear::init(dim, dim, true, rng),
            wv: Linear::init(dim, dim, true, rng),
            wo: Linear::init(dim, dim, true, rng),
            ln2: LayerNorm::init(dim),
            ff1: Linear::init(dim, ffn, true, rng),
            ff2: Linear::init(ffn, dim, true, rng),
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, S>) {
        self.ln1.named(&format!("{prefix}.ln1"), out);
        self.wq.named(&format!("{prefix}.wq"), out);
        self.wk.named(&format!("{prefix}.wk"), out);
        self.wv.named(&format!("{prefix}.wv"), out);
        self.wo.named(&format!("{prefix}.wo"), out);
        self.ln2.named(&format!("{prefix}.ln2"), out);
        self.ff1.named(&format!("{prefix}.ff1"), out);
        self.ff2.named(&format!("{prefix}.ff2"), out);
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<S>>) {
        self.ln1.tensors_mut(out);
        self.wq.tensors_mut(out);
        self.wk.tensors_mut(out);
        self.wv.tensors_mut(out);
        self.wo.tensors_mut(out);
        self.ln2.tensors_mut(out);
        self.ff1.tensors_mut(out);
        self.ff2.tensors_mut(out);
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_, S>) -> TransformerVars {
        TransformerVars {
            ln1: self.ln1.bind(b),
            wq: self.wq.bind(b),
            wk: self.wk.bind(b),
            wv: self.wv.bind(b),
            wo: self.wo.bind(b),
            ln2: self.ln2.bind(b),
            ff1: self.ff1.bind(b),
            ff2: self.ff2.bind(b),
        }
    }

    pub fn infer(&self, x: &Tensor<S>, heads: usize) -> Tensor<S> {
        let (t, d) = (x.rows(), x.cols());
        let dh = d / heads;
        let inv_sqrt: S = sc(1.0 / (dh as f64).sqrt());

        let xn = self.ln1.infer(x);
        let q = self.wq.infer(&xn);
        let kk = self.wk.infer(&xn);
        let v = self.wv.infer(&xn);

        let mut ctx = vec![S::zero(); t * d];
        for h in 0..heads {
            let col0 = h * dh;
            let slice = |m: &Tensor<S>| -> Vec<S> {
                let mut out = Vec::with_capacity(t * dh);
                for r in 0..t {
                    out.extend_from_slice(&m.data()[r * d + col0..r * d + col0 + dh]);
                }
                out
            };
            let (qh, kh, vh) = (slice(&q), slice(&kk), slice(&v));
            let mut scores = k::matmul_nt(&qh, &kh, t, dh, t);
            for s in scores.iter_mut() {
                *s = *s * inv_sqrt;
            }
            k::softmax_rows_inplace(&mut scores, t, t);
            let head_ctx = k::matmul(&scores, &vh, t, t, dh);
            for r in 0..t {
                ctx[r * d + col0..r * d + col0 + dh]
                    .copy_from_slice(&head_ctx[r * dh..(r + 1) * dh]);
            }
        }
        let ctx = Tensor::from_parts(vec![t, d], ctx);
        let attn_out = self.wo.infer(&ctx);
        let h1data: Vec<S> =
            x.data().iter().zip(attn_out.data()).map(|(&a, &b)| a + b).collect();
        let h1 = Tensor::from_parts(vec![t, d], h1data);

        let hn = self.ln2.infer(&h1);
        let f1 = self.ff1.infer(&hn);
        let mut g = f1;
        for vi in g.data_mut().iter_mut() {
            *vi = k::gelu_val(*vi);
        }
        let f2 = self.ff2.infer(&g);
        let data: Vec<S> = h1.data().iter().zip(f2.data()).map(|(&a, &b)| a + b).collect();
        Tensor::from_parts(vec![t, d], data)
    }
}

pub(crate) fn transformer_layer_taped<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    v: &TransformerVars,
    heads: usize,
) -> Var {
    let d = tape.value(x).cols();
    let dh = d / heads;
    let inv_sqrt: S = sc(1.0 / (dh as f64).sqrt());

    let xn = tape.layer_norm_rows(x, v.ln1.g, v.ln1.b, sc(LN_EPS));
    let q = linear_taped(tape, xn, &v.wq);
    let kk = linear_taped(tape, xn, &v.wk);
    let vv = linear_taped(tape, xn, &v.wv);

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(kk, h * dh, dh);
        let vh = tape.slice_cols(vv, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, inv_sqrt);
        let probs = tape.softmax_rows(scaled);
        head_outs.push(tape.matmul(probs, vh));
    }
    let ctx = tape.concat_cols(&head_outs);
    let attn_out = linear_taped(tape, ctx, &v.wo);
    let h1 = tape.add(x, attn_out);

    let hn = tape.layer_norm_rows(h1, v.ln2.g, v.ln2.b, sc(LN_EPS));
    let f1 = linear_taped(tape, hn, &v.ff1);
    let g = tape.gelu(f1);
    let f2 = linear_taped(tape, g, &v.ff2);
    tape.add(h1, f2)
}

// ── Bidirectional LSTM layer ─────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LstmDir<S: Scalar> {
    pub w_ih: Tensor<S>, // 4h×din
    pub w_hh: Tensor<S>, // 4h×h
    pub bias: Tensor<S>, // 4h, single bias per gate set
}

pub(crate) struct LstmDirVars {
    w_ih: Var,
    w_hh: Var,
    b: Var,
}

impl<S: Scalar> LstmDir<S> {
    pub fn init(din: usize, h: usize, rng: &mut Rng) -> Self {
        LstmDir {
            w_ih: uniform_init(vec![4 * h, din], din, rng),
            w_hh: uniform_init(vec![4 * h, h], h, rng),
            bias: uniform_init(vec![4 * h], h, rng),
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, S>) {
        out.push((format!("{prefix}.w_ih"), &self.w_ih));
        out.push((format!("{prefix}.w_hh"), &self.w_hh));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<S>>) {
        out.push(&mut self.w_ih);
        out.push(&mut self.w_hh);
        out.push(&mut self.bias);
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_, S>) -> LstmDirVars {
        LstmDirVars { w_ih: b.bind(&self.w_ih), w_hh: b.bind(&self.w_hh), b: b.bind(&self.bias) }
    }

    fn infer(&self, x: &[S], t: usize, din: usize) -> Vec<S> {
        let h = self.w_hh.cols();
        k::lstm_dir(x, t, din, self.w_ih.data(), self.w_hh.data(), self.bias.data(), h, None)
    }
}

/// One bidirectional layer: forward and time-reversed passes concatenated
/// per frame, output width 2h.
#[derive(Debug, Clone)]
pub struct BiLstmLayer<S: Scalar> {
    pub fwd: LstmDir<S>,
    pub bwd: LstmDir<S>,
}

pub(crate) struct BiLstmVars {
    fwd: LstmDirVars,
    bwd: LstmDirVars,
}

impl<S: Scalar> BiLstmLayer<S> {
    pub fn init(din: usize, h: usize, rng: &mut Rng) -> Self {
        BiLstmLayer { fwd: LstmDir::init(din, h, rng), bwd: LstmDir::init(din, h, rng) }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, S>) {
        self.fwd.named(&format!("{prefix}.fwd"), out);
        self.bwd.named(&format!("{prefix}.bwd"), out);
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<S>>) {
        self.fwd.tensors_mut(out);
        self.bwd.tensors_mut(out);
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_, S>) -> BiLstmVars {
        BiLstmVars { fwd: self.fwd.bind(b), bwd: self.bwd.bind(b) }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        let (t, din) = (x.rows(), x.cols());
        let h = self.fwd.w_hh.cols();
        let f = self.fwd.infer(x.data(), t, din);

        let mut xr = Vec::with_capacity(t * din);
        for r in (0..t).rev() {
            xr.extend_from_slice(&x.data()[r * din..(r + 1) * din]);
        }
        let br = self.bwd.infer(&xr, t, din);

        let mut out = vec![S::zero(); t * 2 * h];
        for r in 0..t {
            out[r * 2 * h..r * 2 * h + h].copy_from_slice(&f[r * h..(r + 1) * h]);
            out[r * 2 * h + h..(r + 1) * 2 * h]
                .copy_from_slice(&br[(t - 1 - r) * h..(t - r) * h]);
        }
        Tensor::from_parts(vec![t, 2 * h], out)
    }
}

pub(crate) fn bilstm_layer_taped<S: Scalar>(tape: &mut Tape<S>, x: Var, v: &BiLstmVars) -> Var {
    let f = tape.lstm_dir(x, v.fwd.w_ih, v.fwd.w_hh, v.fwd.b);
    let xr = tape.reverse_rows(x);
    let br = tape.lstm_dir(xr, v.bwd.w_ih, v.bwd.w_hh, v.bwd.b);
    let bwd = tape.reverse_rows(br);
    tape.concat_cols(&[f, bwd])
}

// ── Prediction heads ─────────────────────────────────────────────────

pub(crate) const COSINE_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub enum Head<S: Scalar> {
    /// Plain affine projection to C logit columns.
    Linear(Linear<S>),
    /// Cosine similarity between projected outputs and learned cluster
    /// embeddings, scaled by 1/temperature.
    Cosine { proj: Tensor<S>, embeddings: Tensor<S>, temperature: f64 },
}

pub(crate) enum HeadVars {
    Linear(LinearVars),
    Cosine { proj: Var, emb: Var, temperature: f64 },
}

impl<S: Scalar> Head<S> {
    pub fn init_linear(din: usize, classes: usize, rng: &mut Rng) -> Self {
        Head::Linear(Linear::init(din, classes, true, rng))
    }

    pub fn init_cosine(
        din: usize,
        head_dim: usize,
        classes: usize,
        temperature: f64,
        rng: &mut Rng,
    ) -> Self {
        Head::Cosine {
            proj: uniform_init(vec![head_dim, din], din, rng),
            embeddings: uniform_init(vec![classes, head_dim], head_dim, rng),
            temperature,
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, S>) {
        match self {
            Head::Linear(l) => l.named(&format!("{prefix}.linear"), out),
            Head::Cosine { proj, embeddings, .. } => {
                out.push((format!("{prefix}.proj"), proj));
                out.push((format!("{prefix}.embeddings"), embeddings));
            }
        }
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<S>>) {
        match self {
            Head::Linear(l) => l.tensors_mut(out),
            Head::Cosine { proj, embeddings, .. } => {
                out.push(proj);
                out.push(embeddings);
            }
        }
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_, S>) -> HeadVars {
        match self {
            Head::Linear(l) => HeadVars::Linear(l.bind(b)),
            Head::Cosine { proj, embeddings, temperature } => HeadVars::Cosine {
                proj: b.bind(proj),
                emb: b.bind(embeddings),
                temperature: *temperature,
            },
        }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        match self {
            Head::Linear(l) => l.infer(x),
            Head::Cosine { proj, embeddings, temperature } => {
                let (t, d) = (x.rows(), x.cols());
                let hd = proj.rows();
                let c = embeddings.rows();
                let u = k::affine(x.data(), proj.data(), None, t, d, hd);
                let (un, _) = k::normalize_rows(&u, t, hd, sc(COSINE_NORM_FLOOR));
                let (en, _) = k::normalize_rows(embeddings.data(), c, hd, sc(COSINE_NORM_FLOOR));
                let mut sims = k::matmul_nt(&un, &en, t, hd, c);
                let inv: S = sc(1.0 / temperature);
                for s in sims.iter_mut() {
                    *s = *s * inv;
                }
                Tensor::from_parts(vec![t, c], sims)
            }
        }
    }
}

pub(crate) fn head_taped<S: Scalar>(tape: &mut Tape<S>, x: Var, v: &HeadVars) -> Var {
    match v {
        HeadVars::Linear(l) => linear_taped(tape, x, l),
        HeadVars::Cosine { proj, emb, temperature } => {
            let u = tape.affine(x, *proj, None);
            let un = tape.normalize_rows(u, sc(COSINE_NORM_FLOOR));
            let en = tape.normalize_rows(*emb, sc(COSINE_NORM_FLOOR));
            let sims = tape.matmul_nt(un, en);
            tape.scale(sims, sc(1.0 / *temperature))
        }
    }
}
