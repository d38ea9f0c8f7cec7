//! Reverse-mode differentiation on a linear tape.
//!
//! Forward ops append nodes (value + backward record) in creation order;
//! [`Tape::backward`] replays the records in reverse, accumulating
//! vector-Jacobian products into per-node gradient buffers. Accumulation
//! order is fixed by the tape order, so gradients are bit-reproducible for
//! a fixed graph.
//!
//! Non-finite op outputs do not panic mid-training: they poison the tape,
//! and the poison surfaces as an error from [`Tape::backward`] (or via
//! [`Tape::poisoned`], which training loops check each step).

use super::kernels as k;
use super::tensor::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tape node. Cheap to copy; only valid for the tape that
/// created it.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gradient accumulator handed to backward records.
pub struct GradSink<'a, S: Scalar> {
    grads: &'a mut [Option<Vec<S>>],
    numels: &'a [usize],
    wants: &'a [bool],
}

impl<S: Scalar> GradSink<'_, S> {
    /// Accumulates a contribution for `v`. No-op when nothing upstream of
    /// `v` requires gradients.
    pub fn add(&mut self, v: Var, contrib: &[S]) {
        if !self.wants[v.0] {
            return;
        }
        debug_assert_eq!(contrib.len(), self.numels[v.0], "gradient size mismatch");
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib.iter()) {
                    *gi += c;
                }
            }
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    pub fn wants(&self, v: Var) -> bool {
        self.wants[v.0]
    }
}

/// A recorded operation's backward rule.
pub trait TapeOp<S: Scalar> {
    fn backward(&self, vals: &[Tensor<S>], grad_out: &[S], sink: &mut GradSink<'_, S>);
}

pub struct Tape<S: Scalar> {
    vals: Vec<Tensor<S>>,
    backs: Vec<Option<Box<dyn TapeOp<S>>>>,
    wants: Vec<bool>,
    grads: Vec<Option<Vec<S>>>,
    poisoned: Option<String>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), backs: Vec::new(), wants: Vec::new(), grads: Vec::new(), poisoned: None }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.vals[v.0]
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.vals[v.0].data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert!(self.vals[v.0].is_scalar());
        self.vals[v.0].data()[0]
    }

    /// Name of the first op that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<&str> {
        self.poisoned.as_deref()
    }

    fn push_node(&mut self, value: Tensor<S>, wants: bool, back: Option<Box<dyn TapeOp<S>>>, opname: &str) -> Var {
        if self.poisoned.is_none() && !value.all_finite() {
            self.poisoned = Some(opname.to_string());
        }
        let id = self.vals.len();
        self.vals.push(value);
        self.backs.push(back);
        self.wants.push(wants);
        self.grads.push(None);
        Var(id)
    }

    fn wants_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.wants[v.0])
    }

    /// Records a node with a caller-supplied backward rule. `parents` only
    /// determines whether gradients are needed at all; the rule itself is
    /// responsible for routing contributions.
    pub fn custom(&mut self, parents: &[Var], value: Tensor<S>, op: Box<dyn TapeOp<S>>, opname: &str) -> Var {
        let wants = self.wants_any(parents);
        self.push_node(value, wants, if wants { Some(op) } else { None }, opname)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Gradient-free leaf (inputs, cached teacher logits, ...).
    pub fn constant(&mut self, data: &[S], shape: Vec<usize>) -> Var {
        self.push_node(Tensor::from_parts(shape, data.to_vec()), false, None, "constant")
    }

    /// Gradient-carrying leaf snapshotting a parameter tensor.
    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        self.push_node(
            Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()),
            true,
            None,
            "param",
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Runs reverse-mode accumulation from a scalar root. Gradients of all
    /// reachable gradient-carrying nodes are populated, in reverse tape
    /// order with deterministic accumulation.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if let Some(op) = &self.poisoned {
            return Err(Error::NonFinite(format!("tape op '{op}'")));
        }
        if !self.vals[root.0].is_scalar() {
            return Err(Error::NonScalarRoot(self.vals[root.0].numel()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(vec![S::one()]);

        let numels: Vec<usize> = self.vals.iter().map(|t| t.numel()).collect();
        for id in (0..=root.0).rev() {
            if self.backs[id].is_none() || self.grads[id].is_none() {
                continue;
            }
            let grad_out = self.grads[id].clone().unwrap();
            let back = self.backs[id].take().unwrap();
            {
                let mut sink = GradSink { grads: &mut self.grads, numels: &numels, wants: &self.wants };
                back.backward(&self.vals, &grad_out, &mut sink);
            }
            self.backs[id] = Some(back);
        }
        Ok(())
    }

    /// Accumulated gradient for a node, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    // ── Elementwise / reduction ops ──────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let wants = self.wants_any(&[a, b]);
        self.push_node(t, wants, Some(Box::new(AddOp { a, b })), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let wants = self.wants_any(&[a, b]);
        self.push_node(t, wants, Some(Box::new(MulOp { a, b })), "mul")
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let data: Vec<S> = self.data(a).iter().map(|&x| x * c).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let wants = self.wants[a.0];
        self.push_node(t, wants, Some(Box::new(ScaleOp { a, c })), "scale")
    }

    /// out = ca·a + cb·b (same shapes).
    pub fn add_scaled(&mut self, a: Var, b: Var, ca: S, cb: S) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add_scaled: shape mismatch");
        let data: Vec<S> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| ca * x + cb * y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let wants = self.wants_any(&[a, b]);
        self.push_node(t, wants, Some(Box::new(AddScaledOp { a, b, ca, cb })), "add_scaled")
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.data(a).iter().cloned().sum();
        let wants = self.wants[a.0];
        self.push_node(Tensor::scalar(s), wants, Some(Box::new(SumOp { a })), "sum")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let wants = self.wants[a.0];
        let mut tanh_cache = Vec::new();
        let data: Vec<S> = if wants {
            tanh_cache.reserve(self.data(a).len());
            self.data(a)
                .iter()
                .map(|&x| {
                    let (y, th) = k::gelu_val_tanh(x);
                    tanh_cache.push(th);
                    y
                })
                .collect()
        } else {
            self.data(a).iter().map(|&x| k::gelu_val(x)).collect()
        };
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push_node(t, wants, Some(Box::new(GeluOp { a, tanh_cache })), "gelu")
    }

    // ── Matrix ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = (self.vals[a.0].rows(), self.vals[a.0].cols());
        let (kb, n) = (self.vals[b.0].rows(), self.vals[b.0].cols());
        assert_eq!(ka, kb, "matmul: inner dimensions {ka} vs {kb}");
        let data = k::matmul(self.data(a), self.data(b), m, ka, n);
        let t = Tensor::from_parts(vec![m, n], data);
        let wants = self.wants_any(&[a, b]);
        self.push_node(t, wants, Some(Box::new(MatmulOp { a, b, m, k: ka, n })), "matmul")
    }

    /// out = a·bᵀ with a: m×k, b: n×k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = (self.vals[a.0].rows(), self.vals[a.0].cols());
        let (n, kb) = (self.vals[b.0].rows(), self.vals[b.0].cols());
        assert_eq!(ka, kb, "matmul_nt: inner dimensions {ka} vs {kb}");
        let data = k::matmul_nt(self.data(a), self.data(b), m, ka, n);
        let t = Tensor::from_parts(vec![m, n], data);
        let wants = self.wants_any(&[a, b]);
        self.push_node(t, wants, Some(Box::new(MatmulNtOp { a, b, m, k: ka, n })), "matmul_nt")
    }

    /// out = x·wᵀ (+ bias rows), x: t×din, w: dout×din, bias: dout.
    pub fn affine(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (t, din) = (self.vals[x.0].rows(), self.vals[x.0].cols());
        let (dout, dw) = (self.vals[w.0].rows(), self.vals[w.0].cols());
        assert_eq!(din, dw, "affine: input dim {din} vs weight dim {dw}");
        let b_ref = bias.map(|b| self.data(b).to_vec());
        let data = k::affine(self.data(x), self.data(w), b_ref.as_deref(), t, din, dout);
        let tensor = Tensor::from_parts(vec![t, dout], data);
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let wants = self.wants_any(&parents);
        self.push_node(tensor, wants, Some(Box::new(AffineOp { x, w, bias, t, din, dout })), "affine")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = (self.vals[x.0].rows(), self.vals[x.0].cols());
        let mut data = self.data(x).to_vec();
        k::softmax_rows_inplace(&mut data, rows, cols);
        let t = Tensor::from_parts(vec![rows, cols], data);
        let wants = self.wants[x.0];
        let out = self.push_node(t, wants, None, "softmax_rows");
        self.backs[out.0] = Some(Box::new(SoftmaxRowsOp { x, out, rows, cols }));
        out
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Var {
        let (rows, cols) = (self.vals[x.0].rows(), self.vals[x.0].cols());
        assert_eq!(self.vals[gain.0].numel(), cols);
        assert_eq!(self.vals[bias.0].numel(), cols);
        let (data, means, rstds) =
            k::layer_norm_rows(self.data(x), rows, cols, self.data(gain), self.data(bias), eps);
        let t = Tensor::from_parts(vec![rows, cols], data);
        let wants = self.wants_any(&[x, gain, bias]);
        self.push_node(
            t,
            wants,
            Some(Box::new(LayerNormOp { x, gain, bias, rows, cols, means, rstds })),
            "layer_norm_rows",
        )
    }

    /// Unit-L2 rows with a norm floor.
    pub fn normalize_rows(&mut self, x: Var, floor: S) -> Var {
        let (rows, cols) = (self.vals[x.0].rows(), self.vals[x.0].cols());
        let (data, norms) = k::normalize_rows(self.data(x), rows, cols, floor);
        let t = Tensor::from_parts(vec![rows, cols], data);
        let wants = self.wants[x.0];
        let out = self.push_node(t, wants, None, "normalize_rows");
        self.backs[out.0] = Some(Box::new(NormalizeRowsOp { x, out, rows, cols, norms, floor }));
        out
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let (rows, cols) = (self.vals[x.0].rows(), self.vals[x.0].cols());
        assert!(start + width <= cols, "slice_cols out of range");
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let t = Tensor::from_parts(vec![rows, width], data);
        let wants = self.wants[x.0];
        self.push_node(t, wants, Some(Box::new(SliceColsOp { x, start, width, rows, cols })), "slice_cols")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rows = self.vals[xs[0].0].rows();
        let widths: Vec<usize> = xs.iter().map(|v| self.vals[v.0].cols()).collect();
        for v in xs {
            assert_eq!(self.vals[v.0].rows(), rows, "concat_cols: row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in xs.iter().zip(widths.iter()) {
                let src = self.vals[v.0].data();
                data.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::from_parts(vec![rows, total], data);
        let wants = self.wants_any(xs);
        self.push_node(
            t,
            wants,
            Some(Box::new(ConcatColsOp { xs: xs.to_vec(), widths, rows })),
            "concat_cols",
        )
    }

    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = (self.vals[x.0].rows(), self.vals[x.0].cols());
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * cols);
        for r in (0..rows).rev() {
            data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::from_parts(vec![rows, cols], data);
        let wants = self.wants[x.0];
        self.push_node(t, wants, Some(Box::new(ReverseRowsOp { x, rows, cols })), "reverse_rows")
    }

    // ── Structured layers ────────────────────────────────────────────

    /// Strided valid convolution; x: t_in×c_in, w: [c_out][c_in][k], b: c_out.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (t_in, c_in) = (self.vals[x.0].rows(), self.vals[x.0].cols());
        let wshape = self.vals[w.0].shape().to_vec();
        assert_eq!(wshape.len(), 3, "conv1d weight must be [c_out][c_in][k]");
        let (c_out, wc_in, kk) = (wshape[0], wshape[1], wshape[2]);
        assert_eq!(c_in, wc_in, "conv1d: channel mismatch");
        let (data, t_out) =
            k::conv1d(self.data(x), t_in, c_in, self.data(w), self.data(b), c_out, kk, stride);
        let t = Tensor::from_parts(vec![t_out, c_out], data);
        let wants = self.wants_any(&[x, w, b]);
        self.push_node(
            t,
            wants,
            Some(Box::new(Conv1dOp { x, w, b, t_in, c_in, c_out, k: kk, stride, t_out })),
            "conv1d",
        )
    }

    /// Same-length grouped convolution with zero padding (odd kernel).
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var, groups: usize) -> Var {
        let (t, c) = (self.vals[x.0].rows(), self.vals[x.0].cols());
        let wshape = self.vals[w.0].shape().to_vec();
        assert_eq!(wshape.len(), 3);
        let kk = wshape[2];
        assert_eq!(wshape[0], c);
        assert_eq!(wshape[1], c / groups);
        let data = k::conv1d_same_grouped(self.data(x), t, c, self.data(w), self.data(b), kk, groups);
        let tensor = Tensor::from_parts(vec![t, c], data);
        let wants = self.wants_any(&[x, w, b]);
        self.push_node(
            tensor,
            wants,
            Some(Box::new(Conv1dSameOp { x, w, b, t, c, k: kk, groups })),
            "conv1d_same",
        )
    }

    /// Single-direction LSTM; x: t×din, w_ih: 4h×din, w_hh: 4h×h, b: 4h.
    pub fn lstm_dir(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Var {
        let (t, din) = (self.vals[x.0].rows(), self.vals[x.0].cols());
        let h = self.vals[w_hh.0].cols();
        assert_eq!(self.vals[w_ih.0].shape(), &[4 * h, din], "lstm w_ih shape");
        assert_eq!(self.vals[w_hh.0].shape(), &[4 * h, h], "lstm w_hh shape");
        assert_eq!(self.vals[b.0].numel(), 4 * h, "lstm bias shape");
        let mut cache = k::LstmCache { gates: Vec::new(), cells: Vec::new(), tanh_c: Vec::new() };
        let data = k::lstm_dir(
            self.data(x),
            t,
            din,
            self.data(w_ih),
            self.data(w_hh),
            self.data(b),
            h,
            Some(&mut cache),
        );
        let tensor = Tensor::from_parts(vec![t, h], data);
        let wants = self.wants_any(&[x, w_ih, w_hh, b]);
        let out = self.push_node(tensor, wants, None, "lstm_dir");
        self.backs[out.0] = Some(Box::new(LstmDirOp { x, w_ih, w_hh, b, out, t, din, h, cache }));
        out
    }

    /// Replaces the rows listed in `mask` with a broadcast embedding row.
    pub fn mask_rows(&mut self, x: Var, emb: Var, mask: &[usize]) -> Var {
        let (rows, cols) = (self.vals[x.0].rows(), self.vals[x.0].cols());
        assert_eq!(self.vals[emb.0].numel(), cols, "mask embedding dim");
        let mut data = self.data(x).to_vec();
        let e = self.data(emb).to_vec();
        for &r in mask {
            assert!(r < rows);
            data[r * cols..(r + 1) * cols].copy_from_slice(&e);
        }
        let t = Tensor::from_parts(vec![rows, cols], data);
        let wants = self.wants_any(&[x, emb]);
        self.push_node(
            t,
            wants,
            Some(Box::new(MaskRowsOp { x, emb, mask: mask.to_vec(), rows, cols })),
            "mask_rows",
        )
    }

    /// Convex combination of equally shaped layers with softmax-normalized
    /// weights: out = Σ softmax(w)_l · layer_l.
    pub fn weighted_sum(&mut self, layers: &[Var], w: Var) -> Var {
        assert!(!layers.is_empty());
        assert_eq!(self.vals[w.0].numel(), layers.len(), "one weight per layer");
        let shape = self.shape(layers[0]).to_vec();
        for l in layers {
            assert_eq!(self.shape(*l), &shape[..], "weighted_sum: layer shape mismatch");
        }
        let mut a = self.data(w).to_vec();
        k::softmax_rows_inplace(&mut a, 1, layers.len());
        let numel = self.vals[layers[0].0].numel();
        let mut data = vec![S::zero(); numel];
        for (l, &al) in layers.iter().zip(a.iter()) {
            for (o, &v) in data.iter_mut().zip(self.data(*l)) {
                *o = *o + al * v;
            }
        }
        let t = Tensor::from_parts(shape, data);
        let mut parents = layers.to_vec();
        parents.push(w);
        let wants = self.wants_any(&parents);
        self.push_node(
            t,
            wants,
            Some(Box::new(WeightedSumOp { layers: layers.to_vec(), w, coeffs: a, numel })),
            "weighted_sum",
        )
    }
}

// ── Backward records ─────────────────────────────────────────────────

struct AddOp {
    a: Var,
    b: Var,
}
impl<S: Scalar> TapeOp<S> for AddOp {
    fn backward(&self, _vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        sink.add(self.a, g);
        sink.add(self.b, g);
    }
}

struct MulOp {
    a: Var,
    b: Var,
}
impl<S: Scalar> TapeOp<S> for MulOp {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        if sink.wants(self.a) {
            let da: Vec<S> =
                g.iter().zip(vals[self.b.0].data()).map(|(&gi, &bi)| gi * bi).collect();
            sink.add(self.a, &da);
        }
        if sink.wants(self.b) {
            let db: Vec<S> =
                g.iter().zip(vals[self.a.0].data()).map(|(&gi, &ai)| gi * ai).collect();
            sink.add(self.b, &db);
        }
    }
}

struct ScaleOp<S> {
    a: Var,
    c: S,
}
impl<S: Scalar> TapeOp<S> for ScaleOp<S> {
    fn backward(&self, _vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let da: Vec<S> = g.iter().map(|&gi| gi * self.c).collect();
        sink.add(self.a, &da);
    }
}

struct AddScaledOp<S> {
    a: Var,
    b: Var,
    ca: S,
    cb: S,
}
impl<S: Scalar> TapeOp<S> for AddScaledOp<S> {
    fn backward(&self, _vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        if sink.wants(self.a) {
            let da: Vec<S> = g.iter().map(|&gi| gi * self.ca).collect();
            sink.add(self.a, &da);
        }
        if sink.wants(self.b) {
            let db: Vec<S> = g.iter().map(|&gi| gi * self.cb).collect();
            sink.add(self.b, &db);
        }
    }
}

struct SumOp {
    a: Var,
}
impl<S: Scalar> TapeOp<S> for SumOp {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let da = vec![g[0]; vals[self.a.0].numel()];
        sink.add(self.a, &da);
    }
}

struct GeluOp<S> {
    a: Var,
    /// tanh(u) saved by the forward pass; the derivative reuses it instead
    /// of re-evaluating the exponential.
    tanh_cache: Vec<S>,
}
impl<S: Scalar> TapeOp<S> for GeluOp<S> {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let da: Vec<S> = g
            .iter()
            .zip(vals[self.a.0].data())
            .zip(self.tanh_cache.iter())
            .map(|((&gi, &x), &th)| gi * k::gelu_grad_with_tanh(x, th))
            .collect();
        sink.add(self.a, &da);
    }
}

struct MatmulOp {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
}
impl<S: Scalar> TapeOp<S> for MatmulOp {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        if sink.wants(self.a) {
            // dA = G·Bᵀ
            let da = k::matmul_nt_untallied(g, vals[self.b.0].data(), self.m, self.n, self.k);
            sink.add(self.a, &da);
        }
        if sink.wants(self.b) {
            // dB = Aᵀ·G
            let db = k::matmul_tn_untallied(vals[self.a.0].data(), g, self.m, self.k, self.n);
            sink.add(self.b, &db);
        }
    }
}

struct MatmulNtOp {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
}
impl<S: Scalar> TapeOp<S> for MatmulNtOp {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        if sink.wants(self.a) {
            // dA = G·B
            let da = k::matmul_untallied(g, vals[self.b.0].data(), self.m, self.n, self.k);
            sink.add(self.a, &da);
        }
        if sink.wants(self.b) {
            // dB = Gᵀ·A
            let db = k::matmul_tn_untallied(g, vals[self.a.0].data(), self.m, self.n, self.k);
            sink.add(self.b, &db);
        }
    }
}

struct AffineOp {
    x: Var,
    w: Var,
    bias: Option<Var>,
    t: usize,
    din: usize,
    dout: usize,
}
impl<S: Scalar> TapeOp<S> for AffineOp {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        if sink.wants(self.x) {
            // dX = G·W
            let dx = k::matmul_untallied(g, vals[self.w.0].data(), self.t, self.dout, self.din);
            sink.add(self.x, &dx);
        }
        if sink.wants(self.w) {
            // dW = Gᵀ·X
            let dw = k::matmul_tn_untallied(g, vals[self.x.0].data(), self.t, self.dout, self.din);
            sink.add(self.w, &dw);
        }
        if let Some(b) = self.bias {
            if sink.wants(b) {
                let mut db = vec![S::zero(); self.dout];
                for row in g.chunks_exact(self.dout) {
                    for (d, &gi) in db.iter_mut().zip(row.iter()) {
                        *d += gi;
                    }
                }
                sink.add(b, &db);
            }
        }
    }
}

struct SoftmaxRowsOp {
    x: Var,
    out: Var,
    rows: usize,
    cols: usize,
}
impl<S: Scalar> TapeOp<S> for SoftmaxRowsOp {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let p = vals[self.out.0].data();
        let mut dx = vec![S::zero(); self.rows * self.cols];
        for r in 0..self.rows {
            let base = r * self.cols;
            let mut dot = S::zero();
            for c in 0..self.cols {
                dot = dot + g[base + c] * p[base + c];
            }
            for c in 0..self.cols {
                dx[base + c] = p[base + c] * (g[base + c] - dot);
            }
        }
        sink.add(self.x, &dx);
    }
}

struct LayerNormOp<S> {
    x: Var,
    gain: Var,
    bias: Var,
    rows: usize,
    cols: usize,
    means: Vec<S>,
    rstds: Vec<S>,
}
impl<S: Scalar> TapeOp<S> for LayerNormOp<S> {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let x = vals[self.x.0].data();
        let gain = vals[self.gain.0].data();
        let n = sc::<S>(self.cols as f64);
        let mut dgain = vec![S::zero(); self.cols];
        let mut dbias = vec![S::zero(); self.cols];
        let mut dx = vec![S::zero(); self.rows * self.cols];
        for r in 0..self.rows {
            let base = r * self.cols;
            let (mean, rstd) = (self.means[r], self.rstds[r]);
            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for c in 0..self.cols {
                let xhat = (x[base + c] - mean) * rstd;
                let dy = g[base + c];
                dgain[c] += dy * xhat;
                dbias[c] += dy;
                let dxhat = dy * gain[c];
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            }
            for c in 0..self.cols {
                let xhat = (x[base + c] - mean) * rstd;
                let dxhat = g[base + c] * gain[c];
                dx[base + c] = rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
            }
        }
        sink.add(self.x, &dx);
        sink.add(self.gain, &dgain);
        sink.add(self.bias, &dbias);
    }
}

struct NormalizeRowsOp<S> {
    x: Var,
    out: Var,
    rows: usize,
    cols: usize,
    norms: Vec<S>,
    floor: S,
}
impl<S: Scalar> TapeOp<S> for NormalizeRowsOp<S> {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let x = vals[self.x.0].data();
        let y = vals[self.out.0].data();
        let mut dx = vec![S::zero(); self.rows * self.cols];
        for r in 0..self.rows {
            let base = r * self.cols;
            let n = self.norms[r];
            // Below the floor the divisor is a constant.
            let mut true_ss = S::zero();
            for c in 0..self.cols {
                true_ss = true_ss + x[base + c] * x[base + c];
            }
            let floored = true_ss.sqrt() < self.floor;
            if floored {
                for c in 0..self.cols {
                    dx[base + c] = g[base + c] / n;
                }
            } else {
                let mut dot = S::zero();
                for c in 0..self.cols {
                    dot = dot + g[base + c] * y[base + c];
                }
                for c in 0..self.cols {
                    dx[base + c] = (g[base + c] - y[base + c] * dot) / n;
                }
            }
        }
        sink.add(self.x, &dx);
    }
}

struct SliceColsOp {
    x: Var,
    start: usize,
    width: usize,
    rows: usize,
    cols: usize,
}
impl<S: Scalar> TapeOp<S> for SliceColsOp {
    fn backward(&self, _vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let mut dx = vec![S::zero(); self.rows * self.cols];
        for r in 0..self.rows {
            dx[r * self.cols + self.start..r * self.cols + self.start + self.width]
                .copy_from_slice(&g[r * self.width..(r + 1) * self.width]);
        }
        sink.add(self.x, &dx);
    }
}

struct ConcatColsOp {
    xs: Vec<Var>,
    widths: Vec<usize>,
    rows: usize,
}
impl<S: Scalar> TapeOp<S> for ConcatColsOp {
    fn backward(&self, _vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        for (v, &w) in self.xs.iter().zip(self.widths.iter()) {
            if sink.wants(*v) {
                let mut dv = Vec::with_capacity(self.rows * w);
                for r in 0..self.rows {
                    dv.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                sink.add(*v, &dv);
            }
            offset += w;
        }
    }
}

struct ReverseRowsOp {
    x: Var,
    rows: usize,
    cols: usize,
}
impl<S: Scalar> TapeOp<S> for ReverseRowsOp {
    fn backward(&self, _vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let mut dx = Vec::with_capacity(self.rows * self.cols);
        for r in (0..self.rows).rev() {
            dx.extend_from_slice(&g[r * self.cols..(r + 1) * self.cols]);
        }
        sink.add(self.x, &dx);
    }
}

struct Conv1dOp {
    x: Var,
    w: Var,
    b: Var,
    t_in: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    t_out: usize,
}
impl<S: Scalar> TapeOp<S> for Conv1dOp {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let x = vals[self.x.0].data();
        let w = vals[self.w.0].data();
        let (c_in, c_out, kk, s) = (self.c_in, self.c_out, self.k, self.stride);

        if sink.wants(self.b) {
            let mut db = vec![S::zero(); c_out];
            for row in g.chunks_exact(c_out) {
                for (d, &gi) in db.iter_mut().zip(row.iter()) {
                    *d += gi;
                }
            }
            sink.add(self.b, &db);
        }
        if sink.wants(self.w) {
            // accumulate in [j][ci][co] layout (output channels innermost,
            // axpy-vectorizable), then transpose to [co][ci][k]
            let mut dwr = vec![S::zero(); kk * c_in * c_out];
            for t in 0..self.t_out {
                let g_row = &g[t * c_out..(t + 1) * c_out];
                for j in 0..kk {
                    let x_row = &x[(t * s + j) * c_in..(t * s + j + 1) * c_in];
                    for (ci, &xv) in x_row.iter().enumerate() {
                        let d_row = &mut dwr[(j * c_in + ci) * c_out..(j * c_in + ci + 1) * c_out];
                        for (d, &gv) in d_row.iter_mut().zip(g_row.iter()) {
                            *d += xv * gv;
                        }
                    }
                }
            }
            let mut dw = vec![S::zero(); c_out * c_in * kk];
            for co in 0..c_out {
                for ci in 0..c_in {
                    for j in 0..kk {
                        dw[(co * c_in + ci) * kk + j] = dwr[(j * c_in + ci) * c_out + co];
                    }
                }
            }
            sink.add(self.w, &dw);
        }
        if sink.wants(self.x) {
            // [co][j][ci] weights make each (t, co) contribution one long
            // axpy over the input window
            let mut wr = vec![S::zero(); c_out * kk * c_in];
            for co in 0..c_out {
                for ci in 0..c_in {
                    for j in 0..kk {
                        wr[(co * kk + j) * c_in + ci] = w[(co * c_in + ci) * kk + j];
                    }
                }
            }
            let mut dx = vec![S::zero(); self.t_in * c_in];
            for t in 0..self.t_out {
                let g_row = &g[t * c_out..(t + 1) * c_out];
                for (co, &gv) in g_row.iter().enumerate() {
                    let w_blk = &wr[co * kk * c_in..(co + 1) * kk * c_in];
                    let dx_win = &mut dx[t * s * c_in..(t * s + kk) * c_in];
                    for (d, &wv) in dx_win.iter_mut().zip(w_blk.iter()) {
                        *d += gv * wv;
                    }
                }
            }
            sink.add(self.x, &dx);
        }
    }
}

struct Conv1dSameOp {
    x: Var,
    w: Var,
    b: Var,
    t: usize,
    c: usize,
    k: usize,
    groups: usize,
}
impl<S: Scalar> TapeOp<S> for Conv1dSameOp {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let x = vals[self.x.0].data();
        let w = vals[self.w.0].data();
        let (t, c, kk) = (self.t, self.c, self.k);
        let cg = c / self.groups;
        let half = kk / 2;

        if sink.wants(self.b) {
            let mut db = vec![S::zero(); c];
            for row in g.chunks_exact(c) {
                for (d, &gi) in db.iter_mut().zip(row.iter()) {
                    *d += gi;
                }
            }
            sink.add(self.b, &db);
        }
        let want_w = sink.wants(self.w);
        let want_x = sink.wants(self.x);
        // repacked [co][j][ci] accumulators and weights keep the ci loop
        // contiguous on both sides
        let mut dwr = vec![S::zero(); c * kk * cg];
        let mut wr = vec![S::zero(); c * kk * cg];
        for co in 0..c {
            for ci in 0..cg {
                for j in 0..kk {
                    wr[(co * kk + j) * cg + ci] = w[(co * cg + ci) * kk + j];
                }
            }
        }
        let mut dx = vec![S::zero(); t * c];
        for ti in 0..t {
            for co in 0..c {
                let gv = g[ti * c + co];
                let ci0 = (co / cg) * cg;
                for j in 0..kk {
                    let src = ti as isize + j as isize - half as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    if want_w {
                        let x_row = &x[src * c + ci0..src * c + ci0 + cg];
                        let d_row = &mut dwr[(co * kk + j) * cg..(co * kk + j + 1) * cg];
                        for (d, &xv) in d_row.iter_mut().zip(x_row.iter()) {
                            *d += gv * xv;
                        }
                    }
                    if want_x {
                        let w_row = &wr[(co * kk + j) * cg..(co * kk + j + 1) * cg];
                        let dx_row = &mut dx[src * c + ci0..src * c + ci0 + cg];
                        for (d, &wv) in dx_row.iter_mut().zip(w_row.iter()) {
                            *d += gv * wv;
                        }
                    }
                }
            }
        }
        if want_w {
            let mut dw = vec![S::zero(); c * cg * kk];
            for co in 0..c {
                for ci in 0..cg {
                    for j in 0..kk {
                        dw[(co * cg + ci) * kk + j] = dwr[(co * kk + j) * cg + ci];
                    }
                }
            }
            sink.add(self.w, &dw);
        }
        if want_x {
            sink.add(self.x, &dx);
        }
    }
}

struct MaskRowsOp {
    x: Var,
    emb: Var,
    mask: Vec<usize>,
    rows: usize,
    cols: usize,
}
impl<S: Scalar> TapeOp<S> for MaskRowsOp {
    fn backward(&self, _vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        if sink.wants(self.x) {
            let mut dx = g.to_vec();
            for &r in &self.mask {
                for v in dx[r * self.cols..(r + 1) * self.cols].iter_mut() {
                    *v = S::zero();
                }
            }
            sink.add(self.x, &dx);
        }
        if sink.wants(self.emb) {
            let mut de = vec![S::zero(); self.cols];
            for &r in &self.mask {
                for (d, &gi) in de.iter_mut().zip(&g[r * self.cols..(r + 1) * self.cols]) {
                    *d += gi;
                }
            }
            sink.add(self.emb, &de);
        }
        let _ = self.rows;
    }
}

struct WeightedSumOp<S> {
    layers: Vec<Var>,
    w: Var,
    coeffs: Vec<S>,
    numel: usize,
}
impl<S: Scalar> TapeOp<S> for WeightedSumOp<S> {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let l = self.layers.len();
        // d layer_l = a_l · G
        for (lv, &al) in self.layers.iter().zip(self.coeffs.iter()) {
            if sink.wants(*lv) {
                let dl: Vec<S> = g.iter().map(|&gi| gi * al).collect();
                sink.add(*lv, &dl);
            }
        }
        if sink.wants(self.w) {
            // da_l = <G, layer_l>, then softmax VJP.
            let mut da = vec![S::zero(); l];
            for (i, lv) in self.layers.iter().enumerate() {
                let mut acc = S::zero();
                for (&gi, &vi) in g.iter().zip(vals[lv.0].data()) {
                    acc = acc + gi * vi;
                }
                da[i] = acc;
            }
            let mut dot = S::zero();
            for i in 0..l {
                dot = dot + da[i] * self.coeffs[i];
            }
            let dw: Vec<S> = (0..l).map(|i| self.coeffs[i] * (da[i] - dot)).collect();
            sink.add(self.w, &dw);
        }
        let _ = self.numel;
    }
}

struct LstmDirOp<S: Scalar> {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    out: Var,
    t: usize,
    din: usize,
    h: usize,
    cache: k::LstmCache<S>,
}
impl<S: Scalar> TapeOp<S> for LstmDirOp<S> {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let x = vals[self.x.0].data();
        let w_ih = vals[self.w_ih.0].data();
        let w_hh = vals[self.w_hh.0].data();
        let h_seq = vals[self.out.0].data();
        let (t, din, h) = (self.t, self.din, self.h);
        let gates = &self.cache.gates;
        let cells = &self.cache.cells;
        let tanh_c = &self.cache.tanh_c;

        let mut dx = vec![S::zero(); t * din];
        let mut dw_ih = vec![S::zero(); 4 * h * din];
        let mut dw_hh = vec![S::zero(); 4 * h * h];
        let mut db = vec![S::zero(); 4 * h];
        let mut dh_next = vec![S::zero(); h];
        let mut dc_next = vec![S::zero(); h];
        let mut pre = vec![S::zero(); 4 * h];

        for ti in (0..t).rev() {
            for j in 0..h {
                let ig = gates[ti * 4 * h + j];
                let fg = gates[ti * 4 * h + h + j];
                let gg = gates[ti * 4 * h + 2 * h + j];
                let og = gates[ti * 4 * h + 3 * h + j];
                let tc = tanh_c[ti * h + j];
                let c_prev = if ti > 0 { cells[(ti - 1) * h + j] } else { S::zero() };

                let dh = g[ti * h + j] + dh_next[j];
                let do_ = dh * tc;
                let dc = dc_next[j] + dh * og * (S::one() - tc * tc);
                let di = dc * gg;
                let dg = dc * ig;
                let df = dc * c_prev;
                dc_next[j] = dc * fg;

                pre[j] = di * ig * (S::one() - ig);
                pre[h + j] = df * fg * (S::one() - fg);
                pre[2 * h + j] = dg * (S::one() - gg * gg);
                pre[3 * h + j] = do_ * og * (S::one() - og);
            }
            let x_t = &x[ti * din..(ti + 1) * din];
            let dx_t = &mut dx[ti * din..(ti + 1) * din];
            for j in dh_next.iter_mut() {
                *j = S::zero();
            }
            for (gi, &p) in pre.iter().enumerate() {
                db[gi] += p;
                let wr = &w_ih[gi * din..(gi + 1) * din];
                let dwr = &mut dw_ih[gi * din..(gi + 1) * din];
                for ((d, &xv), (dxv, &wv)) in
                    dwr.iter_mut().zip(x_t.iter()).zip(dx_t.iter_mut().zip(wr.iter()))
                {
                    *d += p * xv;
                    *dxv += p * wv;
                }
                let hr = &w_hh[gi * h..(gi + 1) * h];
                let dhr = &mut dw_hh[gi * h..(gi + 1) * h];
                if ti > 0 {
                    let h_prev = &h_seq[(ti - 1) * h..ti * h];
                    for ((d, &hv), (dn, &wv)) in
                        dhr.iter_mut().zip(h_prev.iter()).zip(dh_next.iter_mut().zip(hr.iter()))
                    {
                        *d += p * hv;
                        *dn += p * wv;
                    }
                }
            }
        }
        sink.add(self.x, &dx);
        sink.add(self.w_ih, &dw_ih);
        sink.add(self.w_hh, &dw_hh);
        sink.add(self.b, &db);
    }
}
