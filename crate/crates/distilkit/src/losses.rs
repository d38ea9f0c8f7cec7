//! Distillation and classification losses.
//!
//! Two routes to the same quantity are kept deliberately separate:
//! [`kd_loss`] evaluates the temperature-softened KL divergence directly,
//! while [`dkd_components`] evaluates its target/non-target decomposition.
//! Their algebraic identity (kd = tckd + (1 − p_t)·nckd) is a test target,
//! not an implementation shortcut.
//!
//! All scalar reference functions accumulate in f64 regardless of the
//! payload type. The `*_rows` functions are the taped batch kernels used
//! by training; their backward rules are the analytic gradients, verified
//! against finite differences in the test suite.

use crate::error::{Error, Result};
use crate::numerics::kernels::row_softmax_f64;
use crate::numerics::tape::{GradSink, Tape, TapeOp, Var};
use crate::numerics::tensor::{sc, Scalar, Tensor};
use crate::numerics::PROB_FLOOR;

/// Loss weights for decoupled distillation.
#[derive(Debug, Clone, Copy)]
pub struct DkdWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl DkdWeights {
    pub fn new(alpha: f64, beta: f64, tau: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !(beta >= 0.0) {
            return Err(Error::Precondition(format!(
                "dkd weights must be nonnegative, got alpha={alpha} beta={beta}"
            )));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::BadTemperature(tau));
        }
        Ok(DkdWeights { alpha, beta, tau })
    }
}

/// Per-frame labels plus the set of masked timesteps.
#[derive(Debug, Clone)]
pub struct FrameTargets {
    labels: Vec<usize>,
    mask_indices: Vec<usize>,
}

impl FrameTargets {
    /// `mask_indices` must be sorted, unique, and within `[0, labels.len())`.
    pub fn new(labels: Vec<usize>, mask_indices: Vec<usize>) -> Result<Self> {
        let t = labels.len();
        for w in mask_indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Precondition("mask indices must be sorted and unique".into()));
            }
        }
        if let Some(&last) = mask_indices.last() {
            if last >= t {
                return Err(Error::Precondition(format!(
                    "mask index {last} out of range for {t} frames"
                )));
            }
        }
        Ok(FrameTargets { labels, mask_indices })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn mask_indices(&self) -> &[usize] {
        &self.mask_indices
    }

    pub fn frames(&self) -> usize {
        self.labels.len()
    }
}

/// Reduction over the rows a batch loss touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Plain sum over selected rows.
    Sum,
    /// Mean over selected rows (loss magnitude independent of batch size).
    Mean,
}

/// Result of the masked cluster loss; `empty_mask` flags batches that
/// contributed no masked frame (the value is then 0, not NaN).
#[derive(Debug, Clone, Copy)]
pub struct MaskedLoss<S> {
    pub value: S,
    pub empty_mask: bool,
}

// ── Row-level routines (f64) ─────────────────────────────────────────

/// Direct route: KL(softmax_t(teacher) ‖ softmax_t(student)) · τ².
pub(crate) fn kd_row_f64(teacher: &[f64], student: &[f64], tau: f64) -> f64 {
    let pt = row_softmax_f64(teacher, tau);
    let ps = row_softmax_f64(student, tau);
    let mut kl = 0.0;
    for (&p, &q) in pt.iter().zip(ps.iter()) {
        if p > 0.0 {
            kl += p * (p / q.max(PROB_FLOOR)).ln();
        }
    }
    kl * tau * tau
}

/// Decomposed route: (tckd, nckd, teacher target probability).
pub(crate) fn dkd_row_f64(
    teacher: &[f64],
    student: &[f64],
    target: usize,
    tau: f64,
) -> Result<(f64, f64, f64)> {
    let c = teacher.len();
    let pt = row_softmax_f64(teacher, tau);
    let ps = row_softmax_f64(student, tau);
    let (tt, st) = (pt[target], ps[target]);
    let (tn, sn) = (1.0 - tt, 1.0 - st);
    if tn < PROB_FLOOR || sn < PROB_FLOOR {
        return Err(Error::DegenerateTarget);
    }
    let t2 = tau * tau;

    let mut tckd = 0.0;
    if tt > 0.0 {
        tckd += tt * (tt / st.max(PROB_FLOOR)).ln();
    }
    if tn > 0.0 {
        tckd += tn * (tn / sn.max(PROB_FLOOR)).ln();
    }
    tckd *= t2;

    // One non-target class renormalizes to [1] on both sides.
    let mut nckd = 0.0;
    if c > 2 {
        for i in 0..c {
            if i == target {
                continue;
            }
            let p = pt[i] / tn;
            if p > 0.0 {
                let q = (ps[i] / sn).max(PROB_FLOOR);
                nckd += p * (p / q).ln();
            }
        }
        nckd *= t2;
    }
    Ok((tckd, nckd, tt))
}

fn check_pair(teacher_len: usize, student_len: usize, tau: f64) -> Result<()> {
    if teacher_len != student_len {
        return Err(Error::ShapeMismatch(format!(
            "teacher has {teacher_len} logits, student has {student_len}"
        )));
    }
    if teacher_len < 2 {
        return Err(Error::Precondition(format!(
            "distillation needs at least 2 classes, got {teacher_len}"
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::BadTemperature(tau));
    }
    Ok(())
}

// ── Scalar reference operations ──────────────────────────────────────

/// Knowledge-distillation loss for one sample:
/// KL(softmax_t(teacher, τ) ‖ softmax_t(student, τ)) · τ².
pub fn kd_loss<S: Scalar>(teacher_logits: &[S], student_logits: &[S], tau: f64) -> Result<S> {
    check_pair(teacher_logits.len(), student_logits.len(), tau)?;
    let t64: Vec<f64> = teacher_logits.iter().map(|v| v.to_f64c()).collect();
    let s64: Vec<f64> = student_logits.iter().map(|v| v.to_f64c()).collect();
    if t64.iter().chain(&s64).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kd_loss logits".into()));
    }
    Ok(sc(kd_row_f64(&t64, &s64, tau)))
}

/// Target/non-target decomposition of one sample's KD loss.
#[derive(Debug, Clone, Copy)]
pub struct DkdComponents<S> {
    pub tckd: S,
    pub nckd: S,
    pub teacher_target_prob: S,
}

pub fn dkd_components<S: Scalar>(
    teacher_logits: &[S],
    student_logits: &[S],
    target: usize,
    tau: f64,
) -> Result<DkdComponents<S>> {
    check_pair(teacher_logits.len(), student_logits.len(), tau)?;
    if target >= teacher_logits.len() {
        return Err(Error::TargetOutOfRange { target, classes: teacher_logits.len() });
    }
    let t64: Vec<f64> = teacher_logits.iter().map(|v| v.to_f64c()).collect();
    let s64: Vec<f64> = student_logits.iter().map(|v| v.to_f64c()).collect();
    if t64.iter().chain(&s64).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dkd_components logits".into()));
    }
    let (tckd, nckd, tt) = dkd_row_f64(&t64, &s64, target, tau)?;
    Ok(DkdComponents { tckd: sc(tckd), nckd: sc(nckd), teacher_target_prob: sc(tt) })
}

/// α·TCKD + β·NCKD.
pub fn dkd_loss<S: Scalar>(
    teacher_logits: &[S],
    student_logits: &[S],
    target: usize,
    weights: &DkdWeights,
) -> Result<S> {
    let c = dkd_components(teacher_logits, student_logits, target, weights.tau)?;
    Ok(sc(weights.alpha * c.tckd.to_f64c() + weights.beta * c.nckd.to_f64c()))
}

/// Cross-entropy over masked timesteps only:
/// −Σ_{t∈M} ln softmax(frame_logits[t])[labels[t]] (or its mean over |M|).
/// Depends only on masked rows; everything else is never read.
pub fn masked_cluster_loss<S: Scalar>(
    frame_logits: &Tensor<S>,
    targets: &FrameTargets,
    reduction: Reduction,
) -> Result<MaskedLoss<S>> {
    let (t, c) = (frame_logits.rows(), frame_logits.cols());
    if c < 2 {
        return Err(Error::Precondition(format!("need at least 2 classes, got {c}")));
    }
    if targets.frames() != t {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} logit rows",
            targets.frames(),
            t
        )));
    }
    let m = targets.mask_indices();
    if m.is_empty() {
        return Ok(MaskedLoss { value: S::zero(), empty_mask: true });
    }
    let mut acc = 0.0f64;
    for &row in m {
        let label = targets.labels()[row];
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let l64: Vec<f64> = frame_logits.row(row).iter().map(|v| v.to_f64c()).collect();
        let p = row_softmax_f64(&l64, 1.0);
        acc -= p[label].max(PROB_FLOOR).ln();
    }
    if reduction == Reduction::Mean {
        acc /= m.len() as f64;
    }
    Ok(MaskedLoss { value: sc(acc), empty_mask: false })
}

/// ce_weight·ce + distill_weight·distill.
pub fn combined_objective<S: Scalar>(
    ce: S,
    distill: S,
    ce_weight: f64,
    distill_weight: f64,
) -> Result<S> {
    if !ce.is_finite() || !distill.is_finite() {
        return Err(Error::NonFinite("combined_objective inputs".into()));
    }
    if !(ce_weight >= 0.0) || !(distill_weight >= 0.0) {
        return Err(Error::Precondition("objective weights must be nonnegative".into()));
    }
    Ok(sc::<S>(ce_weight) * ce + sc::<S>(distill_weight) * distill)
}

// ── Taped batch kernels ──────────────────────────────────────────────

/// How β is chosen per row in the decomposed batch kernel.
#[derive(Debug, Clone, Copy)]
pub enum BetaMode {
    Constant(f64),
    /// β = 1 − p_t of the teacher, per row; with α = 1 this reproduces the
    /// plain KD loss exactly. Kept as a verification route.
    DynamicOneMinusTeacherTarget,
}

struct CeRowsOp {
    logits: Var,
    labels: Vec<usize>,
    rows_used: Vec<usize>,
    scale: f64,
    cols: usize,
}

impl<S: Scalar> TapeOp<S> for CeRowsOp {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let logits = vals[self.logits.0].data();
        let gscale = g[0].to_f64c() * self.scale;
        let mut dx = vec![S::zero(); logits.len()];
        for &row in &self.rows_used {
            let base = row * self.cols;
            let l64: Vec<f64> =
                logits[base..base + self.cols].iter().map(|v| v.to_f64c()).collect();
            let mut p = row_softmax_f64(&l64, 1.0);
            p[self.labels[row]] -= 1.0;
            for (d, &pv) in dx[base..base + self.cols].iter_mut().zip(p.iter()) {
                *d = sc(pv * gscale);
            }
        }
        sink.add(self.logits, &dx);
    }
}

/// Tape kernel: cross-entropy of `logits` rows against integer labels,
/// restricted to `rows_used` (all rows when `None`). Gradients are exactly
/// zero outside the selected rows.
pub fn ce_rows<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    labels: &[usize],
    rows_used: Option<&[usize]>,
    reduction: Reduction,
) -> Result<Var> {
    let (t, c) = (tape.value(logits).rows(), tape.value(logits).cols());
    if labels.len() != t {
        return Err(Error::ShapeMismatch(format!("{} labels for {t} rows", labels.len())));
    }
    let rows_used: Vec<usize> = match rows_used {
        Some(m) => m.to_vec(),
        None => (0..t).collect(),
    };
    if rows_used.is_empty() {
        return Ok(tape.constant(&[S::zero()], vec![1]));
    }
    let mut acc = 0.0f64;
    for &row in &rows_used {
        let label = labels[row];
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let l64: Vec<f64> = tape.value(logits).row(row).iter().map(|v| v.to_f64c()).collect();
        acc -= row_softmax_f64(&l64, 1.0)[label].max(PROB_FLOOR).ln();
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / rows_used.len() as f64,
    };
    let value = Tensor::scalar(sc::<S>(acc * scale));
    let op = CeRowsOp { logits, labels: labels.to_vec(), rows_used, scale, cols: c };
    Ok(tape.custom(&[logits], value, Box::new(op), "ce_rows"))
}

struct KdRowsOp {
    teacher: Vec<f64>,
    student: Var,
    tau: f64,
    scale: f64,
    rows: usize,
    cols: usize,
}

impl<S: Scalar> TapeOp<S> for KdRowsOp {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let student = vals[self.student.0].data();
        let gscale = g[0].to_f64c() * self.scale;
        let mut dx = vec![S::zero(); student.len()];
        for row in 0..self.rows {
            let base = row * self.cols;
            let t_row = &self.teacher[base..base + self.cols];
            let s64: Vec<f64> =
                student[base..base + self.cols].iter().map(|v| v.to_f64c()).collect();
            let pt = row_softmax_f64(t_row, self.tau);
            let ps = row_softmax_f64(&s64, self.tau);
            for c in 0..self.cols {
                // dKD/dl_s = τ·(p_s − p_t)
                dx[base + c] = sc(self.tau * (ps[c] - pt[c]) * gscale);
            }
        }
        sink.add(self.student, &dx);
    }
}

/// Tape kernel: per-row KD loss of student logits against constant teacher
/// logits, reduced over rows. The teacher is not differentiated through.
pub fn kd_rows<S: Scalar>(
    tape: &mut Tape<S>,
    teacher_logits: &[S],
    student: Var,
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let (t, c) = (tape.value(student).rows(), tape.value(student).cols());
    check_pair(c, c, tau)?;
    if teacher_logits.len() != t * c {
        return Err(Error::ShapeMismatch(format!(
            "teacher logits have {} values, student is {t}×{c}",
            teacher_logits.len()
        )));
    }
    let teacher: Vec<f64> = teacher_logits.iter().map(|v| v.to_f64c()).collect();
    let mut acc = 0.0f64;
    for row in 0..t {
        let s64: Vec<f64> = tape.value(student).row(row).iter().map(|v| v.to_f64c()).collect();
        acc += kd_row_f64(&teacher[row * c..(row + 1) * c], &s64, tau);
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / t.max(1) as f64,
    };
    let value = Tensor::scalar(sc::<S>(acc * scale));
    let op = KdRowsOp { teacher, student, tau, scale, rows: t, cols: c };
    Ok(tape.custom(&[student], value, Box::new(op), "kd_rows"))
}

struct DkdRowsOp {
    teacher: Vec<f64>,
    student: Var,
    targets: Vec<usize>,
    tau: f64,
    alpha: f64,
    beta: BetaMode,
    scale: f64,
    rows: usize,
    cols: usize,
}

impl DkdRowsOp {
    /// Analytic per-row gradients of TCKD and NCKD w.r.t. student logits.
    fn row_grads(&self, t_row: &[f64], s_row: &[f64], target: usize) -> (Vec<f64>, Vec<f64>) {
        let c = t_row.len();
        let pt = row_softmax_f64(t_row, self.tau);
        let ps = row_softmax_f64(s_row, self.tau);
        let (tt, st) = (pt[target], ps[target]);
        let (tn, sn) = (1.0 - tt, 1.0 - st);
        let tau = self.tau;

        // TCKD: τ·[(1−p_t^T)/(1−p_t^S) − p_t^T/p_t^S]·p_t^S·(δ_tj − p_j^S)
        let factor = tau * (tn / sn - tt / st) * st;
        let mut g_tckd = vec![0.0; c];
        for j in 0..c {
            let delta = if j == target { 1.0 } else { 0.0 };
            g_tckd[j] = factor * (delta - ps[j]);
        }

        // NCKD: −τ·(p̂_j^T[j≠t] − p_j^S) − τ·p_t^S·(δ_tj − p_j^S)/(1−p_t^S)
        let mut g_nckd = vec![0.0; c];
        if c > 2 {
            for j in 0..c {
                let delta = if j == target { 1.0 } else { 0.0 };
                let that = if j == target { 0.0 } else { pt[j] / tn };
                g_nckd[j] = -tau * (that - ps[j]) - tau * st * (delta - ps[j]) / sn;
            }
        }
        (g_tckd, g_nckd)
    }
}

impl<S: Scalar> TapeOp<S> for DkdRowsOp {
    fn backward(&self, vals: &[Tensor<S>], g: &[S], sink: &mut GradSink<'_, S>) {
        let student = vals[self.student.0].data();
        let gscale = g[0].to_f64c() * self.scale;
        let mut dx = vec![S::zero(); student.len()];
        for row in 0..self.rows {
            let base = row * self.cols;
            let t_row = &self.teacher[base..base + self.cols];
            let s64: Vec<f64> =
                student[base..base + self.cols].iter().map(|v| v.to_f64c()).collect();
            let target = self.targets[row];
            let (g_tckd, g_nckd) = self.row_grads(t_row, &s64, target);
            let beta = match self.beta {
                BetaMode::Constant(b) => b,
                BetaMode::DynamicOneMinusTeacherTarget => {
                    1.0 - row_softmax_f64(t_row, self.tau)[target]
                }
            };
            for c in 0..self.cols {
                dx[base + c] =
                    sc((self.alpha * g_tckd[c] + beta * g_nckd[c]) * gscale);
            }
        }
        sink.add(self.student, &dx);
    }
}

/// Tape kernel: per-row DKD loss (α·TCKD + β·NCKD) of student logits
/// against constant teacher logits, with per-row target classes.
pub fn dkd_rows<S: Scalar>(
    tape: &mut Tape<S>,
    teacher_logits: &[S],
    student: Var,
    targets: &[usize],
    tau: f64,
    alpha: f64,
    beta: BetaMode,
    reduction: Reduction,
) -> Result<Var> {
    let (t, c) = (tape.value(student).rows(), tape.value(student).cols());
    check_pair(c, c, tau)?;
    if teacher_logits.len() != t * c {
        return Err(Error::ShapeMismatch(format!(
            "teacher logits have {} values, student is {t}×{c}",
            teacher_logits.len()
        )));
    }
    if targets.len() != t {
        return Err(Error::ShapeMismatch(format!("{} targets for {t} rows", targets.len())));
    }
    let teacher: Vec<f64> = teacher_logits.iter().map(|v| v.to_f64c()).collect();
    let mut acc = 0.0f64;
    for row in 0..t {
        let target = targets[row];
        if target >= c {
            return Err(Error::TargetOutOfRange { target, classes: c });
        }
        let s64: Vec<f64> = tape.value(student).row(row).iter().map(|v| v.to_f64c()).collect();
        let (tckd, nckd, tt) = dkd_row_f64(&teacher[row * c..(row + 1) * c], &s64, target, tau)?;
        let b = match beta {
            BetaMode::Constant(bv) => bv,
            BetaMode::DynamicOneMinusTeacherTarget => 1.0 - tt,
        };
        acc += alpha * tckd + b * nckd;
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / t.max(1) as f64,
    };
    let value = Tensor::scalar(sc::<S>(acc * scale));
    let op = DkdRowsOp {
        teacher,
        student,
        targets: targets.to_vec(),
        tau,
        alpha,
        beta,
        scale,
        rows: t,
        cols: c,
    };
    Ok(tape.custom(&[student], value, Box::new(op), "dkd_rows"))
}

/// Largest per-row gap |direct KD − (TCKD + (1−p_t)·NCKD)| across a logit
/// matrix pair. The verification training mode asserts this stays below
/// its tolerance at every step it takes.
pub fn decomposition_gap<S: Scalar>(
    teacher_logits: &[S],
    student_logits: &[S],
    targets: &[usize],
    rows: usize,
    cols: usize,
    tau: f64,
) -> Result<f64> {
    let mut max_gap = 0.0f64;
    for row in 0..rows {
        let t64: Vec<f64> =
            teacher_logits[row * cols..(row + 1) * cols].iter().map(|v| v.to_f64c()).collect();
        let s64: Vec<f64> =
            student_logits[row * cols..(row + 1) * cols].iter().map(|v| v.to_f64c()).collect();
        let direct = kd_row_f64(&t64, &s64, tau);
        let (tckd, nckd, tt) = dkd_row_f64(&t64, &s64, targets[row], tau)?;
        let gap = (direct - (tckd + (1.0 - tt) * nckd)).abs();
        if gap > max_gap {
            max_gap = gap;
        }
    }
    Ok(max_gap)
}
