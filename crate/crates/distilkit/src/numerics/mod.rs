//! Dense tensors, reverse-mode differentiation, stable softmax/KL
//! primitives, seeded randomness, and the finite-difference gradient
//! oracle.

pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use kernels::{mac_tally_read, mac_tally_reset};
pub use rng::Rng;
pub use tape::{GradSink, Tape, TapeOp, Var};
pub use tensor::{
    gauge_live_bytes, gauge_peak_bytes, gauge_reset_peak, sc, Scalar, Tensor,
    TENSOR_OVERHEAD_BYTES,
};

use crate::error::{Error, Result};

/// Floor applied to probabilities inside logarithms. Confident teachers
/// drive non-target renormalizers toward zero; the floor keeps the
/// logarithms finite without renormalizing the distribution.
pub const PROB_FLOOR: f64 = 1e-12;

/// A probability vector over C classes together with the temperature that
/// produced it.
#[derive(Debug, Clone)]
pub struct SoftDistribution<S: Scalar> {
    probs: Vec<S>,
    temperature: S,
}

impl<S: Scalar> SoftDistribution<S> {
    /// Validates ranges and the sum-to-one invariant (1e-6 for f32
    /// payloads, 1e-12 for f64).
    pub fn new(probs: Vec<S>, temperature: S) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("probability vector".into()));
        }
        let tau = temperature.to_f64c();
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::BadTemperature(tau));
        }
        let mut sum = 0.0f64;
        for &p in &probs {
            let pf = p.to_f64c();
            if !(0.0..=1.0).contains(&pf) {
                return Err(Error::Precondition(format!("probability {pf} outside [0, 1]")));
            }
            sum += pf;
        }
        let tol = if S::BYTES == 4 { 1e-6 } else { 1e-12 };
        if (sum - 1.0).abs() > tol {
            return Err(Error::Precondition(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(SoftDistribution { probs, temperature })
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    pub fn temperature(&self) -> S {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Temperature softmax, computed stably via max-subtraction in f64.
pub fn softmax_t<S: Scalar>(logits: &[S], tau: S) -> Result<SoftDistribution<S>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax_t logits".into()));
    }
    let tau_f = tau.to_f64c();
    if !(tau_f > 0.0) || !tau_f.is_finite() {
        return Err(Error::BadTemperature(tau_f));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("softmax_t logits".into()));
    }
    let l64: Vec<f64> = logits.iter().map(|l| l.to_f64c()).collect();
    let probs64 = kernels::row_softmax_f64(&l64, tau_f);
    let probs: Vec<S> = probs64.iter().map(|&p| sc(p)).collect();
    SoftDistribution::new(probs, tau)
}

/// KL(p ‖ q) = Σ p·ln(p/q) with 0·ln(0/q) = 0 and the probability floor
/// applied to q inside the logarithm.
pub fn kl_divergence<S: Scalar>(p: &SoftDistribution<S>, q: &SoftDistribution<S>) -> Result<S> {
    kl_impl(p, q, Some(PROB_FLOOR))
}

/// KL without the floor; errors when q has a zero where p is nonzero.
pub fn kl_divergence_strict<S: Scalar>(
    p: &SoftDistribution<S>,
    q: &SoftDistribution<S>,
) -> Result<S> {
    kl_impl(p, q, None)
}

fn kl_impl<S: Scalar>(
    p: &SoftDistribution<S>,
    q: &SoftDistribution<S>,
    floor: Option<f64>,
) -> Result<S> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "kl_divergence: {} vs {} classes",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0f64;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        let pf = pi.to_f64c();
        if pf <= 0.0 {
            continue;
        }
        let qf = qi.to_f64c();
        let qf = match floor {
            Some(eps) => qf.max(eps),
            None => {
                if qf <= 0.0 {
                    return Err(Error::Precondition(
                        "kl_divergence: q is zero where p is nonzero and flooring is disabled"
                            .into(),
                    ));
                }
                qf
            }
        };
        acc += pf * (pf / qf).ln();
    }
    Ok(sc(acc))
}

/// Central-difference gradient oracle in f64:
/// (f(x+εeᵢ) − f(x−εeᵢ)) / 2ε per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!("finite_diff_grad: eps must be positive, got {eps}")));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Relative error with an absolute floor, used by the gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
