//! Adam with fixed default moments (β₁ 0.9, β₂ 0.999, ε 1e-8) and bias
//! correction. Updates are elementwise in parameter order, so runs are
//! bit-reproducible for identical gradient streams.

use crate::numerics::{sc, Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct Adam<S: Scalar> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(param_sizes: &[usize]) -> Self {
        Adam {
            m: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            t: 0,
        }
    }

    /// One update. A `None` gradient is treated as zero (its moments keep
    /// decaying), which keeps step counts aligned across parameters.
    pub fn step(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Option<Vec<S>>], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1: S = sc(ADAM_BETA1);
        let b2: S = sc(ADAM_BETA2);
        let eps: S = sc(ADAM_EPS);
        let one = S::one();
        let corr1: S = sc(1.0 - ADAM_BETA1.powi(self.t as i32));
        let corr2: S = sc(1.0 - ADAM_BETA2.powi(self.t as i32));
        let lr_s: S = sc(lr);

        for ((param, grad), (m, v)) in
            params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = param.data_mut();
            match grad {
                Some(g) => {
                    debug_assert_eq!(g.len(), data.len());
                    for i in 0..data.len() {
                        m[i] = b1 * m[i] + (one - b1) * g[i];
                        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                        let mhat = m[i] / corr1;
                        let vhat = v[i] / corr2;
                        data[i] = data[i] - lr_s * mhat / (vhat.sqrt() + eps);
                    }
                }
                None => {
                    for i in 0..data.len() {
                        m[i] = b1 * m[i];
                        v[i] = b2 * v[i];
                        let mhat = m[i] / corr1;
                        let vhat = v[i] / corr2;
                        data[i] = data[i] - lr_s * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
