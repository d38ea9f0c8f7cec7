//! Weighted-sum featurizer over per-layer outputs, as used by downstream
//! probes on frozen upstream models.

use crate::error::{Error, Result};
use crate::numerics::kernels::softmax_rows_inplace;
use crate::numerics::{Scalar, Tensor};

/// Softmax-normalizes `weights` over layers and returns Σ w_l · layer_l.
/// All layers must share one shape.
pub fn weighted_sum_features<S: Scalar>(
    layer_outputs: &[Tensor<S>],
    weights: &[S],
) -> Result<Tensor<S>> {
    if layer_outputs.is_empty() {
        return Err(Error::EmptyInput("weighted_sum_features layers".into()));
    }
    if weights.len() != layer_outputs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} layers",
            weights.len(),
            layer_outputs.len()
        )));
    }
    let shape = layer_outputs[0].shape().to_vec();
    for l in layer_outputs {
        if l.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "layer shape {:?} differs from {:?}",
                l.shape(),
                shape
            )));
        }
    }
    let mut coeffs = weights.to_vec();
    softmax_rows_inplace(&mut coeffs, 1, weights.len());
    let mut data = vec![S::zero(); layer_outputs[0].numel()];
    for (layer, &c) in layer_outputs.iter().zip(coeffs.iter()) {
        for (o, &v) in data.iter_mut().zip(layer.data()) {
            *o = *o + c * v;
        }
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn single_layer_passes_through_exactly() {
        let l = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = weighted_sum_features(std::slice::from_ref(&l), &[0.37]).unwrap();
        assert_eq!(out.data(), l.data());
    }

    #[test]
    fn saturated_weight_selects_one_layer() {
        let a = Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![-5.0f64, 9.0]).unwrap();
        let out = weighted_sum_features(&[a, b.clone()], &[-40.0, 40.0]).unwrap();
        for (&o, &e) in out.data().iter().zip(b.data()) {
            assert!((o - e).abs() < 1e-4);
        }
    }

    #[test]
    fn equal_weights_of_identical_layers_reproduce_the_layer() {
        let l = Tensor::new(vec![2, 2], vec![0.5f64, -2.0, 3.0, 8.0]).unwrap();
        let out = weighted_sum_features(&[l.clone(), l.clone(), l.clone()], &[0.0, 0.0, 0.0]).unwrap();
        for (&o, &e) in out.data().iter().zip(l.data()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_a_convex_combination() {
        let mut rng = Rng::new(3);
        let layers: Vec<Tensor<f64>> = (0..4)
            .map(|_| {
                Tensor::new(vec![3, 2], (0..6).map(|_| rng.normal()).collect()).unwrap()
            })
            .collect();
        let w: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let out = weighted_sum_features(&layers, &w).unwrap();
        for i in 0..out.numel() {
            let lo = layers.iter().map(|l| l.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = layers.iter().map(|l| l.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::<f64>::zeros(vec![2, 2]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(weighted_sum_features(&[a, b], &[0.0, 0.0]).is_err());
    }
}
