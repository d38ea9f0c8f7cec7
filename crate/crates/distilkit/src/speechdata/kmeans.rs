//! Lloyd's k-means with seeded k-means++ initialization.
//!
//! Assignment breaks distance ties toward the lower centroid index; empty
//! clusters are re-seeded from the farthest point, which keeps the
//! per-iteration inertia non-increasing.

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    /// Inertia (sum of squared distances) after each assignment pass.
    pub inertia_per_iter: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (squared euclidean), ties toward the lower index.
pub fn kmeans_assign_one(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

pub fn kmeans_assign(features: &[Vec<f64>], centroids: &[Vec<f64>]) -> Result<Vec<usize>> {
    if centroids.is_empty() {
        return Err(Error::EmptyInput("centroid set".into()));
    }
    let d = centroids[0].len();
    for x in features.iter().chain(centroids.iter()) {
        if x.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "feature dimension {} vs centroid dimension {d}",
                x.len()
            )));
        }
    }
    Ok(features.iter().map(|x| kmeans_assign_one(x, centroids)).collect())
}

fn kmeanspp_init(features: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(features[rng.below(n)].clone());
    let mut min_d: Vec<f64> = features.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = min_d.iter().sum();
        let pick = if total <= 0.0 {
            rng.below(n)
        } else {
            let mut r = rng.next_f64() * total;
            let mut idx = n - 1;
            for (i, &d) in min_d.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        };
        centroids.push(features[pick].clone());
        let last = centroids.last().unwrap();
        for (m, x) in min_d.iter_mut().zip(features) {
            let d = sq_dist(x, last);
            if d < *m {
                *m = d;
            }
        }
    }
    centroids
}

/// Runs Lloyd's algorithm until assignments stabilize or `max_iters`.
pub fn kmeans_fit(features: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<KMeansFit> {
    let n = features.len();
    if k == 0 {
        return Err(Error::BadConfig("k must be positive".into()));
    }
    if n < k {
        return Err(Error::Precondition(format!("{n} points cannot form {k} clusters")));
    }
    let dim = features[0].len();
    for x in features {
        if x.len() != dim {
            return Err(Error::ShapeMismatch("inconsistent feature dimensions".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("k-means features".into()));
        }
    }

    let mut rng = Rng::new(seed);
    let mut centroids = kmeanspp_init(features, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut inertia_per_iter = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        // assignment pass
        let mut inertia = 0.0;
        let mut changed = false;
        let mut dists = vec![0.0f64; n];
        for (i, x) in features.iter().enumerate() {
            let a = kmeans_assign_one(x, &centroids);
            dists[i] = sq_dist(x, &centroids[a]);
            inertia += dists[i];
            if assignments[i] != a {
                assignments[i] = a;
                changed = true;
            }
        }
        inertia_per_iter.push(inertia);
        if !changed {
            break;
        }
        // update pass
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in features.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            } else {
                // re-seed from the farthest point; zeroing its distance
                // keeps multiple re-seeds from picking the same point
                let far = dists
                    .iter()
                    .enumerate()
                    .max_by(|(i, a), (j, b)| a.partial_cmp(b).unwrap().then(j.cmp(i)))
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[c] = features[far].clone();
                dists[far] = 0.0;
            }
        }
    }

    Ok(KMeansFit { centroids, inertia_per_iter, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_single_cluster() {
        let fit = kmeans_fit(&[vec![3.0, -1.0]], 1, 10, 0).unwrap();
        assert_eq!(fit.centroids, vec![vec![3.0, -1.0]]);
    }

    #[test]
    fn too_few_points_is_an_error() {
        assert!(matches!(
            kmeans_fit(&[vec![0.0]], 2, 10, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn two_separated_blobs_are_recovered() {
        let mut rng = Rng::new(9);
        let sigma = 0.4;
        let n_half = 200;
        let mut pts = Vec::new();
        for _ in 0..n_half {
            pts.push(vec![rng.normal() * sigma, rng.normal() * sigma]);
        }
        for _ in 0..n_half {
            pts.push(vec![10.0 + rng.normal() * sigma, 5.0 + rng.normal() * sigma]);
        }
        for seed in 0..5 {
            let fit = kmeans_fit(&pts, 2, 50, seed).unwrap();
            let tol = 3.0 * sigma / (n_half as f64).sqrt();
            let mut centers = fit.centroids.clone();
            centers.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
            assert!((centers[0][0]).abs() < tol && (centers[0][1]).abs() < tol);
            assert!((centers[1][0] - 10.0).abs() < tol && (centers[1][1] - 5.0).abs() < tol);
        }
    }

    #[test]
    fn inertia_is_monotonically_non_increasing() {
        let mut rng = Rng::new(4);
        for case in 0..100 {
            let n = 20 + rng.below(80);
            let d = 1 + rng.below(5);
            let k = 1 + rng.below(6.min(n));
            let pts: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| rng.normal() * 3.0).collect()).collect();
            let fit = kmeans_fit(&pts, k, 25, case).unwrap();
            for w in fit.inertia_per_iter.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "case {case}: {:?}", fit.inertia_per_iter);
            }
        }
    }

    #[test]
    fn assignment_matches_brute_force_and_breaks_ties_low() {
        let mut rng = Rng::new(11);
        let cents: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let pts: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let got = kmeans_assign(&pts, &cents).unwrap();
        for (x, &a) in pts.iter().zip(&got) {
            let brute = (0..cents.len())
                .map(|i| (sq_dist(x, &cents[i]), i))
                .min_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)))
                .unwrap()
                .1;
            assert_eq!(a, brute);
        }
        // exact equidistance picks the lower index
        let cents = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(kmeans_assign_one(&[0.0, 5.0], &cents), 0);

        // centroid hit is exact
        assert_eq!(kmeans_assign_one(&[-1.0, 0.0], &cents), 1);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(kmeans_assign(&[vec![0.0, 1.0]], &[vec![0.0]]).is_err());
    }
}
