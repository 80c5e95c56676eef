//! Percentile featurization: each chip embedding collapses to the 19
//! percentiles 5%, 10%, …, 95% of its pixel values (linear interpolation
//! between closest ranks, the "type 7" convention).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_PERCENTILES: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; N_PERCENTILES],
}

/// Type-7 percentile of sorted values: rank = (p/100)·(N−1), linear between
/// floor/ceil ranks.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// 19 percentiles of a single-channel embedding.
pub fn percentile_features(embedding: &Tensor) -> Result<FeatureVector> {
    if embedding.c != 1 || embedding.n != 1 {
        return Err(Error::ShapeMismatch(format!(
            "percentile features need a single 1-channel embedding, got ({},{})",
            embedding.n, embedding.c
        )));
    }
    if embedding.data.is_empty() {
        return Err(Error::ShapeMismatch("empty embedding".into()));
    }
    let mut sorted = embedding.data.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("embedding values are finite"));
    let mut values = [0.0; N_PERCENTILES];
    for (i, v) in values.iter_mut().enumerate() {
        *v = percentile_sorted(&sorted, (i as f64 + 1.0) * 5.0);
    }
    Ok(FeatureVector { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(data: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::from_data(1, 1, h, w, data).unwrap()
    }

    // independent sort-based oracle
    fn oracle(values: &[f64], p: f64) -> f64 {
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = p / 100.0 * (s.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        s[lo] + (rank - lo as f64) * (s[hi] - s[lo])
    }

    #[test]
    fn constant_embedding() {
        let fv = percentile_features(&emb(vec![0.5; 16], 4, 4)).unwrap();
        assert!(fv.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn two_pixel_median() {
        let fv = percentile_features(&emb(vec![0.0, 1.0], 1, 2)).unwrap();
        // p50 interpolates halfway between the two values
        assert!((fv.values[9] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hundred_values_match_oracle() {
        let data: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let fv = percentile_features(&emb(data.clone(), 10, 10)).unwrap();
        for i in 0..N_PERCENTILES {
            let p = (i as f64 + 1.0) * 5.0;
            assert!((fv.values[i] - oracle(&data, p)).abs() < 1e-12);
        }
        // p5 sits at rank 4.95 between 0.05 and 0.06
        assert!((fv.values[0] - (0.05 + 0.95 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn monotone_and_in_range_on_random_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..200);
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let fv = percentile_features(&emb(data.clone(), 1, n)).unwrap();
            for i in 1..N_PERCENTILES {
                assert!(fv.values[i] >= fv.values[i - 1]);
            }
            assert!(fv.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for i in 0..N_PERCENTILES {
                let p = (i as f64 + 1.0) * 5.0;
                assert!((fv.values[i] - oracle(&data, p)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monotone_map_equivariance() {
        // piecewise-linear strictly increasing map commutes with percentiles
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let f = |x: f64| 0.2 + 0.6 * x; // linear, strictly increasing
        let mapped: Vec<f64> = data.iter().map(|&x| f(x)).collect();
        let a = percentile_features(&emb(data, 8, 8)).unwrap();
        let b = percentile_features(&emb(mapped, 8, 8)).unwrap();
        for i in 0..N_PERCENTILES {
            assert!((b.values[i] - f(a.values[i])).abs() < 1e-12);
        }
    }
}
