//! Desk-scale evaluation proxies built on the shared feature pyramid. Values
//! are internally comparable only; they are not Inception/LPIPS numbers.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Result};
use crate::nn::scalar;
use crate::objectives::{perceptual_loss, FeaturePyramid};

/// Diagonal jitter added to both covariances.
pub const COVARIANCE_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub metrics: BTreeMap<String, MetricValue>,
}

impl EvalReport {
    pub fn insert(&mut self, name: &str, value: f64, samples: usize) -> Result<()> {
        if samples == 0 {
            return Err(invalid!("metric {name} computed over zero samples"));
        }
        self.metrics.insert(name.to_string(), MetricValue { value, samples });
        Ok(())
    }
}

/// Perceptual distance between two single images `[1, 3, H, W]`.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, pyramid: &FeaturePyramid) -> Result<f64> {
    scalar(&perceptual_loss(a, b, pyramid)?)
}

/// Mean pairwise distance between differently seeded results, averaged over
/// inputs. `edit(input, draw)` must return `[1, 3, H, W]`; draws
/// `seed + 2p` and `seed + 2p + 1` form pair `p`.
pub fn diversity_score<T>(
    inputs: &[T],
    pairs_per_image: usize,
    pyramid: &FeaturePyramid,
    seed: u64,
    mut edit: impl FnMut(&T, u64) -> Result<Tensor>,
) -> Result<f64> {
    if inputs.is_empty() || pairs_per_image == 0 {
        return Err(invalid!("diversity needs at least one input and one pair"));
    }
    let mut total = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let base = seed.wrapping_add((i as u64) << 32);
        let mut acc = 0.0;
        for p in 0..pairs_per_image as u64 {
            let a = edit(input, base.wrapping_add(2 * p))?;
            let b = edit(input, base.wrapping_add(2 * p + 1))?;
            acc += perceptual_distance(&a, &b, pyramid)?;
        }
        total += acc / pairs_per_image as f64;
    }
    Ok(total / inputs.len() as f64)
}

/// Mean perceptual distance over aligned pairs of `[N, 3, H, W]` batches.
pub fn paired_distance(results: &Tensor, truths: &Tensor, pyramid: &FeaturePyramid) -> Result<f64> {
    let n = results.dim(0)?;
    if n != truths.dim(0)? || n == 0 {
        return Err(dim_err!("paired distance over {n} results and {} truths", truths.dim(0)?));
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += perceptual_distance(&results.narrow(0, i, 1)?, &truths.narrow(0, i, 1)?, pyramid)?;
    }
    Ok(acc / n as f64)
}

/// Pooled pyramid features as an `N x D` matrix.
pub fn pooled_features(images: &Tensor, pyramid: &FeaturePyramid) -> Result<DMatrix<f64>> {
    let f = pyramid.pooled(images)?.to_dtype(DType::F64)?;
    let (n, d) = f.dims2()?;
    Ok(DMatrix::from_row_slice(n, d, &f.flatten_all()?.to_vec1::<f64>()?))
}

/// Fréchet distance between Gaussian fits of image features.
pub fn proxy_frechet(real: &Tensor, fake: &Tensor, pyramid: &FeaturePyramid) -> Result<f64> {
    frechet_distance(&pooled_features(real, pyramid)?, &pooled_features(fake, pyramid)?)
}

/// Mean and unbiased covariance of the rows.
pub fn gaussian_fit(rows: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.nrows();
    if n < 2 {
        return Err(invalid!("need at least 2 samples, got {n}"));
    }
    let mean = rows.row_mean().transpose();
    let mut centered = rows.clone();
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Square root of a symmetric PSD matrix; negative eigenvalues clip to 0.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_r - mu_f|^2 + Tr(S_r + S_f - 2 (S_r S_f)^(1/2))`, evaluated through
/// the similar symmetric matrix `S_r^(1/2) S_f S_r^(1/2)`.
pub fn frechet_distance(real: &DMatrix<f64>, fake: &DMatrix<f64>) -> Result<f64> {
    if real.ncols() != fake.ncols() {
        return Err(dim_err!("feature widths {} vs {}", real.ncols(), fake.ncols()));
    }
    let (mu_r, mut s_r) = gaussian_fit(real)?;
    let (mu_f, mut s_f) = gaussian_fit(fake)?;
    let d = s_r.nrows();
    for i in 0..d {
        s_r[(i, i)] += COVARIANCE_JITTER;
        s_f[(i, i)] += COVARIANCE_JITTER;
    }
    let a = sqrtm_psd(&s_r);
    let cross = sqrtm_psd(&(&a * &s_f * &a)).trace();
    let mean_term = (mu_r - mu_f).norm_squared();
    Ok((mean_term + s_r.trace() + s_f.trace() - 2.0 * cross).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use nalgebra::Complex;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn random_rows(n: usize, d: usize, shift: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, j| rng.gen_range(-1.0..1.0) * (1.0 + j as f64 * 0.3) + shift)
    }

    /// Trace of the square root of `S_r S_f` from the complex eigenvalues of
    /// the non-symmetric product.
    fn oracle(real: &DMatrix<f64>, fake: &DMatrix<f64>) -> f64 {
        let fit = |m: &DMatrix<f64>| {
            let n = m.nrows() as f64;
            let mu: DVector<f64> = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n));
            let mut cov = DMatrix::zeros(m.ncols(), m.ncols());
            for r in m.row_iter() {
                let dlt = r.transpose() - &mu;
                cov += &dlt * dlt.transpose();
            }
            let mut cov = cov / (n - 1.0);
            for i in 0..m.ncols() {
                cov[(i, i)] += COVARIANCE_JITTER;
            }
            (mu, cov)
        };
        let (mr, sr) = fit(real);
        let (mf, sf) = fit(fake);
        let prod = &sr * &sf;
        let tr_sqrt: f64 = prod
            .complex_eigenvalues()
            .iter()
            .map(|z: &Complex<f64>| z.sqrt().re)
            .sum();
        (mr - mf).norm_squared() + sr.trace() + sf.trace() - 2.0 * tr_sqrt
    }

    #[test]
    fn identical_sets_are_zero() {
        let a = random_rows(40, 6, 0.0, 1);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn one_dimensional_mean_shift() {
        // Deterministic unit-variance samples from normal quantiles.
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 2000;
        let q: Vec<f64> = (0..n).map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64)).collect();
        let var = q.iter().map(|v| v * v).sum::<f64>() / (n as f64 - 1.0);
        let q: Vec<f64> = q.iter().map(|v| v / var.sqrt()).collect();
        for m in [0.5, 1.0, 3.0] {
            let a = DMatrix::from_column_slice(n, 1, &q);
            let b = a.map(|v| v + m);
            let d = frechet_distance(&a, &b).unwrap();
            assert!((d - m * m).abs() / (m * m) < 0.01, "m={m} d={d}");
        }
    }

    #[test]
    fn matches_eigenvalue_oracle() {
        for seed in 0..10 {
            let a = random_rows(30, 5, 0.0, seed);
            let b = random_rows(25, 5, 0.4, seed + 100);
            let got = frechet_distance(&a, &b).unwrap();
            let want = oracle(&a, &b);
            assert!((got - want).abs() < 1e-6 * want.max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn needs_two_samples() {
        let a = random_rows(1, 3, 0.0, 0);
        assert!(frechet_distance(&a, &random_rows(5, 3, 0.0, 1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn symmetric_and_order_invariant(seed in 0u64..1000, n in 3usize..12) {
            let a = random_rows(n, 4, 0.0, seed);
            let b = random_rows(n + 2, 4, 0.3, seed + 1);
            let ab = frechet_distance(&a, &b).unwrap();
            prop_assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-6);
            let rev = DMatrix::from_fn(n, 4, |i, j| a[(n - 1 - i, j)]);
            prop_assert!((ab - frechet_distance(&rev, &b).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn diversity_closed_form() {
        let dev = Device::Cpu;
        let pyr = FeaturePyramid::new(0, DType::F64).unwrap();
        let a = Tensor::rand(-1f64, 1f64, (1, 3, 16, 16), &dev).unwrap();
        let b = Tensor::rand(-1f64, 1f64, (1, 3, 16, 16), &dev).unwrap();
        let d = perceptual_distance(&a, &b, &pyr).unwrap();
        let pick = |_: &(), draw: u64| -> Result<Tensor> {
            let mut rng = ChaCha8Rng::seed_from_u64(draw.wrapping_mul(0x9E37_79B9));
            Ok(if rng.gen_bool(0.5) { a.clone() } else { b.clone() })
        };
        let inputs = vec![(); 40];
        let score = diversity_score(&inputs, 25, &pyr, 7, pick).unwrap();
        assert!((score - d / 2.0).abs() / (d / 2.0) < 0.05, "{score} vs {}", d / 2.0);
        let single = diversity_score(&inputs[..3], 5, &pyr, 7, |_, _| Ok(a.clone())).unwrap();
        assert_eq!(single, 0.0);
    }

    #[test]
    fn paired_distance_matches_loop() {
        let dev = Device::Cpu;
        let pyr = FeaturePyramid::new(0, DType::F64).unwrap();
        let r = Tensor::rand(-1f64, 1f64, (4, 3, 16, 16), &dev).unwrap();
        let t = Tensor::rand(-1f64, 1f64, (4, 3, 16, 16), &dev).unwrap();
        assert_eq!(paired_distance(&r, &r, &pyr).unwrap(), 0.0);
        let mut want = 0.0;
        for i in 0..4 {
            let fa = pyr.features(&r.narrow(0, i, 1).unwrap()).unwrap();
            let fb = pyr.features(&t.narrow(0, i, 1).unwrap()).unwrap();
            let mut s = 0.0;
            for (x, y) in fa.iter().zip(&fb) {
                s += (x - y).unwrap().abs().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
            }
            want += s;
        }
        let got = paired_distance(&r, &t, &pyr).unwrap();
        assert!((got - want / 4.0).abs() < 1e-12, "{got} vs {}", want / 4.0);
        assert!(paired_distance(&r, &t.narrow(0, 0, 2).unwrap(), &pyr).is_err());
    }
}
