//! Loss terms and the weighted recipes that combine them per training stage.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::conv2d;

/// Floor on vector norms in the cosine term.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_pb: f64,
    pub lambda_pi: f64,
    pub lambda_po: f64,
    pub lambda_pf: f64,
    pub lambda_gan_local: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pb: 10.0,
            lambda_pi: 10.0,
            lambda_po: 10.0,
            lambda_pf: 10.0,
            lambda_gan_local: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_pb, self.lambda_pi, self.lambda_po, self.lambda_pf, self.lambda_gan_local];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self {
            lambda_pb: 0.0,
            lambda_pi: 0.0,
            lambda_po: 0.0,
            lambda_pf: 0.0,
            lambda_gan_local: 0.0,
        }
    }
}

/// Frozen random convolutional pyramid standing in for a pretrained
/// perceptual backbone. Taps sit at strides 2, 4 and 8.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    kernels: Vec<Tensor>,
}

pub const PYRAMID_WIDTHS: [usize; 3] = [16, 32, 64];

impl FeaturePyramid {
    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = 3;
        let mut kernels = Vec::new();
        for &out_c in &PYRAMID_WIDTHS {
            let fan_in = (in_c * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let v: Vec<f64> = (0..out_c * in_c * 9).map(|_| rng.gen_range(-bound..=bound)).collect();
            kernels.push(Tensor::from_vec(v, (out_c, in_c, 3, 3), &Device::Cpu)?.to_dtype(dtype)?);
            in_c = out_c;
        }
        Ok(Self { kernels })
    }

    /// Uses externally supplied kernels (e.g. pretrained), one per tap,
    /// each `[out, in, 3, 3]`.
    pub fn from_kernels(kernels: Vec<Tensor>) -> Result<Self> {
        if kernels.len() != 3 {
            return Err(dim_err!("feature pyramid needs 3 kernels, got {}", kernels.len()));
        }
        Ok(Self { kernels: kernels.into_iter().map(|k| k.detach()).collect() })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            kernels: self.kernels.iter().map(|k| k.to_dtype(dtype)).collect::<candle_core::Result<_>>()?,
        })
    }

    /// Activations at the three taps for `[B, 3, H, W]` images in `[-1, 1]`.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(3);
        for k in &self.kernels {
            h = conv2d(&h, k, 2, 1)?.relu()?;
            taps.push(h.clone());
        }
        Ok(taps)
    }

    /// Spatially pooled taps concatenated: `[B, 16 + 32 + 64]`.
    pub fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        let taps = self.features(x)?;
        let pooled: Vec<Tensor> = taps
            .iter()
            .map(crate::nn::global_avg)
            .collect::<Result<_>>()?;
        Ok(Tensor::cat(&pooled, 1)?)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(dim_err!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "l1_loss")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Sum over pyramid taps of the mean absolute feature difference.
pub fn perceptual_loss(a: &Tensor, b: &Tensor, pyramid: &FeaturePyramid) -> Result<Tensor> {
    same_shape(a, b, "perceptual_loss")?;
    let fa = pyramid.features(a)?;
    let fb = pyramid.features(b)?;
    let mut total = Tensor::zeros((), a.dtype(), a.device())?;
    for (x, y) in fa.iter().zip(&fb) {
        total = (total + (x - y)?.abs()?.mean_all()?)?;
    }
    Ok(total)
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = (1.0 - real)?.relu()?.mean_all()?;
    let f = (fake + 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

/// `-mean(fake)`.
pub fn hinge_g_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.mean_all()?.neg()?)
}

/// Mean over the batch of `1 - cos(a, b)`; inputs are `[B, D]`.
pub fn scc_loss(code_result: &Tensor, code_style: &Tensor) -> Result<Tensor> {
    same_shape(code_result, code_style, "scc_loss")?;
    let norm = |t: &Tensor| -> Result<Tensor> {
        let n = t.sqr()?.sum_keepdim(1)?.sqrt()?.maximum(COSINE_EPS)?;
        Ok(t.broadcast_div(&n)?)
    };
    let cos = (norm(code_result)? * norm(code_style)?)?.sum(1)?;
    Ok((1.0 - cos)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Background,
    ObjectInpaint,
    ObjectGen,
    Fusion,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "BACKGROUND" => Ok(Stage::Background),
            "OBJECT_INPAINT" => Ok(Stage::ObjectInpaint),
            "OBJECT_GEN" => Ok(Stage::ObjectGen),
            "FUSION" => Ok(Stage::Fusion),
            other => Err(Error::Config(format!("unknown stage {other}"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Background => "BACKGROUND",
            Stage::ObjectInpaint => "OBJECT_INPAINT",
            Stage::ObjectGen => "OBJECT_GEN",
            Stage::Fusion => "FUSION",
        })
    }
}

/// Individual loss terms a stage can report. The `*Styled` terms belong to
/// the result generated from a randomly sampled style image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    L1,
    Perceptual,
    GanGlobal,
    GanPatch,
    Gan,
    Scc,
    PerceptualStyled,
    GanStyled,
    SccStyled,
}

/// Coefficient of each term in a stage's generator objective.
pub fn recipe(stage: Stage, w: &LossWeights) -> Vec<(Term, f64)> {
    use Term::*;
    match stage {
        Stage::Background => vec![(L1, 1.0), (Perceptual, w.lambda_pb), (GanGlobal, 1.0), (GanPatch, w.lambda_gan_local)],
        Stage::ObjectInpaint => vec![(L1, 1.0), (Perceptual, w.lambda_pi), (Gan, 1.0)],
        Stage::ObjectGen => vec![
            (L1, 1.0),
            (Perceptual, w.lambda_po),
            (Gan, 1.0),
            (Scc, 1.0),
            (PerceptualStyled, w.lambda_po),
            (GanStyled, 1.0),
            (SccStyled, 1.0),
        ],
        Stage::Fusion => vec![(Perceptual, w.lambda_pf), (Gan, 1.0)],
    }
}

/// Values that can be weighted and summed: plain numbers for reporting,
/// tensors for backpropagation.
pub trait LossValue: Sized {
    fn scaled(&self, k: f64) -> Result<Self>;
    fn plus(self, other: Self) -> Result<Self>;
}

impl LossValue for f64 {
    fn scaled(&self, k: f64) -> Result<Self> {
        Ok(self * k)
    }
    fn plus(self, other: Self) -> Result<Self> {
        Ok(self + other)
    }
}

impl LossValue for Tensor {
    fn scaled(&self, k: f64) -> Result<Self> {
        Ok(self.affine(k, 0.0)?)
    }
    fn plus(self, other: Self) -> Result<Self> {
        Ok((self + other)?)
    }
}

/// Weighted sum of `parts` following the stage recipe. Extra parts are
/// ignored; a missing required part is a configuration error.
pub fn compose_objective<T: LossValue>(stage: Stage, parts: &BTreeMap<Term, T>, weights: &LossWeights) -> Result<T> {
    let mut total: Option<T> = None;
    for (term, k) in recipe(stage, weights) {
        let v = parts
            .get(&term)
            .ok_or_else(|| Error::Config(format!("{stage} objective needs term {term:?}")))?
            .scaled(k)?;
        total = Some(match total {
            None => v,
            Some(t) => t.plus(v)?,
        });
    }
    Ok(total.expect("every recipe has at least one term"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;

    fn dev() -> Device {
        Device::Cpu
    }

    fn unit_parts(stage: Stage) -> BTreeMap<Term, f64> {
        recipe(stage, &LossWeights::default()).into_iter().map(|(t, _)| (t, 1.0)).collect()
    }

    #[test]
    fn recipe_arithmetic() {
        let w = LossWeights::default();
        let bg = compose_objective(Stage::Background, &unit_parts(Stage::Background), &w).unwrap();
        assert!((bg - 12.2).abs() < 1e-12);
        let og = compose_objective(Stage::ObjectGen, &unit_parts(Stage::ObjectGen), &w).unwrap();
        assert!((og - 25.0).abs() < 1e-12);
        let oi = compose_objective(Stage::ObjectInpaint, &unit_parts(Stage::ObjectInpaint), &w).unwrap();
        assert!((oi - 12.0).abs() < 1e-12);
        let f = compose_objective(Stage::Fusion, &unit_parts(Stage::Fusion), &w).unwrap();
        assert!((f - 11.0).abs() < 1e-12);
        let zeros: BTreeMap<Term, f64> = unit_parts(Stage::ObjectGen).into_keys().map(|t| (t, 0.0)).collect();
        assert_eq!(compose_objective(Stage::ObjectGen, &zeros, &w).unwrap(), 0.0);
        let mut missing = unit_parts(Stage::Background);
        missing.remove(&Term::GanPatch);
        assert!(matches!(compose_objective(Stage::Background, &missing, &w), Err(Error::Config(_))));
    }

    #[test]
    fn tensor_and_scalar_recipes_agree() {
        let w = LossWeights::default();
        let vals = [0.3, 1.7, -0.4, 2.2];
        let terms = recipe(Stage::Background, &w);
        let pf: BTreeMap<Term, f64> = terms.iter().zip(vals).map(|((t, _), v)| (*t, v)).collect();
        let pt: BTreeMap<Term, Tensor> = pf.iter().map(|(t, v)| (*t, Tensor::new(*v, &dev()).unwrap())).collect();
        let a = compose_objective(Stage::Background, &pf, &w).unwrap();
        let b = scalar(&compose_objective(Stage::Background, &pt, &w).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((a - (0.3 + 17.0 - 0.4 + 0.44)).abs() < 1e-12);
    }

    #[test]
    fn l1_cases() {
        let a = Tensor::zeros((2, 3, 4, 4), DType::F64, &dev()).unwrap();
        let b = a.ones_like().unwrap();
        assert_eq!(scalar(&l1_loss(&a, &a).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&l1_loss(&a, &b).unwrap()).unwrap(), 1.0);
        let x = Tensor::randn(0f64, 1.0, (1, 3, 5, 2), &dev()).unwrap();
        let y = Tensor::randn(0f64, 1.0, (1, 3, 5, 2), &dev()).unwrap();
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let yv: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        let oracle = xv.iter().zip(&yv).map(|(p, q)| (p - q).abs()).sum::<f64>() / 30.0;
        assert!((scalar(&l1_loss(&x, &y).unwrap()).unwrap() - oracle).abs() < 1e-12);
        assert!(l1_loss(&x, &a).is_err());
    }

    #[test]
    fn perceptual_matches_exported_taps() {
        let pyr = FeaturePyramid::new(0, DType::F64).unwrap();
        let a = Tensor::randn(0f64, 1.0, (2, 3, 16, 16), &dev()).unwrap();
        let b = Tensor::randn(0f64, 1.0, (2, 3, 16, 16), &dev()).unwrap();
        assert_eq!(scalar(&perceptual_loss(&a, &a, &pyr).unwrap()).unwrap(), 0.0);
        let got = scalar(&perceptual_loss(&a, &b, &pyr).unwrap()).unwrap();
        assert!(got > 0.0);
        let mut oracle = 0.0;
        for (fa, fb) in pyr.features(&a).unwrap().iter().zip(pyr.features(&b).unwrap()) {
            let va: Vec<f64> = fa.flatten_all().unwrap().to_vec1().unwrap();
            let vb: Vec<f64> = fb.flatten_all().unwrap().to_vec1().unwrap();
            oracle += va.iter().zip(&vb).map(|(p, q)| (p - q).abs()).sum::<f64>() / va.len() as f64;
        }
        assert!((got - oracle).abs() < 1e-12);
        let taps = pyr.features(&a).unwrap();
        assert_eq!(taps[0].dims(), &[2, 16, 8, 8]);
        assert_eq!(taps[2].dims(), &[2, 64, 2, 2]);
    }

    #[test]
    fn hinge_cases() {
        let t = |v: f64| Tensor::full(v, (2, 1, 3, 3), &dev()).unwrap();
        assert_eq!(scalar(&hinge_d_loss(&t(2.0), &t(-2.0)).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&hinge_d_loss(&t(0.0), &t(0.0)).unwrap()).unwrap(), 2.0);
        assert_eq!(scalar(&hinge_g_loss(&t(0.0)).unwrap()).unwrap(), 0.0);
        let r = Tensor::randn(0f64, 2.0, (7,), &dev()).unwrap();
        let f = Tensor::randn(0f64, 2.0, (5,), &dev()).unwrap();
        let rv: Vec<f64> = r.to_vec1().unwrap();
        let fv: Vec<f64> = f.to_vec1().unwrap();
        let oracle = rv.iter().map(|x| (1.0 - x).max(0.0)).sum::<f64>() / 7.0 + fv.iter().map(|x| (1.0 + x).max(0.0)).sum::<f64>() / 5.0;
        assert!((scalar(&hinge_d_loss(&r, &f).unwrap()).unwrap() - oracle).abs() < 1e-12);
        let g_oracle = -fv.iter().sum::<f64>() / 5.0;
        assert!((scalar(&hinge_g_loss(&f).unwrap()).unwrap() - g_oracle).abs() < 1e-12);
    }

    #[test]
    fn scc_analytic_cases() {
        let v = Tensor::randn(0f64, 1.0, (1, 128), &dev()).unwrap();
        let same = scalar(&scc_loss(&v, &v).unwrap()).unwrap();
        assert!(same.abs() < 1e-12);
        let anti = scalar(&scc_loss(&v, &v.neg().unwrap()).unwrap()).unwrap();
        assert!((anti - 2.0).abs() < 1e-12);
        let mut e0 = vec![0f64; 128];
        let mut e1 = vec![0f64; 128];
        e0[0] = 3.0;
        e1[1] = 0.5;
        let o = scalar(&scc_loss(&Tensor::from_vec(e0, (1, 128), &dev()).unwrap(), &Tensor::from_vec(e1, (1, 128), &dev()).unwrap()).unwrap()).unwrap();
        assert_eq!(o, 1.0);
        let zero = Tensor::zeros((1, 128), DType::F64, &dev()).unwrap();
        let z = scalar(&scc_loss(&zero, &v).unwrap()).unwrap();
        assert_eq!(z, 1.0);
    }

    #[test]
    fn stage_parsing() {
        assert_eq!("BACKGROUND".parse::<Stage>().unwrap(), Stage::Background);
        assert_eq!("object-gen".parse::<Stage>().unwrap(), Stage::ObjectGen);
        assert!("nope".parse::<Stage>().is_err());
    }
}
