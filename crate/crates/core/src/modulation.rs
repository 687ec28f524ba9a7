//! Spatially-adaptive modulation layers.
//!
//! [`Saspm`] pools per-class feature codes from the known region, spreads each
//! code over its class region and uses the resulting code map to modulate the
//! features. [`Ssnm`] stacks two modulation stages: one driven by a
//! foreground-class one-hot map, one by a broadcast style code. Both share the
//! conv -> instance norm -> `relu(gamma * x + beta)` pattern in
//! [`ModulationStage`].

use candle_core::{DType, Tensor};

use crate::error::{dim_err, Result};
use crate::nn::{instance_norm, Activation, Conv2d, ParamStore};

pub const STYLE_DIM: usize = 128;

/// Per-class feature codes pooled from the known region: `codes` is
/// `[B, L, C]`; `valid[b][l]` marks classes that contributed pixels.
#[derive(Debug, Clone)]
pub struct CodeTable {
    pub codes: Tensor,
    pub valid: Vec<Vec<bool>>,
}

/// Nearest-neighbour downsampling of a `[B, L, H, W]` one-hot map by an
/// integer factor, sampling the center pixel of each block.
pub fn downsample_one_hot(one_hot: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(one_hot.clone());
    }
    let (b, l, h, w) = one_hot.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(dim_err!("{h}x{w} not divisible by {factor}"));
    }
    let mid = factor / 2;
    Ok(one_hot
        .reshape((b, l, h / factor, factor, w / factor, factor))?
        .narrow(3, mid, 1)?
        .narrow(5, mid, 1)?
        .reshape((b, l, h / factor, w / factor))?
        .contiguous()?)
}

/// Area-average a `[B, 1, H, W]` binary mask by `factor`, then threshold at 0.5.
pub fn downsample_known(known: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(known.clone());
    }
    let pooled = known.avg_pool2d(factor)?;
    Ok(pooled.ge(0.5)?.to_dtype(known.dtype())?)
}

/// Mean feature per background class over known pixels.
///
/// `features: [B, C, h, w]`, `one_hot: [B, L, h, w]`, `known: [B, 1, h, w]`,
/// `background[l]` true for background classes. Foreground and absent classes
/// get a zero row.
pub fn extract_codes(features: &Tensor, one_hot: &Tensor, known: &Tensor, background: &[bool]) -> Result<CodeTable> {
    let (b, c, h, w) = features.dims4()?;
    let (b2, l, h2, w2) = one_hot.dims4()?;
    if (b, h, w) != (b2, h2, w2) || known.dims4()? != (b, 1, h, w) || background.len() != l {
        return Err(dim_err!(
            "extract_codes: features {:?}, one-hot {:?}, known {:?}, {} class flags",
            features.dims(),
            one_hot.dims(),
            known.dims(),
            background.len()
        ));
    }
    let bg = Tensor::from_vec(
        background.iter().map(|&x| x as u8 as f32).collect::<Vec<_>>(),
        (1, l, 1),
        features.device(),
    )?
    .to_dtype(features.dtype())?;
    // [B, L, hw] selection weights: background class and known.
    let select = one_hot
        .broadcast_mul(known)?
        .reshape((b, l, h * w))?
        .broadcast_mul(&bg)?
        .detach();
    let counts = select.sum_keepdim(2)?; // [B, L, 1]
    let sums = select.matmul(&features.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)?; // [B, L, C]
    let codes = sums.broadcast_div(&counts.clamp(1.0, f64::INFINITY)?)?;
    let counts_host: Vec<Vec<f64>> = counts.squeeze(2)?.to_dtype(DType::F64)?.to_vec2()?;
    let valid = counts_host
        .into_iter()
        .map(|row| row.into_iter().map(|n| n > 0.0).collect())
        .collect();
    Ok(CodeTable { codes, valid })
}

/// `P = S (x) U`: each pixel receives the code row of its class.
/// `one_hot: [B, L, h, w]`, `codes: [B, L, C]` -> `[B, C, h, w]`.
pub fn broadcast_codes(one_hot: &Tensor, codes: &Tensor) -> Result<Tensor> {
    let (b, l, h, w) = one_hot.dims4()?;
    let (b2, l2, c) = codes.dims3()?;
    if (b, l) != (b2, l2) {
        return Err(dim_err!("broadcast_codes: one-hot {:?} vs codes {:?}", one_hot.dims(), codes.dims()));
    }
    let flat = one_hot.reshape((b, l, h * w))?.transpose(1, 2)?.contiguous()?; // [B, hw, L]
    Ok(flat
        .matmul(codes)? // [B, hw, C]
        .transpose(1, 2)?
        .reshape((b, c, h, w))?)
}

/// `[B, 128]` codes broadcast inside `mask: [B, 1, h, w]`, zero elsewhere.
pub fn make_style_map(codes: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, d) = codes.dims2()?;
    let (b2, one, _, _) = mask.dims4()?;
    if b != b2 || one != 1 {
        return Err(dim_err!("make_style_map: codes {:?}, mask {:?}", codes.dims(), mask.dims()));
    }
    Ok(codes.reshape((b, d, 1, 1))?.broadcast_mul(mask)?)
}

/// Produces `(gamma, beta)` from a conditioning map: shared 3x3 conv + ReLU
/// followed by two sibling 3x3 convs. `gamma` is offset by +1.
pub struct ParamHead {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl ParamHead {
    pub fn new(store: &mut ParamStore, name: &str, cond_c: usize, hidden: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            shared: Conv2d::new(store, &format!("{name}.shared"), cond_c, hidden, 3, 1)?,
            gamma: Conv2d::new(store, &format!("{name}.gamma"), hidden, out_c, 3, 1)?,
            beta: Conv2d::new(store, &format!("{name}.beta"), hidden, out_c, 3, 1)?,
        })
    }

    pub fn forward(&self, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.shared.forward(cond)?.relu()?;
        let gamma = (self.gamma.forward(&h)? + 1.0)?;
        let beta = self.beta.forward(&h)?;
        Ok((gamma, beta))
    }
}

/// `relu(gamma(cond) * IN(conv(x)) + beta(cond))`.
pub struct ModulationStage {
    conv: Conv2d,
    head: ParamHead,
}

impl ModulationStage {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        cond_c: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_c, out_c, 3, 1)?,
            head: ParamHead::new(store, &format!("{name}.head"), cond_c, hidden, out_c)?,
        })
    }

    /// Normalized features before modulation.
    pub fn normalized(&self, x: &Tensor) -> Result<Tensor> {
        instance_norm(&self.conv.forward(x)?)
    }

    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let normed = self.normalized(x)?;
        let (gamma, beta) = self.head.forward(cond)?;
        Ok(gamma.mul(&normed)?.add(&beta)?.relu()?)
    }
}

/// Semantic-aware self-propagation: known-region class codes modulate the
/// features everywhere the class appears.
pub struct Saspm {
    stage: ModulationStage,
    background: Vec<bool>,
}

impl Saspm {
    /// `channels` is both the feature width and the code width.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, out_c: usize, hidden: usize, background: Vec<bool>) -> Result<Self> {
        Ok(Self {
            stage: ModulationStage::new(store, name, channels, out_c, channels, hidden)?,
            background,
        })
    }

    /// Code map `P` at the resolution of `features`.
    ///
    /// `one_hot: [B, L, H, W]` and `known: [B, 1, H, W]` are at full
    /// resolution and are downsampled here.
    pub fn code_map(&self, features: &Tensor, one_hot: &Tensor, known: &Tensor) -> Result<Tensor> {
        let (_, _, h, _) = features.dims4()?;
        let (_, _, full_h, _) = one_hot.dims4()?;
        if full_h % h != 0 {
            return Err(dim_err!("feature height {h} does not divide {full_h}"));
        }
        let factor = full_h / h;
        let seg = downsample_one_hot(one_hot, factor)?;
        let known = downsample_known(known, factor)?;
        let table = extract_codes(features, &seg, &known, &self.background)?;
        broadcast_codes(&seg, &table.codes)
    }

    pub fn forward(&self, features: &Tensor, one_hot: &Tensor, known: &Tensor) -> Result<Tensor> {
        let p = self.code_map(features, one_hot, known)?;
        self.stage.forward(features, &p)
    }

    pub fn forward_with_code_map(&self, features: &Tensor, code_map: &Tensor) -> Result<Tensor> {
        self.stage.forward(features, code_map)
    }
}

/// Semantic then style modulation.
pub struct Ssnm {
    semantic: ModulationStage,
    style: ModulationStage,
}

impl Ssnm {
    pub fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, classes: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            semantic: ModulationStage::new(store, &format!("{name}.sem"), in_c, out_c, classes, hidden)?,
            style: ModulationStage::new(store, &format!("{name}.style"), out_c, out_c, STYLE_DIM, hidden)?,
        })
    }

    /// `sem: [B, K, h, w]` and `style_map: [B, 128, h, w]` must already be at
    /// the resolution of `x`.
    pub fn forward(&self, x: &Tensor, sem: &Tensor, style_map: &Tensor) -> Result<Tensor> {
        let f_sem = self.semantic.forward(x, sem)?;
        self.style.forward(&f_sem, style_map)
    }
}

/// `act(conv_f(x)) * sigmoid(conv_g(x))`.
pub struct GatedConv2d {
    feature: Conv2d,
    gate: Conv2d,
    activation: Activation,
}

impl GatedConv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    ) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(dim_err!("gated conv stride must be 1 or 2, got {stride}"));
        }
        Ok(Self {
            feature: Conv2d::new(store, &format!("{name}.feature"), in_c, out_c, kernel, stride)?,
            gate: Conv2d::new(store, &format!("{name}.gate"), in_c, out_c, kernel, stride)?,
            activation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.activation.apply(&self.feature.forward(x)?)?;
        let g = candle_nn::ops::sigmoid(&self.gate.forward(x)?)?;
        Ok(f.mul(&g)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_abs, scalar};
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dev() -> Device {
        Device::Cpu
    }

    /// Sets every tensor of a param head so that gamma == 0 and beta == 0.
    fn silence_head(store: &ParamStore, prefix: &str) {
        for (name, var) in store.params() {
            if name.starts_with(prefix) {
                let fill = if name.ends_with("gamma.bias") { -1.0 } else { 0.0 };
                var.set(&var.as_tensor().ones_like().unwrap().affine(0.0, fill).unwrap()).unwrap();
            }
        }
    }

    fn random_labels(rng: &mut impl Rng, b: usize, l: usize, h: usize, w: usize) -> (Vec<usize>, Tensor) {
        let labels: Vec<usize> = (0..b * h * w).map(|_| rng.gen_range(0..l)).collect();
        let mut oh = vec![0f64; b * l * h * w];
        for bi in 0..b {
            for p in 0..h * w {
                oh[(bi * l + labels[bi * h * w + p]) * h * w + p] = 1.0;
            }
        }
        (labels, Tensor::from_vec(oh, (b, l, h, w), &dev()).unwrap())
    }

    #[test]
    fn constant_sky_code_is_exact() {
        let (h, w, c) = (4, 4, 3);
        let sky = [0.5, -2.0, 7.25];
        let mut f = vec![0f64; c * h * w];
        let mut oh = vec![0f64; 2 * h * w];
        for p in 0..h * w {
            let is_sky = p < 8;
            oh[(!is_sky) as usize * h * w + p] = 1.0;
            for ch in 0..c {
                f[ch * h * w + p] = if is_sky { sky[ch] } else { p as f64 };
            }
        }
        let f = Tensor::from_vec(f, (1, c, h, w), &dev()).unwrap();
        let oh = Tensor::from_vec(oh, (1, 2, h, w), &dev()).unwrap();
        let known = Tensor::ones((1, 1, h, w), DType::F64, &dev()).unwrap();
        let t = extract_codes(&f, &oh, &known, &[true, false]).unwrap();
        let codes: Vec<Vec<f64>> = t.codes.squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(codes[0], sky.to_vec());
        // Class 1 is foreground: zero row, invalid.
        assert_eq!(codes[1], vec![0.0; 3]);
        assert_eq!(t.valid[0], vec![true, false]);
    }

    #[test]
    fn absent_class_gives_zero_invalid_row() {
        let f = Tensor::randn(0f64, 1.0, (1, 2, 3, 3), &dev()).unwrap();
        let oh = Tensor::cat(&[Tensor::ones((1, 1, 3, 3), DType::F64, &dev()).unwrap(), Tensor::zeros((1, 1, 3, 3), DType::F64, &dev()).unwrap()], 1).unwrap();
        let known = Tensor::ones((1, 1, 3, 3), DType::F64, &dev()).unwrap();
        let t = extract_codes(&f, &oh, &known, &[true, true]).unwrap();
        assert_eq!(t.valid[0], vec![true, false]);
        let row: Vec<f64> = t.codes.get(0).unwrap().get(1).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![0.0, 0.0]);
        // No known pixels at all: everything invalid.
        let t = extract_codes(&f, &oh, &known.zeros_like().unwrap(), &[true, true]).unwrap();
        assert_eq!(t.valid[0], vec![false, false]);
    }

    #[test]
    fn codes_match_masked_mean_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, l, c, h, w) = (2, 4, 3, 4, 4);
        let (labels, oh) = random_labels(&mut rng, b, l, h, w);
        let known_v: Vec<f64> = (0..b * h * w).map(|_| rng.gen_bool(0.6) as u8 as f64).collect();
        let f_v: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Tensor::from_vec(f_v.clone(), (b, c, h, w), &dev()).unwrap();
        let known = Tensor::from_vec(known_v.clone(), (b, 1, h, w), &dev()).unwrap();
        let bgf = [true, false, true, true];
        let t = extract_codes(&f, &oh, &known, &bgf).unwrap();
        let codes: Vec<f64> = t.codes.flatten_all().unwrap().to_vec1().unwrap();
        for bi in 0..b {
            for cl in 0..l {
                for ch in 0..c {
                    let (mut s, mut n) = (0.0, 0);
                    for p in 0..h * w {
                        if bgf[cl] && labels[bi * h * w + p] == cl && known_v[bi * h * w + p] == 1.0 {
                            s += f_v[(bi * c + ch) * h * w + p];
                            n += 1;
                        }
                    }
                    let expected = if n > 0 { s / n as f64 } else { 0.0 };
                    assert!((codes[(bi * l + cl) * c + ch] - expected).abs() < 1e-12);
                    assert_eq!(t.valid[bi][cl], n > 0);
                }
            }
        }
    }

    #[test]
    fn broadcast_lookup_and_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, l, c, h, w) = (1, 3, 5, 4, 6);
        let (labels, oh) = random_labels(&mut rng, b, l, h, w);
        let u = Tensor::randn(0f64, 1.0, (b, l, c), &dev()).unwrap();
        let p: Vec<f64> = broadcast_codes(&oh, &u).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let uv: Vec<f64> = u.flatten_all().unwrap().to_vec1().unwrap();
        for px in 0..h * w {
            for ch in 0..c {
                assert!((p[ch * h * w + px] - uv[labels[px] * c + ch]).abs() < 1e-12);
            }
        }
        let zeros = broadcast_codes(&oh, &u.zeros_like().unwrap()).unwrap();
        assert_eq!(max_abs(&zeros).unwrap(), 0.0);
        // Single class everywhere -> constant code.
        let single = Tensor::cat(&[Tensor::zeros((1, 1, h, w), DType::F64, &dev()).unwrap(), Tensor::ones((1, 1, h, w), DType::F64, &dev()).unwrap(), Tensor::zeros((1, 1, h, w), DType::F64, &dev()).unwrap()], 1).unwrap();
        let p = broadcast_codes(&single, &u).unwrap();
        let row1 = u.get(0).unwrap().get(1).unwrap().reshape((1, c, 1, 1)).unwrap();
        assert!(max_abs(&p.broadcast_sub(&row1).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn propagation_reproduces_classwise_constant_features() {
        // F constant per class: extract then broadcast gives F back on
        // background pixels.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (l, c, h, w) = (3, 2, 5, 5);
        let (labels, oh) = random_labels(&mut rng, 1, l, h, w);
        let per_class: Vec<[f64; 2]> = (0..l).map(|_| [rng.gen(), rng.gen()]).collect();
        let mut f = vec![0f64; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                f[ch * h * w + p] = per_class[labels[p]][ch];
            }
        }
        let ft = Tensor::from_vec(f.clone(), (1, c, h, w), &dev()).unwrap();
        let known = Tensor::ones((1, 1, h, w), DType::F64, &dev()).unwrap();
        let bg = [true, true, false];
        let t = extract_codes(&ft, &oh, &known, &bg).unwrap();
        let p: Vec<f64> = broadcast_codes(&oh, &t.codes).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for px in 0..h * w {
            if bg[labels[px]] {
                for ch in 0..c {
                    assert!((p[ch * h * w + px] - f[ch * h * w + px]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn label_and_known_downsampling() {
        let (_, oh) = random_labels(&mut ChaCha8Rng::seed_from_u64(1), 1, 3, 8, 8);
        let d = downsample_one_hot(&oh, 4).unwrap();
        assert_eq!(d.dims(), &[1, 3, 2, 2]);
        let full: Vec<f64> = oh.flatten_all().unwrap().to_vec1().unwrap();
        let small: Vec<f64> = d.flatten_all().unwrap().to_vec1().unwrap();
        for l in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(small[(l * 2 + y) * 2 + x], full[(l * 8 + y * 4 + 2) * 8 + x * 4 + 2]);
                }
            }
        }
        let mut k = vec![0f64; 16];
        k[0] = 1.0;
        k[1] = 1.0; // block (0,0): 2/4 known -> kept
        k[2] = 1.0; // block (0,1): 1/4 -> dropped
        let k = Tensor::from_vec(k, (1, 1, 4, 4), &dev()).unwrap();
        let kd: Vec<f64> = downsample_known(&k, 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(kd, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn style_map_cases() {
        let mut code = vec![0f64; STYLE_DIM];
        code[7] = 1.0;
        let code = Tensor::from_vec(code, (1, STYLE_DIM), &dev()).unwrap();
        let full = Tensor::ones((1, 1, 3, 4), DType::F64, &dev()).unwrap();
        let m = make_style_map(&code, &full).unwrap();
        let sums: Vec<f64> = m.sum((2, 3)).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
        for (ch, s) in sums.iter().enumerate() {
            assert_eq!(*s, if ch == 7 { 12.0 } else { 0.0 });
        }
        let empty = make_style_map(&code, &full.zeros_like().unwrap()).unwrap();
        assert_eq!(max_abs(&empty).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask_v: Vec<f64> = (0..20).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let code_v: Vec<f64> = (0..STYLE_DIM).map(|_| rng.gen()).collect();
        let m = make_style_map(
            &Tensor::from_vec(code_v.clone(), (1, STYLE_DIM), &dev()).unwrap(),
            &Tensor::from_vec(mask_v.clone(), (1, 1, 4, 5), &dev()).unwrap(),
        )
        .unwrap();
        let mv: Vec<f64> = m.flatten_all().unwrap().to_vec1().unwrap();
        for ch in 0..STYLE_DIM {
            for p in 0..20 {
                assert_eq!(mv[ch * 20 + p], if mask_v[p] == 1.0 { code_v[ch] } else { 0.0 });
            }
        }
    }

    #[test]
    fn saspm_zero_params_and_nonnegative() {
        let mut store = ParamStore::new(1, DType::F64);
        let saspm = Saspm::new(&mut store, "s", 4, 4, 8, vec![true, true, false]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, oh) = random_labels(&mut rng, 2, 3, 8, 8);
        let known = Tensor::from_vec((0..128).map(|_| rng.gen_bool(0.5) as u8 as f64).collect::<Vec<_>>(), (2, 1, 8, 8), &dev()).unwrap();
        let f = Tensor::randn(0f64, 1.0, (2, 4, 4, 4), &dev()).unwrap();
        let y = saspm.forward(&f, &oh, &known).unwrap();
        assert_eq!(y.dims(), &[2, 4, 4, 4]);
        assert!(scalar(&y.min_all().unwrap()).unwrap() >= 0.0);
        silence_head(&store, "s.head");
        let y = saspm.forward(&f, &oh, &known).unwrap();
        assert_eq!(max_abs(&y).unwrap(), 0.0);
    }

    #[test]
    fn ssnm_zero_params_and_style_sensitivity() {
        let mut store = ParamStore::new(2, DType::F64);
        let ssnm = Ssnm::new(&mut store, "n", 4, 6, 2, 8).unwrap();
        let f = Tensor::randn(0f64, 1.0, (1, 4, 4, 4), &dev()).unwrap();
        let sem = Tensor::cat(&[Tensor::ones((1, 1, 4, 4), DType::F64, &dev()).unwrap(), Tensor::zeros((1, 1, 4, 4), DType::F64, &dev()).unwrap()], 1).unwrap();
        let mask = Tensor::ones((1, 1, 4, 4), DType::F64, &dev()).unwrap();
        let s1 = make_style_map(&Tensor::randn(0f64, 1.0, (1, STYLE_DIM), &dev()).unwrap(), &mask).unwrap();
        let s2 = make_style_map(&Tensor::randn(0f64, 1.0, (1, STYLE_DIM), &dev()).unwrap(), &mask).unwrap();
        let y1 = ssnm.forward(&f, &sem, &s1).unwrap();
        let y2 = ssnm.forward(&f, &sem, &s2).unwrap();
        assert!(scalar(&y1.min_all().unwrap()).unwrap() >= 0.0);
        assert!(scalar(&(y1 - &y2).unwrap().abs().unwrap().mean_all().unwrap()).unwrap() > 0.0);
        silence_head(&store, "n.sem.head");
        silence_head(&store, "n.style.head");
        assert_eq!(max_abs(&ssnm.forward(&f, &sem, &s1).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn gated_conv_saturation_and_oracle() {
        let mut store = ParamStore::new(5, DType::F64);
        let g = GatedConv2d::new(&mut store, "g", 2, 3, 3, 1, Activation::LeakyRelu).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 2, 5, 5), &dev()).unwrap();

        // Oracle: two convolutions recomputed with candle's own conv2d.
        let w = |n: &str| store.get(n).unwrap().as_tensor().clone();
        let feat = x.conv2d(&w("g.feature.weight"), 1, 1, 1, 1).unwrap().broadcast_add(&w("g.feature.bias").reshape((1, 3, 1, 1)).unwrap()).unwrap();
        let gate = x.conv2d(&w("g.gate.weight"), 1, 1, 1, 1).unwrap().broadcast_add(&w("g.gate.bias").reshape((1, 3, 1, 1)).unwrap()).unwrap();
        let feat = feat.maximum(&(&feat * 0.2).unwrap()).unwrap();
        let sig = (gate.neg().unwrap().exp().unwrap() + 1.0).unwrap().recip().unwrap();
        let expected = (feat.clone() * sig).unwrap();
        assert!(max_abs(&(g.forward(&x).unwrap() - expected).unwrap()).unwrap() < 1e-12);

        for (bias, open) in [(20.0, true), (-20.0, false)] {
            let gw: &Var = store.get("g.gate.weight").unwrap();
            gw.set(&gw.as_tensor().zeros_like().unwrap()).unwrap();
            let gb = store.get("g.gate.bias").unwrap();
            gb.set(&(gb.as_tensor().zeros_like().unwrap() + bias).unwrap()).unwrap();
            let y = g.forward(&x).unwrap();
            let target = if open { feat.clone() } else { feat.zeros_like().unwrap() };
            assert!(max_abs(&(y - target).unwrap()).unwrap() < 1e-6 * (1.0 + max_abs(&feat).unwrap()));
        }
        assert!(GatedConv2d::new(&mut store, "bad", 2, 3, 3, 3, Activation::Relu).is_err());
    }
}
