//! Background generator with semantic-aware self-propagation in the decoder,
//! plus the boundary-anchored patch sampling used by its local critic.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::PatchCritic;
use crate::error::{dim_err, Error, Result};
use crate::modulation::{GatedConv2d, Saspm};
use crate::nn::{resize_bilinear, scalar, upsample2x, Activation, Conv2d, Network, ParamStore};
use crate::objectives::{
    compose_objective, hinge_d_loss, hinge_g_loss, l1_loss, perceptual_loss, FeaturePyramid, LossWeights, Stage, Term,
};
use crate::raster::BinaryGrid;
use crate::scene::{EditMask, SceneDecomposition, SegmentationMap};
use crate::train::{finish_report, Adam, LossReport, OptimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundGeneratorConfig {
    pub base_width: usize,
    pub num_down: usize,
    pub num_saspm: usize,
    pub scene_size: usize,
    /// Hidden width of the modulation parameter heads.
    pub head_hidden: usize,
    pub max_width: usize,
}

impl Default for BackgroundGeneratorConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            num_down: 4,
            num_saspm: 3,
            scene_size: 256,
            head_hidden: 64,
            max_width: 512,
        }
    }
}

impl BackgroundGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_down == 0 {
            return Err(Error::Config("background generator needs num_down >= 1".into()));
        }
        if self.scene_size % (1 << self.num_down) != 0 {
            return Err(Error::Config(format!(
                "scene size {} not divisible by 2^{}",
                self.scene_size, self.num_down
            )));
        }
        if self.num_saspm > self.num_down {
            return Err(Error::Config(format!(
                "{} SASPM blocks but only {} decoder stages",
                self.num_saspm, self.num_down
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        (self.base_width << level).min(self.max_width)
    }
}

/// Network-space inputs for one batch: `image` is the background input in
/// `[-1, 1]`, `hole` marks pixels the generator must fill (not background
/// mask), `known` marks unedited background pixels used for code pooling.
#[derive(Debug, Clone)]
pub struct BackgroundInput {
    pub image: Tensor,
    pub one_hot: Tensor,
    pub hole: Tensor,
    pub known: Tensor,
}

impl BackgroundInput {
    pub fn from_scene(
        decomposition: &SceneDecomposition,
        seg: &SegmentationMap,
        mask: &EditMask,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let bm = &decomposition.background_mask;
        let hole = BinaryGrid {
            height: bm.height,
            width: bm.width,
            data: bm.data.iter().map(|&b| 1 - b).collect(),
        };
        let known = BinaryGrid {
            height: bm.height,
            width: bm.width,
            data: bm.data.iter().zip(&mask.0.data).map(|(&b, &m)| b & (1 - m)).collect(),
        };
        Ok(Self {
            image: decomposition.background_input.to_tensor(dtype, device)?.unsqueeze(0)?,
            one_hot: seg.one_hot(dtype, device)?.unsqueeze(0)?,
            hole: hole.to_tensor(dtype, device)?.unsqueeze(0)?,
            known: known.to_tensor(dtype, device)?.unsqueeze(0)?,
        })
    }

    pub fn stack(items: &[BackgroundInput]) -> Result<Self> {
        let cat = |f: fn(&BackgroundInput) -> &Tensor| -> Result<Tensor> {
            Ok(Tensor::cat(&items.iter().map(f).collect::<Vec<_>>(), 0)?)
        };
        Ok(Self {
            image: cat(|i| &i.image)?,
            one_hot: cat(|i| &i.one_hot)?,
            hole: cat(|i| &i.hole)?,
            known: cat(|i| &i.known)?,
        })
    }
}

pub struct BackgroundGenerator {
    store: ParamStore,
    config: BackgroundGeneratorConfig,
    stem: GatedConv2d,
    down: Vec<GatedConv2d>,
    bottleneck: GatedConv2d,
    up: Vec<GatedConv2d>,
    saspm: Vec<Saspm>,
    out: Conv2d,
}

impl BackgroundGenerator {
    pub fn new(mut store: ParamStore, config: BackgroundGeneratorConfig, num_classes: usize, background: Vec<bool>) -> Result<Self> {
        config.validate()?;
        if background.len() != num_classes {
            return Err(dim_err!("{} background flags for {num_classes} classes", background.len()));
        }
        let act = Activation::LeakyRelu;
        let in_c = 3 + num_classes + 1;
        let stem = GatedConv2d::new(&mut store, "stem", in_c, config.width(0), 5, 1, act)?;
        let mut down = Vec::new();
        for i in 0..config.num_down {
            down.push(GatedConv2d::new(&mut store, &format!("down{i}"), config.width(i), config.width(i + 1), 3, 2, act)?);
        }
        let deepest = config.width(config.num_down);
        let bottleneck = GatedConv2d::new(&mut store, "bottleneck", deepest, deepest, 3, 1, act)?;
        let mut up = Vec::new();
        let mut saspm = Vec::new();
        for (j, level) in (0..config.num_down).rev().enumerate() {
            let (c_in, c_out) = (config.width(level + 1), config.width(level));
            up.push(GatedConv2d::new(&mut store, &format!("up{j}"), c_in, c_out, 3, 1, act)?);
            if j < config.num_saspm {
                saspm.push(Saspm::new(&mut store, &format!("saspm{j}"), c_out, c_out, config.head_hidden, background.clone())?);
            }
        }
        let out = Conv2d::new(&mut store, "out", config.width(0), 3, 3, 1)?;
        Ok(Self {
            store,
            config,
            stem,
            down,
            bottleneck,
            up,
            saspm,
            out,
        })
    }

    pub fn config(&self) -> &BackgroundGeneratorConfig {
        &self.config
    }

    /// Full-frame prediction in `[-1, 1]`.
    pub fn forward(&self, input: &BackgroundInput) -> Result<Tensor> {
        let x = Tensor::cat(&[&input.image, &input.one_hot, &input.hole], 1)?;
        let (_, _, h, w) = x.dims4()?;
        let div = 1 << self.config.num_down;
        if h % div != 0 || w % div != 0 {
            return Err(dim_err!("input {h}x{w} not divisible by {div}"));
        }
        let mut f = self.stem.forward(&x)?;
        for d in &self.down {
            f = d.forward(&f)?;
        }
        f = self.bottleneck.forward(&f)?;
        for (j, u) in self.up.iter().enumerate() {
            f = u.forward(&upsample2x(&f)?)?;
            if let Some(s) = self.saspm.get(j) {
                f = s.forward(&f, &input.one_hot, &input.known)?;
            }
        }
        Ok(self.out.forward(&f)?.tanh()?)
    }

    pub fn store_device(&self) -> candle_core::Device {
        self.store.device().clone()
    }

    pub fn saspm_param_names(&self) -> Vec<String> {
        self.store
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("saspm"))
            .map(|(n, _)| n.clone())
            .collect()
    }
}

impl Network for BackgroundGenerator {
    fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// `erased + generated * (hole ∧ edited)`; inputs are network-space `[-1, 1]`
/// tensors, masks are `[B, 1, H, W]`.
pub fn reblend(known_image: &Tensor, generated: &Tensor, region: &Tensor) -> Result<Tensor> {
    let keep = (1.0 - region)?;
    Ok((known_image.broadcast_mul(&keep)? + generated.broadcast_mul(region)?)?)
}

/// Pixels inside the mask with at least one 4-neighbour outside it.
pub fn boundary_pixels(mask: &BinaryGrid) -> Vec<(usize, usize)> {
    let (h, w) = mask.dims();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            let outside = (y > 0 && mask.get(y - 1, x) == 0)
                || (y + 1 < h && mask.get(y + 1, x) == 0)
                || (x > 0 && mask.get(y, x - 1) == 0)
                || (x + 1 < w && mask.get(y, x + 1) == 0);
            if outside {
                out.push((y, x));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub count: usize,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            count: 4,
            min_size: 96,
            max_size: 160,
        }
    }
}

impl PatchSpec {
    /// Default sizes rescaled from 256 to `scene_size`, rounded to even.
    pub fn for_scene(scene_size: usize) -> Self {
        let scale = |s: usize| -> usize {
            let v = s as f64 * scene_size as f64 / 256.0;
            ((v / 2.0).round() as usize * 2).max(2)
        };
        let d = Self::default();
        Self {
            count: d.count,
            min_size: scale(d.min_size),
            max_size: scale(d.max_size).min(scene_size),
        }
    }

    pub fn validate(&self, scene_size: usize) -> Result<()> {
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > scene_size {
            return Err(Error::Config(format!("invalid patch spec {self:?} for scene {scene_size}")));
        }
        Ok(())
    }
}

/// A square critic window; `center` is the boundary pixel it was drawn around
/// before being moved inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchWindow {
    pub center: (usize, usize),
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// Draws `spec.count` windows centered on the edit boundary. Returns an empty
/// list when the boundary is empty.
pub fn sample_boundary_patches(mask: &BinaryGrid, spec: &PatchSpec, rng: &mut impl Rng) -> Vec<PatchWindow> {
    let boundary = boundary_pixels(mask);
    if boundary.is_empty() {
        return Vec::new();
    }
    let (h, w) = mask.dims();
    (0..spec.count)
        .map(|_| {
            let center = boundary[rng.gen_range(0..boundary.len())];
            let side = rng.gen_range(spec.min_size..=spec.max_size).min(h).min(w);
            let fit = |c: usize, limit: usize| (c as isize - side as isize / 2).clamp(0, (limit - side) as isize) as usize;
            PatchWindow {
                center,
                top: fit(center.0, h),
                left: fit(center.1, w),
                side,
            }
        })
        .collect()
}

/// Crops `windows` from sample `index` of `images: [B, C, H, W]` and resizes
/// each to `critic_side`; returns `[N, C, critic_side, critic_side]`.
pub fn crop_patches(images: &Tensor, per_sample: &[Vec<PatchWindow>], critic_side: usize) -> Result<Option<Tensor>> {
    let mut crops = Vec::new();
    for (b, windows) in per_sample.iter().enumerate() {
        let img = images.narrow(0, b, 1)?;
        for win in windows {
            let crop = img.narrow(2, win.top, win.side)?.narrow(3, win.left, win.side)?;
            crops.push(resize_bilinear(&crop, critic_side, critic_side)?);
        }
    }
    if crops.is_empty() {
        return Ok(None);
    }
    Ok(Some(Tensor::cat(&crops, 0)?))
}

/// One training batch in network space. `target` is the ground truth and
/// `edit` the edit mask `M`; `windows` holds the critic windows per sample.
#[derive(Debug, Clone)]
pub struct BackgroundBatch {
    pub input: BackgroundInput,
    pub target: Tensor,
    pub edit: Tensor,
    pub windows: Vec<Vec<PatchWindow>>,
}

pub struct BackgroundTrainer {
    pub generator: BackgroundGenerator,
    pub d_global: PatchCritic,
    pub d_patch: PatchCritic,
    opt_g: Adam,
    opt_dg: Adam,
    opt_dp: Adam,
    pub weights: LossWeights,
    pyramid: FeaturePyramid,
    pub critic_side: usize,
    /// When false the critics are neither stepped nor consulted and the GAN
    /// parts are reported as zero.
    pub adversarial: bool,
}

impl BackgroundTrainer {
    pub fn new(
        generator: BackgroundGenerator,
        d_global: PatchCritic,
        d_patch: PatchCritic,
        optim: &OptimConfig,
        weights: LossWeights,
        pyramid: FeaturePyramid,
        critic_side: usize,
    ) -> Result<Self> {
        weights.validate()?;
        optim.validate()?;
        Ok(Self {
            opt_g: optim.generator(generator.store().vars())?,
            opt_dg: optim.critic(d_global.store().vars())?,
            opt_dp: optim.critic(d_patch.store().vars())?,
            generator,
            d_global,
            d_patch,
            weights,
            pyramid,
            critic_side,
            adversarial: true,
        })
    }

    pub fn step(&mut self, batch: &BackgroundBatch) -> Result<LossReport> {
        let stage = Stage::Background;
        let out = self.generator.forward(&batch.input)?;
        let fake_full = reblend(&batch.target, &out, &batch.edit)?;
        let cond = |x: &Tensor| -> Result<Tensor> { Ok(Tensor::cat(&[x, &batch.input.one_hot], 1)?) };
        let mut critic = BTreeMap::new();

        if self.adversarial {
            let fake_det = fake_full.detach();
            let real = self.d_global.forward(&cond(&batch.target)?, true)?;
            let fake = self.d_global.forward(&cond(&fake_det)?, true)?;
            let loss = hinge_d_loss(&real, &fake)?;
            critic.insert("d_global".to_string(), scalar(&loss)?);
            self.opt_dg.step(&loss)?;

            let real_p = crop_patches(&batch.target, &batch.windows, self.critic_side)?;
            let fake_p = crop_patches(&fake_det, &batch.windows, self.critic_side)?;
            if let (Some(real_p), Some(fake_p)) = (real_p, fake_p) {
                let real = self.d_patch.forward(&real_p, true)?;
                let fake = self.d_patch.forward(&fake_p, true)?;
                let loss = hinge_d_loss(&real, &fake)?;
                critic.insert("d_patch".to_string(), scalar(&loss)?);
                self.opt_dp.step(&loss)?;
            }
        }

        let zero = Tensor::zeros((), out.dtype(), out.device())?;
        let mut parts = BTreeMap::new();
        parts.insert(Term::L1, l1_loss(&out, &batch.target)?);
        parts.insert(Term::Perceptual, perceptual_loss(&out, &batch.target, &self.pyramid)?);
        let (gan_g, gan_p) = if self.adversarial {
            let g = hinge_g_loss(&self.d_global.forward(&cond(&fake_full)?, false)?)?;
            let p = match crop_patches(&fake_full, &batch.windows, self.critic_side)? {
                Some(patches) => hinge_g_loss(&self.d_patch.forward(&patches, false)?)?,
                None => zero.clone(),
            };
            (g, p)
        } else {
            (zero.clone(), zero)
        };
        parts.insert(Term::GanGlobal, gan_g);
        parts.insert(Term::GanPatch, gan_p);
        let total = compose_objective(stage, &parts, &self.weights)?;
        let report = finish_report(stage, &parts, &total, critic)?;
        self.opt_g.step(&total)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn boundary_degenerate_cases() {
        assert!(boundary_pixels(&BinaryGrid::new(6, 6)).is_empty());
        assert!(boundary_pixels(&BinaryGrid::filled(6, 6, 1)).is_empty());
    }

    #[test]
    fn boundary_of_centered_square_is_inner_ring() {
        let mut m = BinaryGrid::new(12, 12);
        for y in 3..9 {
            for x in 3..9 {
                m.set(y, x, 1);
            }
        }
        let got = boundary_pixels(&m);
        let mut expected = Vec::new();
        for y in 0..12 {
            for x in 0..12 {
                let on_ring = (3..9).contains(&y) && (3..9).contains(&x) && (y == 3 || y == 8 || x == 3 || x == 8);
                if on_ring {
                    expected.push((y, x));
                }
            }
        }
        assert_eq!(got, expected);
        assert_eq!(got.len(), 20);
    }

    #[test]
    fn windows_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = BinaryGrid::new(64, 64);
        for y in 0..10 {
            for x in 50..64 {
                m.set(y, x, 1);
            }
        }
        let spec = PatchSpec::for_scene(64);
        assert_eq!((spec.min_size, spec.max_size), (24, 40));
        for _ in 0..200 {
            for win in sample_boundary_patches(&m, &spec, &mut rng) {
                assert!(win.top + win.side <= 64 && win.left + win.side <= 64);
                assert!((spec.min_size..=spec.max_size).contains(&win.side));
            }
        }
        assert!(sample_boundary_patches(&BinaryGrid::new(64, 64), &spec, &mut rng).is_empty());
    }

    #[test]
    fn patch_sizes_at_reference_resolution() {
        assert_eq!(PatchSpec::for_scene(256), PatchSpec::default());
        assert!(PatchSpec { count: 4, min_size: 50, max_size: 40 }.validate(64).is_err());
    }
}
