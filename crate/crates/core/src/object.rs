//! Object synthesis: the inpainter for partly visible instances, the
//! style-conditioned generator for hidden ones, their style encoders, and the
//! persisted style bank.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::PatchCritic;
use crate::error::{dim_err, invalid, Error, Result};
use crate::modulation::{downsample_one_hot, make_style_map, Ssnm, STYLE_DIM};
use crate::nn::{global_avg, leaky_relu, scalar, upsample2x, Conv2d, Linear, Network, ParamStore};
use crate::objectives::{
    compose_objective, hinge_d_loss, hinge_g_loss, l1_loss, perceptual_loss, scc_loss, FeaturePyramid, LossWeights, Stage,
    Term,
};
use crate::raster::{BinaryGrid, RgbImage};
use crate::train::{finish_report, Adam, LossReport, OptimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectGenConfig {
    pub crop_size: usize,
    pub ssnm_blocks: usize,
    /// Inpainter width at full crop resolution.
    pub inpaint_width: usize,
    pub inpaint_down: usize,
    /// Generator width at the constant block; halves per upsampling stage.
    pub gen_width: usize,
    pub encoder_width: usize,
    pub head_hidden: usize,
}

impl Default for ObjectGenConfig {
    fn default() -> Self {
        Self {
            crop_size: 128,
            ssnm_blocks: 4,
            inpaint_width: 32,
            inpaint_down: 3,
            gen_width: 256,
            encoder_width: 32,
            head_hidden: 64,
        }
    }
}

impl ObjectGenConfig {
    pub fn validate(&self) -> Result<()> {
        let deepest = self.ssnm_blocks.max(self.inpaint_down);
        if self.ssnm_blocks == 0 || self.crop_size % (1 << deepest) != 0 {
            return Err(Error::Config(format!(
                "crop size {} must be divisible by 2^{deepest} and ssnm_blocks >= 1",
                self.crop_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCode {
    pub class_id: usize,
    pub vector: Vec<f32>,
}

impl StyleCode {
    pub fn new(class_id: usize, vector: Vec<f32>) -> Result<Self> {
        if vector.len() != STYLE_DIM {
            return Err(dim_err!("style code has {} values, expected {STYLE_DIM}", vector.len()));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("style code contains non-finite values"));
        }
        Ok(Self { class_id, vector })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.vector, (1, STYLE_DIM), device)?.to_dtype(dtype)?)
    }
}

/// Zeroes pixels outside `mask`.
pub fn isolate(crop: &RgbImage, mask: &BinaryGrid) -> Result<RgbImage> {
    if crop.dims() != mask.dims() {
        return Err(dim_err!("isolate: crop {:?} vs mask {:?}", crop.dims(), mask.dims()));
    }
    let mut out = crop.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 0 {
            out.data[i * 3..i * 3 + 3].fill(0.0);
        }
    }
    Ok(out)
}

/// `[1, K, S, S]`: the class channel carries the instance mask, the rest are zero.
pub fn semantic_map(instance: &BinaryGrid, class_index: usize, num_classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if class_index >= num_classes {
        return Err(invalid!("foreground index {class_index} outside {num_classes} classes"));
    }
    let (h, w) = instance.dims();
    let m = instance.to_tensor(dtype, device)?;
    let mut planes = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        planes.push(if k == class_index { m.clone() } else { Tensor::zeros((1, h, w), dtype, device)? });
    }
    Ok(Tensor::cat(&planes, 0)?.unsqueeze(0)?)
}

/// UNet inpainter. Input: isolated crop with the hole zeroed, the hole mask
/// and the class-masked semantic map.
pub struct ObjectInpainter {
    store: ParamStore,
    stem: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    out: Conv2d,
    num_classes: usize,
}

impl ObjectInpainter {
    pub fn new(mut store: ParamStore, config: &ObjectGenConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let w = |l: usize| config.inpaint_width << l;
        let stem = Conv2d::new(&mut store, "stem", 3 + 1 + num_classes, w(0), 3, 1)?;
        let mut down = Vec::new();
        for l in 0..config.inpaint_down {
            down.push(Conv2d::new(&mut store, &format!("down{l}"), w(l), w(l + 1), 4, 2)?);
        }
        let mut up = Vec::new();
        for l in (0..config.inpaint_down).rev() {
            up.push(Conv2d::new(&mut store, &format!("up{l}"), w(l + 1) + w(l), w(l), 3, 1)?);
        }
        let out = Conv2d::new(&mut store, "out", w(0), 3, 3, 1)?;
        Ok(Self {
            store,
            stem,
            down,
            up,
            out,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Raw prediction in `[-1, 1]` before re-blending.
    pub fn predict(&self, image: &Tensor, hole: &Tensor, sem: &Tensor) -> Result<Tensor> {
        let x = Tensor::cat(&[image, hole, sem], 1)?;
        let mut skips = vec![leaky_relu(&self.stem.forward(&x)?, 0.2)?];
        for d in &self.down {
            let h = leaky_relu(&d.forward(skips.last().expect("stem present"))?, 0.2)?;
            skips.push(h);
        }
        let mut h = skips.pop().expect("stem present");
        for u in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = leaky_relu(&u.forward(&Tensor::cat(&[&upsample2x(&h)?, &skip], 1)?)?, 0.2)?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }

    /// Completed crop: input on known pixels, prediction inside the hole.
    pub fn forward(&self, image: &Tensor, hole: &Tensor, sem: &Tensor) -> Result<Tensor> {
        let pred = self.predict(image, hole, sem)?;
        crate::background::reblend(image, &pred, hole)
    }
}

impl Network for ObjectInpainter {
    fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// Strided conv stack, global average, linear head to a 128-d code.
pub struct StyleEncoder {
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl StyleEncoder {
    pub fn new(mut store: ParamStore, config: &ObjectGenConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c = 3;
        for l in 0..4 {
            let out = config.encoder_width << l.min(2);
            convs.push(Conv2d::new(&mut store, &format!("conv{l}"), c, out, 3, 2)?);
            c = out;
        }
        let head = Linear::new(&mut store, "head", c, STYLE_DIM)?;
        Ok(Self { store, convs, head })
    }

    /// `[B, 3, S, S] -> [B, 128]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(dim_err!("style encoder expects 3 channels, got {c}"));
        }
        let mut h = x.clone();
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        self.head.forward(&global_avg(&h)?)
    }

    pub fn encode(&self, crop: &RgbImage, class_id: usize) -> Result<StyleCode> {
        let x = crop.to_tensor(self.store.dtype(), self.store.device())?.unsqueeze(0)?;
        let v = self.forward(&x)?.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        StyleCode::new(class_id, v)
    }
}

impl Network for StyleEncoder {
    fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// Decoder from a learned constant block, modulated by class and style at
/// every upsampling stage.
pub struct ObjectGenerator {
    store: ParamStore,
    constant: Tensor,
    blocks: Vec<Ssnm>,
    out: Conv2d,
    num_classes: usize,
}

impl ObjectGenerator {
    pub fn new(mut store: ParamStore, config: &ObjectGenConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let start = config.crop_size >> config.ssnm_blocks;
        let width = |i: usize| (config.gen_width >> i).max(16);
        let constant = store.uniform("constant", &[1, width(0), start, start], 1.0)?;
        let mut blocks = Vec::new();
        for i in 0..config.ssnm_blocks {
            blocks.push(Ssnm::new(&mut store, &format!("ssnm{i}"), width(i), width(i + 1), num_classes, config.head_hidden)?);
        }
        let out = Conv2d::new(&mut store, "out", width(config.ssnm_blocks), 3, 3, 1)?;
        Ok(Self {
            store,
            constant,
            blocks,
            out,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `sem: [B, K, S, S]`, `codes: [B, 128]` -> `[B, 3, S, S]` in `[-1, 1]`.
    pub fn forward(&self, sem: &Tensor, codes: &Tensor) -> Result<Tensor> {
        let (b, k, s, _) = sem.dims4()?;
        if k != self.num_classes {
            return Err(dim_err!("semantic map has {k} channels, expected {}", self.num_classes));
        }
        let mut h = self.constant.repeat((b, 1, 1, 1))?;
        for block in &self.blocks {
            h = upsample2x(&h)?;
            let factor = s / h.dim(2)?;
            let sem_r = downsample_one_hot(sem, factor)?;
            let object = sem_r.sum_keepdim(1)?;
            let style = make_style_map(codes, &object)?;
            h = block.forward(&h, &sem_r, &style)?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }

    /// Checks that the style's class is the one active in the semantic map.
    pub fn generate(&self, sem: &Tensor, active_class_index: usize, style: &StyleCode, style_class_index: usize) -> Result<Tensor> {
        if active_class_index != style_class_index {
            return Err(invalid!(
                "style of class {} used for a mask of another class",
                style.class_id
            ));
        }
        let codes = style.to_tensor(sem.dtype(), sem.device())?;
        self.forward(sem, &codes)
    }
}

impl Network for ObjectGenerator {
    fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// Network-space tensors for an object batch. `image` is the isolated ground
/// truth crop, `style` the isolated style crop.
#[derive(Debug, Clone)]
pub struct ObjectBatch {
    pub image: Tensor,
    pub instance: Tensor,
    pub hole: Tensor,
    pub sem: Tensor,
    pub style: Tensor,
}

/// One crop with everything the object stages need.
#[derive(Debug, Clone)]
pub struct ObjectSample {
    pub image: RgbImage,
    pub instance: BinaryGrid,
    pub hole: BinaryGrid,
    pub class_index: usize,
    /// Isolated crop of another instance of the same class.
    pub style: Option<RgbImage>,
}

impl ObjectBatch {
    pub fn from_samples(samples: &[ObjectSample], num_classes: usize, dtype: DType, device: &Device) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid!("empty object batch"));
        }
        let (mut image, mut instance, mut hole, mut sem, mut style) = (vec![], vec![], vec![], vec![], vec![]);
        for s in samples {
            let iso = isolate(&s.image, &s.instance)?;
            let sty = match &s.style {
                Some(st) => st.clone(),
                None => {
                    tracing::warn!("no same-class style crop; falling back to ground truth");
                    iso.clone()
                }
            };
            image.push(iso.to_tensor(dtype, device)?.unsqueeze(0)?);
            style.push(sty.to_tensor(dtype, device)?.unsqueeze(0)?);
            instance.push(s.instance.to_tensor(dtype, device)?.unsqueeze(0)?);
            hole.push(s.hole.to_tensor(dtype, device)?.unsqueeze(0)?);
            sem.push(semantic_map(&s.instance, s.class_index, num_classes, dtype, device)?);
        }
        Ok(Self {
            image: Tensor::cat(&image, 0)?,
            instance: Tensor::cat(&instance, 0)?,
            hole: Tensor::cat(&hole, 0)?,
            sem: Tensor::cat(&sem, 0)?,
            style: Tensor::cat(&style, 0)?,
        })
    }
}

/// Keeps the instance, sets the rest to the isolation value `-1`.
pub fn mask_output(x: &Tensor, instance: &Tensor) -> Result<Tensor> {
    let background = instance.affine(1.0, -1.0)?;
    Ok((x.broadcast_mul(instance)? + background.broadcast_as(x.shape())?)?)
}

/// Mean absolute error over `region` pixels, `[0, 1]` units.
pub fn masked_l1(a: &Tensor, b: &Tensor, region: &Tensor) -> Result<f64> {
    let n = scalar(&region.sum_all()?)? * a.dim(1)? as f64;
    if n == 0.0 {
        return Ok(0.0);
    }
    let s = scalar(&(a - b)?.abs()?.broadcast_mul(region)?.sum_all()?)?;
    Ok(s / n / 2.0)
}

pub struct InpaintTrainer {
    pub inpainter: ObjectInpainter,
    pub critic: PatchCritic,
    opt_g: Adam,
    opt_d: Adam,
    pub weights: LossWeights,
    pyramid: FeaturePyramid,
    pub adversarial: bool,
}

impl InpaintTrainer {
    pub fn new(
        inpainter: ObjectInpainter,
        critic: PatchCritic,
        optim: &OptimConfig,
        weights: LossWeights,
        pyramid: FeaturePyramid,
    ) -> Result<Self> {
        weights.validate()?;
        optim.validate()?;
        Ok(Self {
            opt_g: optim.generator(inpainter.store().vars())?,
            opt_d: optim.critic(critic.store().vars())?,
            inpainter,
            critic,
            weights,
            pyramid,
            adversarial: true,
        })
    }

    pub fn step(&mut self, batch: &ObjectBatch) -> Result<LossReport> {
        let stage = Stage::ObjectInpaint;
        let erased = reblend_zero(&batch.image, &batch.hole)?;
        let pred = self.inpainter.predict(&erased, &batch.hole, &batch.sem)?;
        let completed = crate::background::reblend(&batch.image, &pred, &batch.hole)?;
        let cond = |x: &Tensor| -> Result<Tensor> { Ok(Tensor::cat(&[x, &batch.sem], 1)?) };
        let mut critic = BTreeMap::new();
        if self.adversarial {
            let real = self.critic.forward(&cond(&batch.image)?, true)?;
            let fake = self.critic.forward(&cond(&completed.detach())?, true)?;
            let loss = hinge_d_loss(&real, &fake)?;
            critic.insert("d_object".to_string(), scalar(&loss)?);
            self.opt_d.step(&loss)?;
        }
        let mut parts = BTreeMap::new();
        // Reconstruction on the completed crop: the isolated surround is a
        // constant -1 and would otherwise pull the raw prediction into
        // tanh saturation.
        parts.insert(Term::L1, l1_loss(&completed, &batch.image)?);
        parts.insert(Term::Perceptual, perceptual_loss(&completed, &batch.image, &self.pyramid)?);
        let gan = if self.adversarial {
            hinge_g_loss(&self.critic.forward(&cond(&completed)?, false)?)?
        } else {
            Tensor::zeros((), completed.dtype(), completed.device())?
        };
        parts.insert(Term::Gan, gan);
        let total = compose_objective(stage, &parts, &self.weights)?;
        let report = finish_report(stage, &parts, &total, critic)?;
        self.opt_g.step(&total)?;
        Ok(report)
    }
}

/// Hole pixels set to the erased value `-1` (black in image space).
pub fn reblend_zero(image: &Tensor, hole: &Tensor) -> Result<Tensor> {
    let black = Tensor::full(-1f32, image.shape(), image.device())?.to_dtype(image.dtype())?;
    crate::background::reblend(image, &black, hole)
}

pub struct ObjectGenTrainer {
    pub generator: ObjectGenerator,
    pub encoder: StyleEncoder,
    /// Cycle encoder; held fixed during training.
    pub cycle_encoder: StyleEncoder,
    pub critic: PatchCritic,
    opt_g: Adam,
    opt_d: Adam,
    pub weights: LossWeights,
    pyramid: FeaturePyramid,
    pub adversarial: bool,
}

impl ObjectGenTrainer {
    pub fn new(
        generator: ObjectGenerator,
        encoder: StyleEncoder,
        cycle_encoder: StyleEncoder,
        critic: PatchCritic,
        optim: &OptimConfig,
        weights: LossWeights,
        pyramid: FeaturePyramid,
    ) -> Result<Self> {
        weights.validate()?;
        optim.validate()?;
        let mut vars = generator.store().vars();
        vars.extend(encoder.store().vars());
        Ok(Self {
            opt_g: optim.generator(vars)?,
            opt_d: optim.critic(critic.store().vars())?,
            generator,
            encoder,
            cycle_encoder,
            critic,
            weights,
            pyramid,
            adversarial: true,
        })
    }

    pub fn step(&mut self, batch: &ObjectBatch) -> Result<LossReport> {
        let stage = Stage::ObjectGen;
        let r_gt = mask_output(&self.generator.forward(&batch.sem, &self.encoder.forward(&batch.image)?)?, &batch.instance)?;
        let r_s = mask_output(&self.generator.forward(&batch.sem, &self.encoder.forward(&batch.style)?)?, &batch.instance)?;
        let cond = |x: &Tensor| -> Result<Tensor> { Ok(Tensor::cat(&[x, &batch.sem], 1)?) };
        let mut critic = BTreeMap::new();
        if self.adversarial {
            let real = self.critic.forward(&cond(&batch.image)?, true)?;
            let fake = Tensor::cat(&[r_gt.detach(), r_s.detach()], 0)?;
            let sem2 = Tensor::cat(&[&batch.sem, &batch.sem], 0)?;
            let fake = self.critic.forward(&Tensor::cat(&[&fake, &sem2], 1)?, true)?;
            let loss = hinge_d_loss(&real, &fake)?;
            critic.insert("d_object".to_string(), scalar(&loss)?);
            self.opt_d.step(&loss)?;
        }
        let zero = Tensor::zeros((), r_gt.dtype(), r_gt.device())?;
        let gan = |x: &Tensor| -> Result<Tensor> {
            if self.adversarial {
                hinge_g_loss(&self.critic.forward(&cond(x)?, false)?)
            } else {
                Ok(zero.clone())
            }
        };
        let code_gt = self.cycle_encoder.forward(&batch.image)?.detach();
        let code_s = self.cycle_encoder.forward(&batch.style)?.detach();
        let mut parts = BTreeMap::new();
        parts.insert(Term::L1, l1_loss(&r_gt, &batch.image)?);
        parts.insert(Term::Perceptual, perceptual_loss(&r_gt, &batch.image, &self.pyramid)?);
        parts.insert(Term::Gan, gan(&r_gt)?);
        parts.insert(Term::Scc, scc_loss(&self.cycle_encoder.forward(&r_gt)?, &code_gt)?);
        parts.insert(Term::PerceptualStyled, perceptual_loss(&r_s, &batch.style, &self.pyramid)?);
        parts.insert(Term::GanStyled, gan(&r_s)?);
        parts.insert(Term::SccStyled, scc_loss(&self.cycle_encoder.forward(&r_s)?, &code_s)?);
        let total = compose_objective(stage, &parts, &self.weights)?;
        let report = finish_report(stage, &parts, &total, critic)?;
        self.opt_g.step(&total)?;
        Ok(report)
    }
}

const BANK_MAGIC: &[u8; 4] = b"SBNK";
const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BankProvenance {
    pub dataset_id: String,
    pub encoder_hash: String,
}

/// Style codes grouped by class label, plus optional PNG thumbnails of the
/// crops they were encoded from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StyleBank {
    pub entries: BTreeMap<usize, Vec<StyleCode>>,
    pub thumbnails: BTreeMap<usize, Vec<Vec<u8>>>,
    pub provenance: BankProvenance,
}

#[derive(Serialize, Deserialize)]
struct BankSidecar {
    version: u32,
    provenance: BankProvenance,
    classes: Vec<SidecarClass>,
}

#[derive(Serialize, Deserialize)]
struct SidecarClass {
    class_id: usize,
    count: usize,
}

impl StyleBank {
    pub fn push(&mut self, code: StyleCode, thumbnail: Option<Vec<u8>>) {
        let class = code.class_id;
        self.entries.entry(class).or_default().push(code);
        if let Some(png) = thumbnail {
            self.thumbnails.entry(class).or_default().push(png);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_entries(&self, class_id: usize) -> &[StyleCode] {
        self.entries.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, class_id: usize, index: usize) -> Result<&StyleCode> {
        let list = self.class_entries(class_id);
        if list.is_empty() {
            return Err(Error::NoStyles(class_id));
        }
        list.get(index)
            .ok_or_else(|| invalid!("style index {index} out of range for class {class_id} ({} entries)", list.len()))
    }

    pub fn thumbnail(&self, class_id: usize, index: usize) -> Option<&[u8]> {
        self.thumbnails.get(&class_id)?.get(index).map(Vec::as_slice)
    }

    /// Uniform draw among the class entries; returns `(index, code)`.
    pub fn sample(&self, class_id: usize, rng: &mut impl Rng) -> Result<(usize, &StyleCode)> {
        let list = self.class_entries(class_id);
        if list.is_empty() {
            return Err(Error::NoStyles(class_id));
        }
        let i = rng.gen_range(0..list.len());
        Ok((i, &list[i]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (class, list) in &self.entries {
            out.extend_from_slice(&(*class as u32).to_le_bytes());
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for code in list {
                for v in &code.vector {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(invalid!("not a style bank (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != BANK_VERSION {
            return Err(invalid!("unsupported style bank version {version}"));
        }
        let mut bank = StyleBank::default();
        for _ in 0..read_u32(&mut r)? {
            let class = read_u32(&mut r)? as usize;
            let count = read_u32(&mut r)? as usize;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let mut buf = vec![0u8; STYLE_DIM * 4];
                read_exact(&mut r, &mut buf)?;
                let v = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                list.push(StyleCode::new(class, v)?);
            }
            bank.entries.insert(class, list);
        }
        if !r.is_empty() {
            return Err(invalid!("{} trailing bytes in style bank", r.len()));
        }
        Ok(bank)
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    fn thumbnail_dir(path: &Path) -> PathBuf {
        path.with_extension("thumbs")
    }

    /// Writes the binary bank, its JSON sidecar and the thumbnail directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let sidecar = BankSidecar {
            version: BANK_VERSION,
            provenance: self.provenance.clone(),
            classes: self
                .entries
                .iter()
                .map(|(&class_id, l)| SidecarClass { class_id, count: l.len() })
                .collect(),
        };
        let side = Self::sidecar_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
        let dir = Self::thumbnail_dir(path);
        if !self.thumbnails.is_empty() {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (class, list) in &self.thumbnails {
                for (i, png) in list.iter().enumerate() {
                    let p = dir.join(format!("{class}_{i}.png"));
                    std::fs::write(&p, png).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut bank = Self::from_bytes(&bytes)?;
        let side = Self::sidecar_path(path);
        if let Ok(text) = std::fs::read(&side) {
            let sidecar: BankSidecar = serde_json::from_slice(&text)?;
            bank.provenance = sidecar.provenance;
        }
        let dir = Self::thumbnail_dir(path);
        for (class, list) in &bank.entries {
            let mut thumbs = Vec::new();
            for i in 0..list.len() {
                match std::fs::read(dir.join(format!("{class}_{i}.png"))) {
                    Ok(png) => thumbs.push(png),
                    Err(_) => break,
                }
            }
            if thumbs.len() == list.len() {
                bank.thumbnails.insert(*class, thumbs);
            }
        }
        Ok(bank)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| invalid!("truncated style bank"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Encodes every `(class_id, isolated crop)` and stores the crop as the
/// entry's thumbnail.
pub fn build_style_bank<'a>(
    encoder: &StyleEncoder,
    crops: impl IntoIterator<Item = (usize, &'a RgbImage)>,
    provenance: BankProvenance,
) -> Result<StyleBank> {
    let mut bank = StyleBank {
        provenance,
        ..Default::default()
    };
    for (class, crop) in crops {
        bank.push(encoder.encode(crop, class)?, Some(crop.encode_png()?));
    }
    Ok(bank)
}

pub fn sample_style(bank: &StyleBank, class_id: usize, rng: &mut impl Rng) -> Result<StyleCode> {
    Ok(bank.sample(class_id, rng)?.1.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ObjectGenConfig {
        ObjectGenConfig {
            crop_size: 16,
            ssnm_blocks: 2,
            inpaint_width: 4,
            inpaint_down: 2,
            gen_width: 16,
            encoder_width: 4,
            head_hidden: 4,
        }
    }

    fn code(class: usize, seed: u64) -> StyleCode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StyleCode::new(class, (0..STYLE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn style_code_rejects_bad_vectors() {
        assert!(StyleCode::new(0, vec![0.0; 127]).is_err());
        let mut v = vec![0.0; 128];
        v[3] = f32::NAN;
        assert!(StyleCode::new(0, v).is_err());
    }

    #[test]
    fn bank_round_trip_is_bitwise() {
        let mut bank = StyleBank::default();
        for i in 0..5 {
            bank.push(code(3, i), Some(vec![i as u8; 3]));
        }
        bank.push(code(4, 99), Some(vec![7]));
        bank.provenance.dataset_id = "toy".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.sbnk");
        bank.save(&path).unwrap();
        let back = StyleBank::load(&path).unwrap();
        assert_eq!(back, bank);
        let bytes = bank.to_bytes();
        assert_eq!(&bytes[..4], b"SBNK");
        assert_eq!(bytes.len(), 12 + 2 * 8 + 6 * 128 * 4);
        assert!(StyleBank::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn sampling_is_class_pure_and_reproducible() {
        let mut bank = StyleBank::default();
        bank.push(code(3, 0), None);
        for i in 0..4 {
            bank.push(code(4, i + 1), None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            assert_eq!(sample_style(&bank, 3, &mut rng).unwrap(), code(3, 0));
            assert_eq!(sample_style(&bank, 4, &mut rng).unwrap().class_id, 4);
        }
        assert!(matches!(sample_style(&bank, 2, &mut rng), Err(Error::NoStyles(2))));
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| bank.sample(4, &mut r).unwrap().0).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn sampling_frequencies_are_uniform() {
        let mut bank = StyleBank::default();
        for i in 0..10 {
            bank.push(code(1, i), None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hist = [0usize; 10];
        for _ in 0..10_000 {
            hist[bank.sample(1, &mut rng).unwrap().0] += 1;
        }
        for h in hist {
            assert!((h as f64 / 10_000.0 - 0.1).abs() <= 0.01, "{hist:?}");
        }
    }

    #[test]
    fn inpainter_keeps_known_pixels() {
        let cfg = small_config();
        let net = ObjectInpainter::new(ParamStore::new(1, DType::F64), &cfg, 2).unwrap();
        let dev = Device::Cpu;
        let img = Tensor::rand(-1f64, 1f64, (1, 3, 16, 16), &dev).unwrap();
        let mut inst = BinaryGrid::new(16, 16);
        for y in 4..12 {
            for x in 4..12 {
                inst.set(y, x, 1);
            }
        }
        let sem = semantic_map(&inst, 1, 2, DType::F64, &dev).unwrap();
        let hole = Tensor::zeros((1, 1, 16, 16), DType::F64, &dev).unwrap();
        let out = net.forward(&img, &hole, &sem).unwrap();
        let diff = (out - &img).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn generator_is_deterministic_and_bounded() {
        let cfg = small_config();
        let net = ObjectGenerator::new(ParamStore::new(2, DType::F64), &cfg, 2).unwrap();
        let dev = Device::Cpu;
        let inst = BinaryGrid::filled(16, 16, 1);
        let sem = semantic_map(&inst, 0, 2, DType::F64, &dev).unwrap();
        let c = code(3, 1);
        let a = net.generate(&sem, 0, &c, 0).unwrap();
        let b = net.generate(&sem, 0, &c, 0).unwrap();
        assert_eq!(a.dims(), &[1, 3, 16, 16]);
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f64>().unwrap(), b.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert!(a.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap() <= 1.0);
        assert!(net.generate(&sem, 0, &c, 1).is_err());
    }

    #[test]
    fn encoder_output_contract() {
        let cfg = small_config();
        let enc = StyleEncoder::new(ParamStore::new(3, DType::F64), &cfg).unwrap();
        let img = RgbImage::from_data(16, 16, (0..16 * 16 * 3).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let a = enc.encode(&img, 3).unwrap();
        assert_eq!(a.vector.len(), STYLE_DIM);
        assert_eq!(a, enc.encode(&img, 3).unwrap());
    }
}
