use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::background::{reblend, BackgroundGenerator, BackgroundInput};
use crate::error::{dim_err, invalid, Result};
use crate::fusion::FusionNet;
use crate::object::{isolate, semantic_map, ObjectGenerator, ObjectInpainter, StyleCode};
use crate::raster::{BinaryGrid, Grid, RgbImage};
use crate::scene::{
    compose, disassemble, erase_input, BBox, DisassemblyConfig, EditMask, ObjectMode, SceneDecomposition, SceneObject,
    SegmentationMap,
};

use super::config::PipelineConfig;
use super::dataset::ClassInfo;
use super::models::EditModels;

/// Caller-selected style for one generated instance.
#[derive(Debug, Clone, PartialEq)]
pub enum StyleChoice {
    /// Entry index within the instance's class in the style bank.
    Index(usize),
    Code(StyleCode),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub instance_index: usize,
    pub class_id: usize,
    pub class_name: String,
    pub mode: ObjectMode,
    pub bbox: BBox,
    pub used_style_index: Option<usize>,
}

pub struct EditOutput {
    pub image: RgbImage,
    pub instances: Vec<InstanceReport>,
    pub decomposition: Option<SceneDecomposition>,
}

/// Generators used to build a composite.
pub struct SceneNets<'a> {
    pub config: &'a PipelineConfig,
    pub classes: &'a ClassInfo,
    pub background: &'a BackgroundGenerator,
    pub inpainter: &'a ObjectInpainter,
    pub generator: &'a ObjectGenerator,
}

pub struct Composite {
    pub image: RgbImage,
    pub decomposition: SceneDecomposition,
    pub instances: Vec<InstanceReport>,
}

/// Style for a generated instance: `(bank index if any, code)`.
pub type StylePicker<'a> = dyn FnMut(usize, &SceneObject) -> Result<(Option<usize>, StyleCode)> + 'a;

/// Erase, disassemble, regenerate the background, synthesize every touched
/// object and paste them back. No fusion, no final re-blend.
pub fn build_composite(
    nets: &SceneNets,
    image: &RgbImage,
    seg: &SegmentationMap,
    instances: Option<&Grid<u16>>,
    mask: &EditMask,
    pick_style: &mut StylePicker,
) -> Result<Composite> {
    let dtype = nets.config.dtype();
    let device = nets.background.store_device();
    let erased = erase_input(image, mask)?;
    let dis_config = DisassemblyConfig {
        visibility_threshold: nets.config.visibility_threshold,
        crop_size: nets.config.crop_size,
    };
    let decomposition = disassemble(&erased, seg, mask, instances, &dis_config)?;

    let input = BackgroundInput::from_scene(&decomposition, seg, mask, dtype, &device)?;
    let generated = nets.background.forward(&input)?;
    let region = grid_and(&decomposition.background_mask, &mask.0);
    let region = region.to_tensor(dtype, &device)?.unsqueeze(0)?;
    let background = RgbImage::from_tensor(&reblend(&input.image, &generated, &region)?)?;

    let k = nets.classes.foreground_ids().len().max(1);
    let mut crops = Vec::with_capacity(decomposition.objects.len());
    let mut reports = Vec::with_capacity(decomposition.objects.len());
    for (index, obj) in decomposition.objects.iter().enumerate() {
        let class_id = obj.record.class_id;
        let class_index = seg
            .foreground_index(class_id)
            .ok_or_else(|| invalid!("instance of non-object class {class_id}"))?;
        let sem = semantic_map(&obj.crop_mask, class_index, k, dtype, &device)?;
        let (out, used_style_index) = match obj.record.mode {
            ObjectMode::Inpaint => {
                let iso = isolate(&obj.crop_image, &obj.crop_mask)?.to_tensor(dtype, &device)?.unsqueeze(0)?;
                let hole = obj.crop_hole.to_tensor(dtype, &device)?.unsqueeze(0)?;
                (nets.inpainter.forward(&iso, &hole, &sem)?, None)
            }
            ObjectMode::Generate => {
                let (used, code) = pick_style(index, obj)?;
                let style_index = seg
                    .foreground_index(code.class_id)
                    .ok_or_else(|| invalid!("style code of non-object class {}", code.class_id))?;
                (nets.generator.generate(&sem, class_index, &code, style_index)?, used)
            }
        };
        crops.push(RgbImage::from_tensor(&out)?);
        reports.push(InstanceReport {
            instance_index: index,
            class_id,
            class_name: nets.classes.name_of(class_id).to_string(),
            mode: obj.record.mode,
            bbox: obj.record.bbox,
            used_style_index,
        });
    }
    let pasted: Vec<_> = crops
        .into_iter()
        .zip(&decomposition.objects)
        .map(|(c, o)| (c, &o.record, o.placement))
        .collect();
    let composite = compose(&background, &pasted)?;
    Ok(Composite {
        image: composite,
        decomposition,
        instances: reports,
    })
}

fn grid_and(a: &BinaryGrid, b: &BinaryGrid) -> BinaryGrid {
    BinaryGrid {
        height: a.height,
        width: a.width,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x & y).collect(),
    }
}

/// Runs the fusion network and restores every unedited pixel from `image`.
pub fn fuse(
    fusion: &FusionNet,
    composite: &RgbImage,
    image: &RgbImage,
    seg: &SegmentationMap,
    mask: &EditMask,
    config: &PipelineConfig,
) -> Result<RgbImage> {
    let dtype = config.dtype();
    let device = candle_core::Device::Cpu;
    let comp = composite.to_tensor(dtype, &device)?.unsqueeze(0)?;
    let one_hot = seg.one_hot(dtype, &device)?.unsqueeze(0)?;
    let m = mask.0.to_tensor(dtype, &device)?.unsqueeze(0)?;
    let fused = RgbImage::from_tensor(&fusion.forward(&comp, &one_hot, &m)?)?;
    Ok(restore_known(&fused, image, mask))
}

/// `image` on mask = 0 pixels, `generated` elsewhere.
pub fn restore_known(generated: &RgbImage, image: &RgbImage, mask: &EditMask) -> RgbImage {
    let mut out = image.clone();
    for (i, &m) in mask.0.data.iter().enumerate() {
        if m != 0 {
            out.data[i * 3..i * 3 + 3].copy_from_slice(&generated.data[i * 3..i * 3 + 3]);
        }
    }
    out
}

/// Full edit: background, objects, fusion, then a hard re-blend so unedited
/// pixels equal the input. Unchosen styles are drawn from the bank with an
/// RNG seeded by `seed`.
pub fn edit(
    models: &EditModels,
    image: &RgbImage,
    seg: &SegmentationMap,
    instances: Option<&Grid<u16>>,
    mask: &EditMask,
    styles: &BTreeMap<usize, StyleChoice>,
    seed: u64,
) -> Result<EditOutput> {
    if image.dims() != seg.dims() || image.dims() != mask.dims() {
        return Err(dim_err!(
            "image {:?}, seg {:?} and mask {:?} differ",
            image.dims(),
            seg.dims(),
            mask.dims()
        ));
    }
    if seg.num_classes != models.classes.num_classes() {
        return Err(invalid!(
            "segmentation has {} classes, models expect {}",
            seg.num_classes,
            models.classes.num_classes()
        ));
    }
    if mask.is_empty() {
        return Ok(EditOutput {
            image: image.clone(),
            instances: Vec::new(),
            decomposition: None,
        });
    }
    let nets = SceneNets {
        config: &models.config,
        classes: &models.classes,
        background: &models.background,
        inpainter: &models.inpainter,
        generator: &models.generator,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = &models.bank;
    let mut pick = |index: usize, obj: &SceneObject| -> Result<(Option<usize>, StyleCode)> {
        let class = obj.record.class_id;
        match styles.get(&index) {
            Some(StyleChoice::Index(i)) => Ok((Some(*i), bank.get(class, *i)?.clone())),
            Some(StyleChoice::Code(code)) => Ok((None, code.clone())),
            None => {
                let (i, code) = bank.sample(class, &mut rng)?;
                Ok((Some(i), code.clone()))
            }
        }
    };
    let composite = build_composite(&nets, image, seg, instances, mask, &mut pick)?;
    let final_image = fuse(&models.fusion, &composite.image, image, seg, mask, &models.config)?;
    Ok(EditOutput {
        image: final_image,
        instances: composite.instances,
        decomposition: Some(composite.decomposition),
    })
}

/// Per-instance bank picks from per-class picks: every instance of a listed
/// class gets that class's bank index. Instance indices follow the
/// disassembly order used by [`edit`].
pub fn styles_by_class(
    config: &PipelineConfig,
    image: &RgbImage,
    seg: &SegmentationMap,
    instances: Option<&Grid<u16>>,
    mask: &EditMask,
    by_class: &BTreeMap<usize, usize>,
) -> Result<BTreeMap<usize, StyleChoice>> {
    if by_class.is_empty() || mask.is_empty() {
        return Ok(BTreeMap::new());
    }
    let dis_config = DisassemblyConfig {
        visibility_threshold: config.visibility_threshold,
        crop_size: config.crop_size,
    };
    let decomposition = disassemble(&erase_input(image, mask)?, seg, mask, instances, &dis_config)?;
    Ok(decomposition
        .objects
        .iter()
        .enumerate()
        .filter_map(|(i, o)| by_class.get(&o.record.class_id).map(|&s| (i, StyleChoice::Index(s))))
        .collect())
}
