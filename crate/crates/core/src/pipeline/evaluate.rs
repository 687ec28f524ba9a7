use std::collections::BTreeMap;

use candle_core::{Device, Tensor};

use crate::error::{invalid, Error, Result};
use crate::metrics::{diversity_score, paired_distance, proxy_frechet, EvalReport};
use crate::nn::Network;
use crate::object::{build_style_bank, BankProvenance, StyleBank};
use crate::objectives::FeaturePyramid;
use crate::raster::BinaryGrid;
use crate::scene::{foreground_instances, tight_bbox, EditMask};

use super::checkpoint::{CheckpointSet, NetTag};
use super::config::PipelineConfig;
use super::dataset::{Dataset, Sample};
use super::edit::edit;
use super::models::{Builder, EditModels};
use super::stages::{eval_masks, image_l1, object_crops};

/// Seed of the feature pyramid shared by every metric.
pub const METRIC_PYRAMID_SEED: u64 = 0;

const BANK_FILE: &str = "bank.sbnk";

/// Encodes every training instance with the trained style encoder and
/// persists the bank next to the checkpoints.
pub fn build_bank(config: &PipelineConfig) -> Result<StyleBank> {
    config.validate()?;
    let dataset = Dataset::load(&config.dataset_dir)?;
    dataset.check_size(config.scene_size)?;
    let set = CheckpointSet::new(&config.checkpoint_dir, config.config_hash());
    let b = Builder {
        config,
        classes: &dataset.classes,
    };
    let encoder = b.style_encoder(NetTag::StyleEncoder)?;
    set.load(NetTag::StyleEncoder, encoder.store())?;
    let crops = object_crops(&dataset, config.crop_size)?;
    let provenance = BankProvenance {
        dataset_id: dataset.id.clone(),
        encoder_hash: encoder.store().checksum()?,
    };
    let bank = build_style_bank(&encoder, crops.iter().map(|c| (c.class_id, &c.image)), provenance)?;
    bank.save(&set.dir.join(BANK_FILE))?;
    set.set_bank(BANK_FILE)?;
    Ok(bank)
}

/// Edit mask covering the bounding box of the `index`-th object instance,
/// grown by one pixel, so the instance is fully hidden.
pub fn instance_cover_mask(sample: &Sample, index: usize) -> Result<Option<EditMask>> {
    let instances = foreground_instances(&sample.seg, sample.instances.as_ref())?;
    let Some((_, _, inst)) = instances.get(index) else {
        return Ok(None);
    };
    let bb = tight_bbox(inst).ok_or_else(|| invalid!("empty instance"))?;
    let (h, w) = inst.dims();
    let mut m = BinaryGrid::new(h, w);
    for y in bb.top.saturating_sub(1)..(bb.top + bb.height + 1).min(h) {
        for x in bb.left.saturating_sub(1)..(bb.left + bb.width + 1).min(w) {
            m.set(y, x, 1);
        }
    }
    Ok(Some(EditMask(m)))
}

/// Edits every held-in sample with its evaluation mask and reports full-frame
/// L1, paired perceptual distance, proxy Fréchet distance and diversity.
pub fn evaluate(config: &PipelineConfig) -> Result<EvalReport> {
    let models = EditModels::load(config)?;
    let dataset = Dataset::load(&config.dataset_dir)?;
    dataset.check_size(config.scene_size)?;
    let pyramid = FeaturePyramid::new(METRIC_PYRAMID_SEED, config.dtype())?;
    let dtype = config.dtype();
    let dev = Device::Cpu;
    let none = BTreeMap::new();

    let masks = eval_masks(&dataset, config);
    let mut l1 = 0.0;
    let (mut fakes, mut reals) = (vec![], vec![]);
    for (s, m) in dataset.samples.iter().zip(&masks) {
        let out = edit(&models, &s.image, &s.seg, s.instances.as_ref(), m, &none, config.seed)?;
        l1 += image_l1(&out.image, &s.image);
        fakes.push(out.image.to_tensor(dtype, &dev)?.unsqueeze(0)?);
        reals.push(s.image.to_tensor(dtype, &dev)?.unsqueeze(0)?);
    }
    let n = dataset.samples.len();
    let fake = Tensor::cat(&fakes, 0)?;
    let real = Tensor::cat(&reals, 0)?;

    let mut report = EvalReport {
        config_hash: config.config_hash(),
        ..Default::default()
    };
    report.insert("edit_l1", l1 / n as f64, n)?;
    report.insert("paired_distance", paired_distance(&fake, &real, &pyramid)?, n)?;
    if n >= 2 {
        report.insert("proxy_frechet", proxy_frechet(&real, &fake, &pyramid)?, n)?;
    }

    let mut hidden = Vec::new();
    for s in &dataset.samples {
        if let Some(m) = instance_cover_mask(s, 0)? {
            hidden.push((s, m));
        }
    }
    if !hidden.is_empty() {
        let div = diversity_score(&hidden, config.pairs_per_image, &pyramid, config.seed, |(s, m), draw| {
            let out = edit(&models, &s.image, &s.seg, s.instances.as_ref(), m, &none, draw)?;
            out.image.to_tensor(dtype, &dev)?.unsqueeze(0).map_err(Error::from)
        })?;
        report.insert("diversity", div, hidden.len())?;
    }

    let path = config
        .eval_output
        .clone()
        .unwrap_or_else(|| config.log_dir.join("eval.json"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
