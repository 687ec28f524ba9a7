use std::path::PathBuf;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::background::{sample_boundary_patches, BackgroundBatch, BackgroundInput, BackgroundTrainer};
use crate::error::{invalid, Error, Result};
use crate::fusion::{FusionBatch, FusionTrainer};
use crate::nn::{scalar, Network};
use crate::object::{
    isolate, mask_output, masked_l1, ObjectBatch, ObjectGenTrainer, ObjectSample, InpaintTrainer, StyleEncoder,
};
use crate::objectives::{recipe, Stage, Term};
use crate::raster::{BinaryGrid, RgbImage};
use crate::scene::{crop_object, disassemble, erase_input, foreground_instances, make_record, DisassemblyConfig, EditMask};
use crate::train::LossReport;

use super::checkpoint::{CheckpointSet, NetTag};
use super::config::PipelineConfig;
use super::dataset::{Dataset, Sample};
use super::edit::{build_composite, fuse, SceneNets};
use super::models::Builder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub stage: Stage,
    pub steps_run: usize,
    pub stopped_early: bool,
    /// Last held-in evaluation error, `[0, 1]` units.
    pub last_eval: Option<f64>,
    pub log_path: PathBuf,
}

/// Loads the configured dataset and runs the stage for its configured steps.
pub fn train_stage(stage: Stage, config: &PipelineConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = Dataset::load(&config.dataset_dir)?;
    train_stage_on(stage, config, &dataset, config.steps.get(stage), &mut |_, _| {})
}

/// One object instance cropped from a ground-truth scene.
#[derive(Debug, Clone)]
pub struct ObjectCrop {
    pub sample: usize,
    pub class_id: usize,
    pub class_index: usize,
    /// Isolated crop.
    pub image: RgbImage,
    pub instance: BinaryGrid,
}

/// Copy of the training configuration stored beside the checkpoints.
pub const CHECKPOINT_CONFIG: &str = "config.json";

/// Instances smaller than this are not used for object training.
const MIN_INSTANCE_AREA: usize = 4;

pub fn object_crops(dataset: &Dataset, crop_size: usize) -> Result<Vec<ObjectCrop>> {
    let mut out = Vec::new();
    for (si, s) in dataset.samples.iter().enumerate() {
        let (h, w) = s.image.dims();
        let nothing = EditMask::empty(h, w);
        for (class, id, mask) in foreground_instances(&s.seg, s.instances.as_ref())? {
            if mask.count() < MIN_INSTANCE_AREA {
                continue;
            }
            let record = make_record(class, id, mask, &nothing, 0.0)?;
            let (crop, inst, _) = crop_object(&s.image, &record, crop_size)?;
            out.push(ObjectCrop {
                sample: si,
                class_id: class,
                class_index: s.seg.foreground_index(class).expect("foreground instance"),
                image: isolate(&crop, &inst)?,
                instance: inst,
            });
        }
    }
    Ok(out)
}

/// Fixed held-in evaluation masks, one per sample.
pub fn eval_masks(dataset: &Dataset, config: &PipelineConfig) -> Vec<EditMask> {
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0000 ^ i as u64);
            let (h, w) = s.image.dims();
            nonempty_mask(config, h, w, &mut rng)
        })
        .collect()
}

fn nonempty_mask(config: &PipelineConfig, h: usize, w: usize, rng: &mut impl Rng) -> EditMask {
    loop {
        let m = config.mask_mix.sample(h, w, rng);
        if !m.is_empty() {
            return m;
        }
    }
}

/// Random hole inside the instance that leaves it partially visible, as the
/// inpainting route only sees objects with at least `visibility_threshold`
/// of their pixels outside the edit; falls back to its lower half.
fn instance_hole(config: &PipelineConfig, instance: &BinaryGrid, rng: &mut impl Rng) -> BinaryGrid {
    let (h, w) = instance.dims();
    let area = instance.count() as f64;
    for _ in 0..16 {
        let m = config.mask_mix.sample(h, w, rng);
        let hole = BinaryGrid {
            height: h,
            width: w,
            data: m.0.data.iter().zip(&instance.data).map(|(&a, &b)| a & b).collect(),
        };
        let visible = 1.0 - hole.count() as f64 / area;
        if !hole.is_empty() && visible >= config.visibility_threshold {
            return hole;
        }
    }
    let mut hole = instance.clone();
    for v in &mut hole.data[..(h / 2) * w] {
        *v = 0;
    }
    if hole.is_empty() {
        instance.clone()
    } else {
        hole
    }
}

trait StageRunner {
    fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<LossReport>;
    fn eval(&self) -> Result<f64>;
    fn save(&self, set: &CheckpointSet) -> Result<()>;
}

fn critic_columns(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Background => &["d_global", "d_patch"],
        Stage::ObjectInpaint | Stage::ObjectGen => &["d_object"],
        Stage::Fusion => &["d_fusion"],
    }
}

fn term_name(t: Term) -> String {
    serde_json::to_string(&t).expect("term serializes").trim_matches('"').to_string()
}

/// Runs `steps` updates of `stage`. Every validation happens before the first
/// step. `observer` sees each step's report.
pub fn train_stage_on(
    stage: Stage,
    config: &PipelineConfig,
    dataset: &Dataset,
    steps: usize,
    observer: &mut dyn FnMut(usize, &LossReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.check_size(config.scene_size)?;
    let set = CheckpointSet::new(&config.checkpoint_dir, config.config_hash());
    set.manifest()?;
    let mut runner = make_runner(stage, config, dataset, &set)?;

    std::fs::create_dir_all(&config.checkpoint_dir).map_err(|e| Error::io(&config.checkpoint_dir, e))?;
    let classes_path = config.checkpoint_dir.join("classes.json");
    std::fs::write(&classes_path, serde_json::to_vec_pretty(&dataset.classes)?).map_err(|e| Error::io(&classes_path, e))?;
    // Lets `edit` and `serve` run from the checkpoint directory alone.
    config.save(&config.checkpoint_dir.join(CHECKPOINT_CONFIG))?;
    std::fs::create_dir_all(&config.log_dir).map_err(|e| Error::io(&config.log_dir, e))?;
    let log_path = config.log_dir.join(format!("{}.csv", stage.to_string().to_ascii_lowercase()));
    let mut log = csv::Writer::from_path(&log_path)?;
    let terms: Vec<Term> = recipe(stage, &config.weights).into_iter().map(|(t, _)| t).collect();
    let mut header = vec!["step".to_string(), "total".to_string()];
    header.extend(terms.iter().map(|&t| term_name(t)));
    header.extend(critic_columns(stage).iter().map(|s| s.to_string()));
    header.push("eval_l1".into());
    log.write_record(&header)?;

    let target = config.stop.get(stage);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(stage as u64 * 7919));
    let mut last_eval = None;
    let mut stopped_early = false;
    let mut steps_run = 0;
    for step in 1..=steps {
        let report = runner.step(&mut rng)?;
        steps_run = step;
        observer(step, &report);
        let evaluate = config.eval_every > 0 && (step % config.eval_every == 0 || step == steps);
        let eval = if evaluate { Some(runner.eval()?) } else { None };
        let mut row = vec![step.to_string(), format!("{:.9e}", report.total)];
        row.extend(terms.iter().map(|t| format!("{:.9e}", report.parts.get(t).copied().unwrap_or(0.0))));
        row.extend(
            critic_columns(stage)
                .iter()
                .map(|c| report.critic.get(*c).map(|v| format!("{v:.9e}")).unwrap_or_default()),
        );
        row.push(eval.map(|v| format!("{v:.9e}")).unwrap_or_default());
        log.write_record(&row)?;
        if let Some(e) = eval {
            tracing::info!(%stage, step, eval_l1 = e, total = report.total, "evaluation");
            last_eval = Some(e);
            if target.is_some_and(|t| e < t) {
                stopped_early = step < steps;
                break;
            }
        }
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            runner.save(&set)?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    runner.save(&set)?;
    Ok(TrainOutcome {
        stage,
        steps_run,
        stopped_early,
        last_eval,
        log_path,
    })
}

fn make_runner<'a>(
    stage: Stage,
    config: &'a PipelineConfig,
    dataset: &'a Dataset,
    set: &CheckpointSet,
) -> Result<Box<dyn StageRunner + 'a>> {
    let b = Builder {
        config,
        classes: &dataset.classes,
    };
    let pyramid = b.pyramid()?;
    Ok(match stage {
        Stage::Background => {
            let mut trainer = BackgroundTrainer::new(
                b.background()?,
                b.global_critic()?,
                b.boundary_critic()?,
                &config.optim,
                config.weights,
                pyramid,
                config.critic_side(),
            )?;
            trainer.adversarial = config.adversarial;
            Box::new(BackgroundRunner {
                trainer,
                config,
                dataset,
                eval_masks: eval_masks(dataset, config),
            })
        }
        Stage::ObjectInpaint | Stage::ObjectGen => {
            let crops = object_crops(dataset, config.crop_size)?;
            if crops.is_empty() {
                return Err(invalid!("dataset has no object instances for {stage}"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0B1E_C7);
            let eval_holes = crops.iter().map(|c| instance_hole(config, &c.instance, &mut rng)).collect();
            if stage == Stage::ObjectInpaint {
                let mut trainer = InpaintTrainer::new(
                    b.inpainter()?,
                    b.object_critic(NetTag::InpaintCritic)?,
                    &config.optim,
                    config.weights,
                    pyramid,
                )?;
                trainer.adversarial = config.adversarial;
                Box::new(InpaintRunner {
                    trainer,
                    config,
                    crops,
                    eval_holes,
                })
            } else {
                let mut trainer = ObjectGenTrainer::new(
                    b.object_generator()?,
                    b.style_encoder(NetTag::StyleEncoder)?,
                    b.style_encoder(NetTag::CycleEncoder)?,
                    b.object_critic(NetTag::ObjectCritic)?,
                    &config.optim,
                    config.weights,
                    pyramid,
                )?;
                trainer.adversarial = config.adversarial;
                Box::new(ObjectGenRunner { trainer, config, crops })
            }
        }
        Stage::Fusion => {
            let background = b.background()?;
            set.load(NetTag::BackgroundGen, background.store())?;
            let inpainter = b.inpainter()?;
            set.load(NetTag::Inpainter, inpainter.store())?;
            let generator = b.object_generator()?;
            set.load(NetTag::ObjectGen, generator.store())?;
            let encoder = b.style_encoder(NetTag::StyleEncoder)?;
            set.load(NetTag::StyleEncoder, encoder.store())?;
            let mut trainer = FusionTrainer::new(b.fusion()?, b.fusion_critic()?, &config.optim, config.weights, pyramid)?;
            trainer.adversarial = config.adversarial;
            Box::new(FusionRunner {
                trainer,
                config,
                dataset,
                background,
                inpainter,
                generator,
                encoder,
                eval_masks: eval_masks(dataset, config),
            })
        }
    })
}

fn device() -> Device {
    Device::Cpu
}

/// Network-space tensors for one background example.
pub fn background_example(
    sample: &Sample,
    mask: &EditMask,
    config: &PipelineConfig,
) -> Result<(BackgroundInput, Tensor, Tensor)> {
    let dtype = config.dtype();
    let erased = erase_input(&sample.image, mask)?;
    let dis = DisassemblyConfig {
        visibility_threshold: config.visibility_threshold,
        crop_size: config.crop_size,
    };
    let decomposition = disassemble(&erased, &sample.seg, mask, sample.instances.as_ref(), &dis)?;
    let input = BackgroundInput::from_scene(&decomposition, &sample.seg, mask, dtype, &device())?;
    let target = sample.image.to_tensor(dtype, &device())?.unsqueeze(0)?;
    let edit = mask.0.to_tensor(dtype, &device())?.unsqueeze(0)?;
    Ok((input, target, edit))
}

/// Mean absolute error in `[0, 1]` units between network-space tensors.
pub fn l1_unit(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(scalar(&(a - b)?.abs()?.mean_all()?)? / 2.0)
}

struct BackgroundRunner<'a> {
    trainer: BackgroundTrainer,
    config: &'a PipelineConfig,
    dataset: &'a Dataset,
    eval_masks: Vec<EditMask>,
}

impl BackgroundRunner<'_> {
    fn batch(&self, rng: &mut ChaCha8Rng) -> Result<BackgroundBatch> {
        let spec = self.config.patch_spec();
        let (mut inputs, mut targets, mut edits, mut windows) = (vec![], vec![], vec![], vec![]);
        for _ in 0..self.config.batch_size {
            let s = &self.dataset.samples[rng.gen_range(0..self.dataset.samples.len())];
            let (h, w) = s.image.dims();
            let mask = nonempty_mask(self.config, h, w, rng);
            let (input, target, edit) = background_example(s, &mask, self.config)?;
            windows.push(sample_boundary_patches(&mask.0, &spec, rng));
            inputs.push(input);
            targets.push(target);
            edits.push(edit);
        }
        Ok(BackgroundBatch {
            input: BackgroundInput::stack(&inputs)?,
            target: Tensor::cat(&targets, 0)?,
            edit: Tensor::cat(&edits, 0)?,
            windows,
        })
    }
}

impl StageRunner for BackgroundRunner<'_> {
    fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<LossReport> {
        let batch = self.batch(rng)?;
        self.trainer.step(&batch)
    }

    fn eval(&self) -> Result<f64> {
        background_eval(&self.trainer.generator, self.dataset, &self.eval_masks, self.config)
    }

    fn save(&self, set: &CheckpointSet) -> Result<()> {
        set.save(NetTag::BackgroundGen, self.trainer.generator.store())?;
        set.save(NetTag::GlobalCritic, self.trainer.d_global.store())?;
        set.save(NetTag::BoundaryCritic, self.trainer.d_patch.store())
    }
}

/// Full-frame L1 of the raw background prediction against ground truth,
/// averaged over samples, `[0, 1]` units.
pub fn background_eval(
    generator: &crate::background::BackgroundGenerator,
    dataset: &Dataset,
    masks: &[EditMask],
    config: &PipelineConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (s, m) in dataset.samples.iter().zip(masks) {
        let (input, target, _) = background_example(s, m, config)?;
        total += l1_unit(&generator.forward(&input)?, &target)?;
    }
    Ok(total / dataset.samples.len() as f64)
}

fn object_sample(crop: &ObjectCrop, hole: BinaryGrid, style: Option<RgbImage>) -> ObjectSample {
    ObjectSample {
        image: crop.image.clone(),
        instance: crop.instance.clone(),
        hole,
        class_index: crop.class_index,
        style,
    }
}

struct InpaintRunner<'a> {
    trainer: InpaintTrainer,
    config: &'a PipelineConfig,
    crops: Vec<ObjectCrop>,
    eval_holes: Vec<BinaryGrid>,
}

impl StageRunner for InpaintRunner<'_> {
    fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<LossReport> {
        let samples: Vec<ObjectSample> = (0..self.config.batch_size)
            .map(|_| {
                let c = &self.crops[rng.gen_range(0..self.crops.len())];
                object_sample(c, instance_hole(self.config, &c.instance, rng), None)
            })
            .collect();
        let k = self.trainer.inpainter.num_classes();
        let batch = ObjectBatch::from_samples(&samples, k, self.config.dtype(), &device())?;
        self.trainer.step(&batch)
    }

    fn eval(&self) -> Result<f64> {
        inpaint_eval(&self.trainer.inpainter, &self.crops, &self.eval_holes, self.config)
    }

    fn save(&self, set: &CheckpointSet) -> Result<()> {
        set.save(NetTag::Inpainter, self.trainer.inpainter.store())?;
        set.save(NetTag::InpaintCritic, self.trainer.critic.store())
    }
}

/// L1 inside the object holes, `[0, 1]` units, pooled over every hole pixel.
pub fn inpaint_eval(
    inpainter: &crate::object::ObjectInpainter,
    crops: &[ObjectCrop],
    holes: &[BinaryGrid],
    config: &PipelineConfig,
) -> Result<f64> {
    let samples: Vec<ObjectSample> = crops.iter().zip(holes).map(|(c, h)| object_sample(c, h.clone(), None)).collect();
    let k = inpainter.num_classes();
    let mut sum = 0.0;
    let mut count = 0.0;
    for chunk in samples.chunks(16) {
        let batch = ObjectBatch::from_samples(chunk, k, config.dtype(), &device())?;
        let erased = crate::object::reblend_zero(&batch.image, &batch.hole)?;
        let out = inpainter.forward(&erased, &batch.hole, &batch.sem)?;
        let n = scalar(&batch.hole.sum_all()?)?;
        sum += masked_l1(&out, &batch.image, &batch.hole)? * n;
        count += n;
    }
    Ok(if count > 0.0 { sum / count } else { 0.0 })
}

struct ObjectGenRunner<'a> {
    trainer: ObjectGenTrainer,
    config: &'a PipelineConfig,
    crops: Vec<ObjectCrop>,
}

impl StageRunner for ObjectGenRunner<'_> {
    fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<LossReport> {
        let samples: Vec<ObjectSample> = (0..self.config.batch_size)
            .map(|_| {
                let i = rng.gen_range(0..self.crops.len());
                let c = &self.crops[i];
                let peers: Vec<usize> = (0..self.crops.len())
                    .filter(|&j| j != i && self.crops[j].class_id == c.class_id)
                    .collect();
                let style = (!peers.is_empty()).then(|| self.crops[peers[rng.gen_range(0..peers.len())]].image.clone());
                object_sample(c, c.instance.clone(), style)
            })
            .collect();
        let k = self.trainer.generator.num_classes();
        let batch = ObjectBatch::from_samples(&samples, k, self.config.dtype(), &device())?;
        self.trainer.step(&batch)
    }

    fn eval(&self) -> Result<f64> {
        object_gen_eval(&self.trainer.generator, &self.trainer.encoder, &self.crops, self.config)
    }

    fn save(&self, set: &CheckpointSet) -> Result<()> {
        set.save(NetTag::ObjectGen, self.trainer.generator.store())?;
        set.save(NetTag::StyleEncoder, self.trainer.encoder.store())?;
        set.save(NetTag::CycleEncoder, self.trainer.cycle_encoder.store())?;
        set.save(NetTag::ObjectCritic, self.trainer.critic.store())
    }
}

/// Reconstruction error of every crop from its own style code, inside the
/// instance, `[0, 1]` units.
pub fn object_gen_eval(
    generator: &crate::object::ObjectGenerator,
    encoder: &StyleEncoder,
    crops: &[ObjectCrop],
    config: &PipelineConfig,
) -> Result<f64> {
    let k = generator.num_classes();
    let mut sum = 0.0;
    let mut count = 0.0;
    for chunk in crops.chunks(16) {
        let samples: Vec<ObjectSample> = chunk.iter().map(|c| object_sample(c, c.instance.clone(), None)).collect();
        let batch = ObjectBatch::from_samples(&samples, k, config.dtype(), &device())?;
        let out = mask_output(&generator.forward(&batch.sem, &encoder.forward(&batch.image)?)?, &batch.instance)?;
        let n = scalar(&batch.instance.sum_all()?)?;
        sum += masked_l1(&out, &batch.image, &batch.instance)? * n;
        count += n;
    }
    Ok(if count > 0.0 { sum / count } else { 0.0 })
}

struct FusionRunner<'a> {
    trainer: FusionTrainer,
    config: &'a PipelineConfig,
    dataset: &'a Dataset,
    background: crate::background::BackgroundGenerator,
    inpainter: crate::object::ObjectInpainter,
    generator: crate::object::ObjectGenerator,
    encoder: StyleEncoder,
    eval_masks: Vec<EditMask>,
}

impl FusionRunner<'_> {
    fn nets(&self) -> SceneNets<'_> {
        SceneNets {
            config: self.config,
            classes: &self.dataset.classes,
            background: &self.background,
            inpainter: &self.inpainter,
            generator: &self.generator,
        }
    }

    /// Composite from frozen upstream networks; hidden objects use the code
    /// of their own ground-truth crop.
    fn composite(&self, sample: &Sample, mask: &EditMask) -> Result<RgbImage> {
        let mut pick = |_: usize, obj: &crate::scene::SceneObject| {
            let (crop, inst, _) = crop_object(&sample.image, &obj.record, self.config.crop_size)?;
            Ok((None, self.encoder.encode(&isolate(&crop, &inst)?, obj.record.class_id)?))
        };
        Ok(build_composite(&self.nets(), &sample.image, &sample.seg, sample.instances.as_ref(), mask, &mut pick)?.image)
    }
}

impl StageRunner for FusionRunner<'_> {
    fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<LossReport> {
        let dtype = self.config.dtype();
        let (mut comps, mut targets, mut segs, mut edits) = (vec![], vec![], vec![], vec![]);
        for _ in 0..self.config.batch_size {
            let s = &self.dataset.samples[rng.gen_range(0..self.dataset.samples.len())];
            let (h, w) = s.image.dims();
            let mask = nonempty_mask(self.config, h, w, rng);
            comps.push(self.composite(s, &mask)?.to_tensor(dtype, &device())?.unsqueeze(0)?);
            targets.push(s.image.to_tensor(dtype, &device())?.unsqueeze(0)?);
            segs.push(s.seg.one_hot(dtype, &device())?.unsqueeze(0)?);
            edits.push(mask.0.to_tensor(dtype, &device())?.unsqueeze(0)?);
        }
        let batch = FusionBatch {
            composite: Tensor::cat(&comps, 0)?,
            target: Tensor::cat(&targets, 0)?,
            one_hot: Tensor::cat(&segs, 0)?,
            edit: Tensor::cat(&edits, 0)?,
        };
        self.trainer.step(&batch)
    }

    fn eval(&self) -> Result<f64> {
        let mut total = 0.0;
        for (s, m) in self.dataset.samples.iter().zip(&self.eval_masks) {
            let comp = self.composite(s, m)?;
            let out = fuse(&self.trainer.net, &comp, &s.image, &s.seg, m, self.config)?;
            total += image_l1(&out, &s.image);
        }
        Ok(total / self.dataset.samples.len() as f64)
    }

    fn save(&self, set: &CheckpointSet) -> Result<()> {
        set.save(NetTag::Fusion, self.trainer.net.store())?;
        set.save(NetTag::FusionCritic, self.trainer.critic.store())
    }
}

/// Mean absolute difference of two images in `[0, 1]` units.
pub fn image_l1(a: &RgbImage, b: &RgbImage) -> f64 {
    let n = a.data.len().max(1) as f64;
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / n
}
