use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::background::{BackgroundGeneratorConfig, PatchSpec};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::masks::MaskMix;
use crate::object::ObjectGenConfig;
use crate::objectives::{LossWeights, Stage};
use crate::scene::DEFAULT_VISIBILITY_THRESHOLD;
use crate::train::OptimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSteps {
    pub background: usize,
    pub object_inpaint: usize,
    pub object_gen: usize,
    pub fusion: usize,
}

impl StageSteps {
    pub fn get(&self, stage: Stage) -> usize {
        match stage {
            Stage::Background => self.background,
            Stage::ObjectInpaint => self.object_inpaint,
            Stage::ObjectGen => self.object_gen,
            Stage::Fusion => self.fusion,
        }
    }

    pub fn set(&mut self, stage: Stage, steps: usize) {
        let slot = match stage {
            Stage::Background => &mut self.background,
            Stage::ObjectInpaint => &mut self.object_inpaint,
            Stage::ObjectGen => &mut self.object_gen,
            Stage::Fusion => &mut self.fusion,
        };
        *slot = steps;
    }
}

/// Optional early-stop thresholds, checked every `eval_every` steps on the
/// held-in evaluation masks. Values are `[0, 1]`-unit L1 errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopTargets {
    pub background_l1: Option<f64>,
    pub inpaint_l1: Option<f64>,
    pub object_gen_l1: Option<f64>,
    pub fusion_l1: Option<f64>,
}

impl StopTargets {
    pub fn get(&self, stage: Stage) -> Option<f64> {
        match stage {
            Stage::Background => self.background_l1,
            Stage::ObjectInpaint => self.inpaint_l1,
            Stage::ObjectGen => self.object_gen_l1,
            Stage::Fusion => self.fusion_l1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub scene_size: usize,
    pub crop_size: usize,
    pub precision: Precision,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub log_dir: PathBuf,
    pub batch_size: usize,
    pub steps: StageSteps,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub stop: StopTargets,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    /// Train critics and include adversarial terms.
    pub adversarial: bool,
    pub mask_mix: MaskMix,
    pub visibility_threshold: f64,
    pub background: BackgroundGeneratorConfig,
    pub object: ObjectGenConfig,
    pub fusion: FusionConfig,
    pub critic_width: usize,
    /// Side every boundary patch is resized to before the local critic;
    /// `None` scales 128 by `scene_size / 256`.
    pub critic_side: Option<usize>,
    pub patches: Option<PatchSpec>,
    pub pairs_per_image: usize,
    pub eval_output: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene_size: 256,
            crop_size: 128,
            precision: Precision::F32,
            seed: 0,
            dataset_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_dir: PathBuf::from("logs"),
            batch_size: 4,
            steps: StageSteps {
                background: 3000,
                object_inpaint: 2000,
                object_gen: 2000,
                fusion: 1000,
            },
            checkpoint_every: 500,
            eval_every: 100,
            stop: StopTargets::default(),
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            adversarial: true,
            mask_mix: MaskMix::default(),
            visibility_threshold: DEFAULT_VISIBILITY_THRESHOLD,
            background: BackgroundGeneratorConfig::default(),
            object: ObjectGenConfig::default(),
            fusion: FusionConfig::default(),
            critic_width: 64,
            critic_side: None,
            patches: None,
            pairs_per_image: 5,
            eval_output: None,
        }
    }
}

/// Fields that determine network shapes; checkpoints are keyed by their hash.
#[derive(Serialize)]
struct ArchitectureKey<'a> {
    scene_size: usize,
    crop_size: usize,
    precision: Precision,
    background: &'a BackgroundGeneratorConfig,
    object: &'a ObjectGenConfig,
    fusion: &'a FusionConfig,
    critic_width: usize,
    critic_side: usize,
}

impl PipelineConfig {
    /// Small networks at 64x64 scenes and 32x32 crops.
    pub fn desk_scale() -> Self {
        Self {
            scene_size: 64,
            crop_size: 32,
            background: BackgroundGeneratorConfig {
                base_width: 16,
                num_down: 4,
                num_saspm: 3,
                scene_size: 64,
                head_hidden: 16,
                max_width: 128,
            },
            object: ObjectGenConfig {
                crop_size: 32,
                ssnm_blocks: 4,
                inpaint_width: 32,
                inpaint_down: 3,
                gen_width: 128,
                encoder_width: 16,
                head_hidden: 16,
            },
            fusion: FusionConfig {
                base_width: 16,
                num_down: 3,
            },
            critic_width: 16,
            eval_every: 50,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self = serde_json::from_slice(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.dataset_dir, &mut config.checkpoint_dir, &mut config.log_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = config.eval_output.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.background.scene_size != self.scene_size {
            return bad(format!(
                "background.scene_size {} differs from scene_size {}",
                self.background.scene_size, self.scene_size
            ));
        }
        if self.object.crop_size != self.crop_size {
            return bad(format!("object.crop_size {} differs from crop_size {}", self.object.crop_size, self.crop_size));
        }
        if self.batch_size == 0 || self.critic_width == 0 || self.pairs_per_image == 0 {
            return bad("batch_size, critic_width and pairs_per_image must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.visibility_threshold) {
            return bad(format!("visibility threshold {} outside [0, 1]", self.visibility_threshold));
        }
        if self.critic_side() % 16 != 0 || self.critic_side() == 0 {
            return bad(format!("critic side {} must be a positive multiple of 16", self.critic_side()));
        }
        self.background.validate()?;
        self.object.validate()?;
        self.fusion.validate(self.scene_size)?;
        self.weights.validate()?;
        self.optim.validate()?;
        self.mask_mix.validate()?;
        self.patch_spec().validate(self.scene_size)
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn critic_side(&self) -> usize {
        self.critic_side.unwrap_or((128 * self.scene_size / 256).max(16))
    }

    pub fn patch_spec(&self) -> PatchSpec {
        self.patches.unwrap_or_else(|| PatchSpec::for_scene(self.scene_size))
    }

    pub fn config_hash(&self) -> String {
        let key = ArchitectureKey {
            scene_size: self.scene_size,
            crop_size: self.crop_size,
            precision: self.precision,
            background: &self.background,
            object: &self.object,
            fusion: &self.fusion,
            critic_width: self.critic_width,
            critic_side: self.critic_side(),
        };
        let bytes = serde_json::to_vec(&key).expect("architecture key serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn bank_path(&self) -> PathBuf {
        self.checkpoint_dir.join("bank.sbnk")
    }
}
