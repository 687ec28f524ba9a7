use std::path::PathBuf;

use crate::background::BackgroundGenerator;
use crate::critic::PatchCritic;
use crate::error::{Error, Result};
use crate::fusion::FusionNet;
use crate::nn::{Network, ParamStore};
use crate::object::{ObjectGenerator, ObjectInpainter, StyleBank, StyleEncoder};
use crate::objectives::FeaturePyramid;

use super::checkpoint::{CheckpointSet, NetTag};
use super::config::PipelineConfig;
use super::dataset::ClassInfo;

/// Freshly initialized networks for one configuration.
pub struct Builder<'a> {
    pub config: &'a PipelineConfig,
    pub classes: &'a ClassInfo,
}

impl Builder<'_> {
    fn store(&self, tag: NetTag) -> ParamStore {
        ParamStore::new(tag.seed(self.config.seed), self.config.dtype())
    }

    fn num_foreground(&self) -> usize {
        self.classes.foreground_ids().len().max(1)
    }

    pub fn background(&self) -> Result<BackgroundGenerator> {
        BackgroundGenerator::new(
            self.store(NetTag::BackgroundGen),
            self.config.background.clone(),
            self.classes.num_classes(),
            self.classes.background_flags(),
        )
    }

    pub fn global_critic(&self) -> Result<PatchCritic> {
        PatchCritic::new(self.store(NetTag::GlobalCritic), 3 + self.classes.num_classes(), self.config.critic_width)
    }

    pub fn boundary_critic(&self) -> Result<PatchCritic> {
        PatchCritic::new(self.store(NetTag::BoundaryCritic), 3, self.config.critic_width)
    }

    pub fn inpainter(&self) -> Result<ObjectInpainter> {
        ObjectInpainter::new(self.store(NetTag::Inpainter), &self.config.object, self.num_foreground())
    }

    pub fn object_critic(&self, tag: NetTag) -> Result<PatchCritic> {
        PatchCritic::new(self.store(tag), 3 + self.num_foreground(), self.config.critic_width)
    }

    pub fn object_generator(&self) -> Result<ObjectGenerator> {
        ObjectGenerator::new(self.store(NetTag::ObjectGen), &self.config.object, self.num_foreground())
    }

    pub fn style_encoder(&self, tag: NetTag) -> Result<StyleEncoder> {
        StyleEncoder::new(self.store(tag), &self.config.object)
    }

    pub fn fusion(&self) -> Result<FusionNet> {
        FusionNet::new(self.store(NetTag::Fusion), &self.config.fusion, self.classes.num_classes())
    }

    pub fn fusion_critic(&self) -> Result<PatchCritic> {
        PatchCritic::new(self.store(NetTag::FusionCritic), 3 + self.classes.num_classes(), self.config.critic_width)
    }

    pub fn pyramid(&self) -> Result<FeaturePyramid> {
        FeaturePyramid::new(self.config.seed, self.config.dtype())
    }
}

/// Everything the edit procedure needs, loaded read-only.
pub struct EditModels {
    pub config: PipelineConfig,
    pub classes: ClassInfo,
    pub background: BackgroundGenerator,
    pub inpainter: ObjectInpainter,
    pub generator: ObjectGenerator,
    pub encoder: StyleEncoder,
    pub fusion: FusionNet,
    pub bank: StyleBank,
    /// Fingerprint of the loaded checkpoint manifest.
    pub checkpoint_hash: String,
}

/// `classes.json` next to the checkpoints, else the dataset's.
pub fn load_classes(config: &PipelineConfig) -> Result<ClassInfo> {
    let near = config.checkpoint_dir.join("classes.json");
    if near.exists() {
        return ClassInfo::load(&near);
    }
    ClassInfo::load(&config.dataset_dir.join("classes.json"))
}

impl EditModels {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let classes = load_classes(config)?;
        let set = CheckpointSet::new(&config.checkpoint_dir, config.config_hash());
        if !set.dir.join("manifest.json").exists() {
            return Err(Error::MissingCheckpoint {
                stage: "all".into(),
                path: set.dir.join("manifest.json"),
            });
        }
        let b = Builder { config, classes: &classes };
        let background = b.background()?;
        set.load(NetTag::BackgroundGen, background.store())?;
        let inpainter = b.inpainter()?;
        set.load(NetTag::Inpainter, inpainter.store())?;
        let generator = b.object_generator()?;
        set.load(NetTag::ObjectGen, generator.store())?;
        let encoder = b.style_encoder(NetTag::StyleEncoder)?;
        set.load(NetTag::StyleEncoder, encoder.store())?;
        let fusion = b.fusion()?;
        set.load(NetTag::Fusion, fusion.store())?;
        let bank = StyleBank::load(&set.bank_path()?)?;
        Ok(Self {
            config: config.clone(),
            checkpoint_hash: set.fingerprint()?,
            classes,
            background,
            inpainter,
            generator,
            encoder,
            fusion,
            bank,
        })
    }

    pub fn bank_path(&self) -> PathBuf {
        self.config.bank_path()
    }
}
