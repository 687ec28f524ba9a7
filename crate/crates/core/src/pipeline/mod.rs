//! Configuration, datasets, checkpoints, staged training and the end-to-end
//! edit procedure.

mod checkpoint;
mod config;
mod dataset;
mod edit;
mod evaluate;
mod models;
mod stages;

pub use checkpoint::{CheckpointSet, Manifest, NetTag, NetworkEntry, TensorEntry};
pub use config::{PipelineConfig, Precision, StageSteps, StopTargets};
pub use dataset::{make_toy_dataset, ClassInfo, Dataset, Sample, TOY_CLASSES, TOY_FOREGROUND};
pub use edit::{build_composite, edit, fuse, restore_known, styles_by_class, Composite, EditOutput, InstanceReport, SceneNets, StyleChoice};
pub use evaluate::{build_bank, evaluate, instance_cover_mask};
pub use models::{load_classes, Builder, EditModels};
pub use stages::{
    background_eval, background_example, eval_masks, image_l1, inpaint_eval, l1_unit, object_crops, object_gen_eval,
    train_stage, train_stage_on, ObjectCrop, TrainOutcome, CHECKPOINT_CONFIG,
};
