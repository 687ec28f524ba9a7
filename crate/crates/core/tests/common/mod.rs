// Each test binary uses a different subset of these helpers.
#![allow(dead_code)]

use std::path::PathBuf;

use siedob_core::objectives::Stage;
use siedob_core::pipeline::{build_bank, make_toy_dataset, train_stage_on, Dataset, PipelineConfig, TrainOutcome};

pub const STAGES: [Stage; 4] = [Stage::Background, Stage::ObjectInpaint, Stage::ObjectGen, Stage::Fusion];

pub struct Trained {
    pub config: PipelineConfig,
    pub dataset: Dataset,
    pub outcomes: Vec<TrainOutcome>,
}

/// Desk-scale configuration rooted at a fresh directory under the cargo
/// target dir, with a three-image toy dataset.
pub fn setup(name: &str, steps: usize) -> (PipelineConfig, Dataset) {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&root);
    let mut config = PipelineConfig::desk_scale();
    config.dataset_dir = root.join("data");
    config.checkpoint_dir = root.join("checkpoints");
    config.log_dir = root.join("logs");
    for stage in STAGES {
        config.steps.set(stage, steps);
    }
    config.eval_every = 1;
    let dataset = make_toy_dataset(&config.dataset_dir, 3, config.scene_size, 3).expect("toy dataset");
    (config, dataset)
}

/// Every stage for a couple of steps, then the style bank.
pub fn train_all(name: &str) -> Trained {
    let (config, dataset) = setup(name, 2);
    let outcomes = STAGES
        .iter()
        .map(|&s| train_stage_on(s, &config, &dataset, config.steps.get(s), &mut |_, _| {}).expect("stage trains"))
        .collect();
    build_bank(&config).expect("bank builds");
    Trained {
        config,
        dataset,
        outcomes,
    }
}
