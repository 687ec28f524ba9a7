use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use siedob_core::objectives::Stage;
use siedob_core::pipeline::{
    build_bank, edit, evaluate, make_toy_dataset, styles_by_class, train_stage, EditModels, PipelineConfig,
    CHECKPOINT_CONFIG,
};
use siedob_core::raster::{BinaryGrid, Grid, RgbImage};
use siedob_core::scene::EditMask;
use siedob_core::service;

/// Overrides `checkpoint_dir` of any loaded configuration.
const CHECKPOINT_ENV: &str = "SIEDOB_CHECKPOINT_DIR";

#[derive(Parser)]
#[command(name = "siedob", version, about = "Semantic image editing with separate background and object generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage and write its checkpoints and loss CSV.
    Train {
        /// BACKGROUND, OBJECT_INPAINT, OBJECT_GEN or FUSION.
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured step budget of the stage.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Encode every training object into the style bank.
    BuildBank {
        #[arg(long)]
        config: PathBuf,
    },
    /// Edit one image; unedited pixels are copied from the input.
    Edit {
        #[arg(long)]
        image: PathBuf,
        /// 8-bit class map.
        #[arg(long)]
        seg: PathBuf,
        /// Nonzero pixels are edited.
        #[arg(long)]
        mask: PathBuf,
        /// Optional 16-bit instance map.
        #[arg(long)]
        inst: Option<PathBuf>,
        /// `class:index` bank entry for every generated instance of `class`.
        #[arg(long = "style", value_parser = parse_style)]
        styles: Vec<(String, usize)>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the configuration stored beside the checkpoints.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the evaluation report for the trained pipeline.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the edit API over HTTP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        port: u16,
        /// Edits allowed to run at once.
        #[arg(long, default_value_t = service::DEFAULT_WORKERS)]
        workers: usize,
    },
    /// Generate the synthetic street-scene dataset used by the smoke runs.
    MakeToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a desk-scale configuration pointing at the dataset.
        #[arg(long)]
        config_out: Option<PathBuf>,
    },
}

fn parse_style(s: &str) -> std::result::Result<(String, usize), String> {
    let (class, index) = s.rsplit_once(':').ok_or_else(|| format!("expected class:index, got {s:?}"))?;
    if class.is_empty() {
        return Err(format!("empty class in {s:?}"));
    }
    let index = index.parse().map_err(|e| format!("bad index in {s:?}: {e}"))?;
    Ok((class.to_string(), index))
}

fn load_config(path: &Path) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(dir) = std::env::var_os(CHECKPOINT_ENV) {
        config.checkpoint_dir = PathBuf::from(dir);
    }
    Ok(config)
}

/// `--config` if given, else the copy stored beside the checkpoints.
fn edit_config(path: Option<&Path>) -> Result<PipelineConfig> {
    if let Some(p) = path {
        return load_config(p);
    }
    let Some(dir) = std::env::var_os(CHECKPOINT_ENV) else {
        bail!("edit needs --config or {CHECKPOINT_ENV}");
    };
    load_config(&PathBuf::from(dir).join(CHECKPOINT_CONFIG))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { stage, config, steps } => {
            let mut config = load_config(&config)?;
            if let Some(n) = steps {
                config.steps.set(stage, n);
            }
            let outcome = train_stage(stage, &config)?;
            println!("{}", serde_json::to_string(&outcome)?);
        }
        Command::BuildBank { config } => {
            let config = load_config(&config)?;
            let bank = build_bank(&config)?;
            println!("{} styles written to {}", bank.len(), config.bank_path().display());
        }
        Command::Edit {
            image,
            seg,
            mask,
            inst,
            styles,
            seed,
            out,
            config,
        } => {
            let picture = RgbImage::load_png(&image)?;
            let edit_mask = EditMask::new(BinaryGrid::load_png_mask(&mask)?)?;
            if edit_mask.dims() != picture.dims() {
                bail!("mask {:?} and image {:?} differ in size", edit_mask.dims(), picture.dims());
            }
            // Nothing to synthesize: the input is the answer, checkpoints or not.
            if edit_mask.is_empty() {
                std::fs::copy(&image, &out).with_context(|| format!("writing {}", out.display()))?;
                println!("{}", serde_json::json!({ "instances": [] }));
                return Ok(());
            }
            let config = edit_config(config.as_deref())?;
            let models = EditModels::load(&config)?;
            let labels = models.classes.segmentation(Grid::<u8>::load_png_u8(&seg)?)?;
            let instances = inst.map(|p| Grid::<u16>::load_png_u16(&p)).transpose()?;
            let mut by_class = BTreeMap::new();
            for (name, index) in styles {
                by_class.insert(models.classes.id_of(&name)?, index);
            }
            let choices = styles_by_class(&config, &picture, &labels, instances.as_ref(), &edit_mask, &by_class)?;
            let result = edit(&models, &picture, &labels, instances.as_ref(), &edit_mask, &choices, seed)?;
            result.image.save_png(&out)?;
            println!("{}", serde_json::json!({ "instances": result.instances }));
        }
        Command::Eval { config } => {
            let config = load_config(&config)?;
            let report = evaluate(&config)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Serve { config, port, workers } => {
            let config = load_config(&config)?;
            let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
            runtime.block_on(service::serve(port, workers, move || EditModels::load(&config)))?;
        }
        Command::MakeToyData {
            out,
            count,
            size,
            seed,
            config_out,
        } => {
            let dataset = make_toy_dataset(&out, count, size, seed)?;
            println!("{} samples written to {}", dataset.samples.len(), out.display());
            if let Some(path) = config_out {
                let mut config = PipelineConfig::desk_scale();
                config.scene_size = size;
                config.background.scene_size = size;
                config.dataset_dir = std::path::absolute(&out)?;
                config.seed = seed;
                config.validate()?;
                config.save(&path)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    // Usage errors exit with status 2 inside `parse`.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("siedob: error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
