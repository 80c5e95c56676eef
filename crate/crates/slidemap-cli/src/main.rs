//! `slidemap` — two-stage landslide density mapping on rasters + weak point
//! labels, with a deterministic synthetic-scene mode for end-to-end runs.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slidemap_core::convnet::Mode;
use slidemap_core::pipeline::{
    load_chip_manifest, load_predictions, run_ablate, run_all, stage_chips, stage_embed, stage_evaluate,
    stage_featurize, stage_fit_rf, stage_predict, stage_synth, stage_train, Paths, PipelineConfig,
};
use slidemap_core::raster::load_raster;
use slidemap_core::Error;

mod render;

#[derive(Parser)]
#[command(name = "slidemap", version, about = "Landslide density mapping from SAR + DEM chips")]
struct Cli {
    /// key = value run configuration file; flags override its entries
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (scene, split/training, and forest seeds)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for all artifacts
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Network input mode: dem_only | sar_only | fused
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Post-event revisits used by the network (1..=3)
    #[arg(long, global = true)]
    revisits: Option<usize>,
    /// Chip side length in pixels
    #[arg(long = "chip-size", global = true)]
    chip_size: Option<usize>,
    /// Re-run stages even when artifacts are up to date
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene (DEM, heads, 6 SAR acquisitions)
    Synth,
    /// Tile the scene into chips and write the chip manifest + split plan
    Chips,
    /// Train the two embedding networks (one per split)
    Train,
    /// Write per-chip embedding planes from both models
    Embed,
    /// Percentile-featurize the embeddings
    Featurize,
    /// Fit one random forest per split on its train features
    #[command(name = "fit-rf")]
    FitRf,
    /// Predict train/val/out-of-split chip classes
    Predict,
    /// Evaluate stored predictions (requires full out-of-split coverage)
    Evaluate,
    /// Render the out-of-split density map as PNG + GeoJSON grid
    Render,
    /// All stages in order: synth through evaluate
    RunAll,
    /// The full mode x revisits table over a shared split plan
    Ablate,
}

fn parse_config_text(config: &mut PipelineConfig, text: &str) -> Result<(), Error> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("config line {}: expected `key = value`, got `{raw}`", lineno + 1))
        })?;
        apply_key(config, key.trim(), value.trim())
            .map_err(|e| Error::InvalidConfig(format!("config line {}: {e}", lineno + 1)))?;
    }
    Ok(())
}

fn apply_key(config: &mut PipelineConfig, key: &str, value: &str) -> Result<(), Error> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error> {
        value
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
    }
    match key {
        "out" => config.out_dir = PathBuf::from(value),
        "seed" => {
            let s = num(key, value)?;
            config.scene.seed = s;
            config.train.seed = s;
            config.forest.seed = s;
        }
        "scene_seed" => config.scene.seed = num(key, value)?,
        "width" => config.scene.width = num(key, value)?,
        "height" => config.scene.height = num(key, value)?,
        "pixel_m" => config.scene.pixel_m = num(key, value)?,
        "n_hills" => config.scene.n_hills = num(key, value)?,
        "base_head_rate" => config.scene.base_head_rate = num(key, value)?,
        "slope_gain" => config.scene.slope_gain = num(key, value)?,
        "sar_speckle_looks" => config.scene.sar_speckle_looks = num(key, value)?,
        "event_brightening_db" => config.scene.event_brightening_db = num(key, value)?,
        "event_radius_px" => config.scene.event_radius_px = num(key, value)?,
        "noise_amp" => config.scene.noise_amp = num(key, value)?,
        "chip_size" => config.chip_size = num(key, value)?,
        "batch_size" => config.train.batch_size = num(key, value)?,
        "lr" => config.train.lr = num(key, value)?,
        "max_epochs" => config.train.max_epochs = num(key, value)?,
        "patience" => config.train.patience = num(key, value)?,
        "train_seed" => config.train.seed = num(key, value)?,
        "mode" => config.train.mode = Mode::parse(value)?,
        "revisits" => config.train.revisits_post = num(key, value)?,
        "branch_width" => config.train.arch.branch_width = num(key, value)?,
        "branch_depth" => config.train.arch.branch_depth = num(key, value)?,
        "fusion_hidden" => config.train.arch.fusion_hidden = num(key, value)?,
        "n_trees" => config.forest.n_trees = num(key, value)?,
        "max_depth" => {
            config.forest.max_depth = if value == "none" { None } else { Some(num(key, value)?) }
        }
        "min_leaf" => config.forest.min_leaf = num(key, value)?,
        "mtry" => config.forest.mtry = num(key, value)?,
        "balanced" => {
            config.forest.balanced = num::<bool>(key, value)?;
        }
        "forest_seed" => config.forest.seed = num(key, value)?,
        _ => return Err(Error::InvalidConfig(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut config = PipelineConfig::new("run");
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_config_text(&mut config, &text)?;
    }
    if let Some(seed) = cli.seed {
        config.scene.seed = seed;
        config.train.seed = seed;
        config.forest.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(mode) = &cli.mode {
        config.train.mode = Mode::parse(mode)?;
    }
    if let Some(revisits) = cli.revisits {
        config.train.revisits_post = revisits;
    }
    if let Some(size) = cli.chip_size {
        config.chip_size = size;
    }
    config.force = cli.force;
    config.validate()?;
    Ok(config)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::MissingArtifact { .. } => 3,
        Error::InvalidConfig(_)
        | Error::InvalidGeoTransform(_)
        | Error::InvalidRaster(_)
        | Error::GridMismatch(_)
        | Error::Sidecar { .. }
        | Error::MissingSidecar(_)
        | Error::DimensionMismatch { .. } => 2,
        _ => 4,
    }
}

fn report_stage(name: &str, ran: bool) {
    if ran {
        println!("{name}: done");
    } else {
        println!("{name}: up to date, skipped");
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = build_config(cli)?;
    match cli.command {
        Command::Synth => report_stage("synth", stage_synth(&config)?),
        Command::Chips => report_stage("chips", stage_chips(&config)?),
        Command::Train => report_stage("train", stage_train(&config)?),
        Command::Embed => report_stage("embed", stage_embed(&config)?),
        Command::Featurize => report_stage("featurize", stage_featurize(&config)?),
        Command::FitRf => report_stage("fit-rf", stage_fit_rf(&config)?),
        Command::Predict => report_stage("predict", stage_predict(&config)?),
        Command::Evaluate => {
            for report in stage_evaluate(&config)? {
                println!("{}: macro AUC {:.3} over {} chips", report.role, report.macro_auc, report.n);
            }
        }
        Command::Render => {
            let paths = Paths::new(&config.out_dir);
            let entries = load_chip_manifest(&config.out_dir)?;
            let predictions = load_predictions(&paths.predictions("out_of_split"), "render")?;
            let dem = load_raster(&paths.dem())?;
            let (png, geojson) = render::render_map(&config.out_dir, &entries, &predictions, &dem.geo)?;
            println!("wrote {} and {}", png.display(), geojson.display());
        }
        Command::RunAll => {
            for report in run_all(&config)? {
                println!("{}: macro AUC {:.3} over {} chips", report.role, report.macro_auc, report.n);
            }
        }
        Command::Ablate => {
            let table = run_ablate(&config)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
