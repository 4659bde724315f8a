use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use radsurv::data::io::read_png;
use radsurv::data::{generate_synthetic_cohort, load_dataset_with, save_dataset, CohortSample, DatasetSpec, ImageStorage, SynthConfig};
use radsurv::eval::render_bar_chart;
use radsurv::pipeline::checkpoint::read_manifest;
use radsurv::pipeline::train::{split_cohort, PreparedData};
use radsurv::pipeline::{evaluate, load_checkpoint, plugins, run_inference, sample_features, save_checkpoint, stage2, stage3, start, write_evaluation};
use radsurv::pipeline::{ExperimentConfig, Model, StageReport};
use radsurv::{Error, Result};

#[derive(Parser)]
#[command(name = "radsurv", version, about = "Region-grounded report generation and survival prediction for chest X-rays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage (or all three) and write a checkpoint bundle.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        config: PathBuf,
        /// JSON-lines dataset.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory; stages 2 and 3 continue the bundle found here.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained bundle on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metric report (JSON); per-sample rows go to the same path with a .csv extension.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Directory for one region-score bar chart per sample.
        #[arg(long)]
        charts: Option<PathBuf>,
    },
    /// Run the full pipeline on one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grayscale PNG.
        #[arg(long)]
        image: PathBuf,
        /// JSON clinical covariates.
        #[arg(long)]
        clinical: PathBuf,
        /// Detector plug-in; defaults to the bundle's inference detector.
        #[arg(long)]
        detector: Option<String>,
        /// Write a region-score bar chart to this PNG.
        #[arg(long)]
        chart: Option<PathBuf>,
    },
    /// Generate a synthetic cohort.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON-lines file.
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write images as PNG files in this directory instead of inline.
        #[arg(long)]
        png_dir: Option<PathBuf>,
    },
}

fn dataset_spec(cfg: &ExperimentConfig) -> DatasetSpec {
    DatasetSpec {
        schema_version: cfg.schema_version.clone(),
        image_size: (cfg.model.input_size, cfg.model.input_size),
        clinical_dim: cfg.model.clinical_dim,
    }
}

fn print_reports(reports: &[StageReport]) -> Result<()> {
    for r in reports {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

fn resume(out: &Path, config: &ExperimentConfig, need: u8) -> Result<Model> {
    if read_manifest(out).is_err() {
        return Err(Error::Ordering(format!("stage {need} needs a checkpoint from stage {} in {}", need - 1, out.display())));
    }
    let model = load_checkpoint(out)?;
    if model.config.hash() != config.hash() {
        warn!("--config differs from the checkpoint's configuration; continuing with the checkpoint's");
    }
    Ok(model)
}

fn prepare(model: &Model, samples: &[CohortSample]) -> Result<PreparedData> {
    PreparedData::new(model, split_cohort(&model.config, samples)?)
}

fn train(stage: Stage, config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let samples = load_dataset_with(data, &dataset_spec(&cfg))?;
    info!("loaded {} samples", samples.len());
    let model = match stage {
        Stage::One | Stage::All => {
            let (mut model, data, r1) = start(cfg, &samples)?;
            let mut reports = vec![r1];
            if matches!(stage, Stage::All) {
                reports.push(stage2(&mut model, &data)?);
                reports.push(stage3(&mut model, &data)?);
            }
            print_reports(&reports)?;
            model
        }
        Stage::Two => {
            let mut model = resume(out, &cfg, 2)?;
            let data = prepare(&model, &samples)?;
            print_reports(&[stage2(&mut model, &data)?])?;
            model
        }
        Stage::Three => {
            let mut model = resume(out, &cfg, 3)?;
            let data = prepare(&model, &samples)?;
            print_reports(&[stage3(&mut model, &data)?])?;
            model
        }
    };
    save_checkpoint(&model, out)?;
    info!("checkpoint written to {}", out.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, report: &Path, split: SplitName, charts: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let samples = load_dataset_with(data, &dataset_spec(&model.config))?;
    let samples = match split {
        SplitName::All => samples,
        s => {
            let splits = split_cohort(&model.config, &samples)?;
            match s {
                SplitName::Train => splits.train,
                SplitName::Val => splits.val,
                _ => splits.test,
            }
        }
    };
    if samples.is_empty() {
        return Err(Error::Data("the selected split is empty".into()));
    }
    let detector = plugins::detector(&model.config.plugins.detector, &model.config.detector)?;
    let lexicon = model.config.labeler_lexicon.as_ref().map(std::fs::read_to_string).transpose()?;
    let labeler = plugins::labeler(&model.config.plugins.labeler, lexicon.as_deref())?;
    let cache = sample_features(&model, detector.as_ref(), &samples)?;
    let result = evaluate(&model, &cache, &samples, labeler.as_ref())?;
    write_evaluation(&result, report)?;
    if let Some(dir) = charts {
        std::fs::create_dir_all(dir)?;
        for row in &result.rows {
            render_bar_chart(&dir.join(format!("{}.png", row.id)), &row.region_scores)?;
        }
    }
    println!("{}", serde_json::to_string_pretty(&result.metrics)?);
    Ok(())
}

fn infer(checkpoint: &Path, image: &Path, clinical: &Path, detector: Option<&str>, chart: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let image = read_png(image)?;
    let clinical = radsurv::data::io::load_clinical(clinical)?;
    let out = run_inference(&model, &image, &clinical, detector)?;
    if let Some(path) = chart {
        render_bar_chart(path, &out.region_scores.scores)?;
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn synth(n: usize, seed: u64, out: &Path, config: Option<&Path>, png_dir: Option<PathBuf>) -> Result<()> {
    let cfg = match config {
        Some(p) => toml::from_str::<SynthConfig>(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => SynthConfig::default(),
    };
    let samples = generate_synthetic_cohort(n, seed, &cfg)?;
    let storage = png_dir.map_or(ImageStorage::Grid, ImageStorage::Png);
    save_dataset(out, &samples, &storage)?;
    info!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { stage, config, data, out } => train(stage, &config, &data, &out),
        Command::Eval { checkpoint, data, report, split, charts } => eval(&checkpoint, &data, &report, split, charts.as_deref()),
        Command::Infer { checkpoint, image, clinical, detector, chart } => {
            infer(&checkpoint, &image, &clinical, detector.as_deref(), chart.as_deref())
        }
        Command::Synth { n, seed, out, config, png_dir } => synth(n, seed, out.as_path(), config.as_deref(), png_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
