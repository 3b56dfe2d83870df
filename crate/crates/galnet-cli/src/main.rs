//! Command-line driver: synthetic data generation, training, evaluation,
//! and affinity heatmap export.
//!
//! Exit codes: 0 success, 2 config/parse error, 3 runtime numeric error,
//! 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use galnet::checkpoint;
use galnet::config::{parse_str, RunConfig};
use galnet::data::{generate_synthetic, load_attribute_dataset, load_dataset, save_dataset, Dataset};
use galnet::eval::{aggregate_affinity, evaluate, export_heatmap, format_report_table};
use galnet::model::{build_model, Variant};
use galnet::train::{train, StepMetrics};
use galnet::Error;

#[derive(Parser)]
#[command(name = "galnet", version, about = "Graph-attention multi-task attribute recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-correlation dataset and write it to disk
    GenData(GenDataArgs),
    /// Train a model; metrics stream to stdout, checkpoint to disk
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print the accuracy table
    Eval(EvalArgs),
    /// Export the mean attention matrix of a checkpoint as CSV + PGM
    ExportAffinity(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Run configuration file
    #[arg(long)]
    config: PathBuf,
    /// Which side of the train/eval split to write
    #[arg(long, default_value = "train")]
    split: String,
    /// Output path for the raw image container
    #[arg(long)]
    out_images: PathBuf,
    /// Output path for the annotation file
    #[arg(long)]
    out_annotations: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file
    #[arg(long)]
    config: PathBuf,
    /// Override the config variant (baseline|gal-j|gal-c|gal-p)
    #[arg(long)]
    variant: Option<String>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Baseline checkpoint supplying the frozen feature net (required for gal-c)
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Where to write the trained checkpoint
    #[arg(long, default_value = "checkpoint.json")]
    checkpoint_out: PathBuf,
}

#[derive(Args)]
struct DataSource {
    /// Raw image container written by gen-data
    #[arg(long)]
    images: Option<PathBuf>,
    /// Directory of graymap images named by the annotation file
    #[arg(long)]
    image_dir: Option<PathBuf>,
    /// Annotation file (required with --images or --image-dir)
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Run configuration for synthetic data (used when no files are given)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic split to use with --config
    #[arg(long, default_value = "eval")]
    split: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataSource,
}

#[derive(Args)]
struct ExportArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataSource,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_pgm: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::ExportAffinity(args) => run_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Parse { .. } => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

// Re-parses the config text with CLI overrides injected, so defaults that
// depend on the overridden keys (weight decay by variant, data seed)
// resolve exactly as if the file had said so.
fn load_config(
    path: &PathBuf,
    variant: Option<&str>,
    seed: Option<u64>,
) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines: Vec<String> = Vec::new();
    if let Some(v) = variant {
        lines.push(format!("variant = {v}"));
    }
    if let Some(s) = seed {
        lines.push(format!("seed = {s}"));
    }
    for raw in text.lines() {
        let key = raw.split('#').next().unwrap_or("").split('=').next().unwrap_or("").trim();
        if (key == "variant" && variant.is_some()) || (key == "seed" && seed.is_some()) {
            continue;
        }
        lines.push(raw.to_string());
    }
    parse_str(&lines.join("\n"))
}

fn split_synthetic(run: &RunConfig, split: &str) -> Result<Dataset, Error> {
    let full = generate_synthetic(&run.synthetic)?;
    let (train_set, eval_set) = full.split(run.synthetic.n_train)?;
    match split {
        "train" => Ok(train_set),
        "eval" => Ok(eval_set),
        other => Err(Error::Config(format!("split: expected train|eval, got '{other}'"))),
    }
}

fn gen_data(args: GenDataArgs) -> Result<(), Error> {
    let run = load_config(&args.config, None, args.seed)?;
    let set = split_synthetic(&run, &args.split)?;
    save_dataset(&set, &args.out_images, &args.out_annotations)?;
    println!(
        "wrote {} samples ({} attributes) to {} + {}",
        set.n(),
        set.m(),
        args.out_images.display(),
        args.out_annotations.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let run = load_config(&args.config, args.variant.as_deref(), args.seed)?;
    let variant = run.train.variant;
    if variant == Variant::GalC && args.init_from.is_none() {
        return Err(Error::Config(
            "gal-c trains only the correlation net; --init-from <baseline-checkpoint> is required".into(),
        ));
    }

    let (train_set, eval_set) = match (&run.data_images, &run.data_annotations) {
        (Some(imgs), Some(anns)) => (load_dataset(imgs, anns)?, None),
        (None, None) => {
            let full = generate_synthetic(&run.synthetic)?;
            let (t, e) = full.split(run.synthetic.n_train)?;
            (t, Some(e))
        }
        _ => {
            return Err(Error::Config(
                "data_images and data_annotations must be given together".into(),
            ))
        }
    };

    let (model, registry) = build_model(&run.model, run.train.seed)?;
    if let Some(src_path) = &args.init_from {
        let source = checkpoint::read_file(src_path)?;
        checkpoint::load_feature_net(&model, &registry, &source)?;
    }

    println!("{}", StepMetrics::HEADER);
    train(
        &model,
        &registry,
        &train_set,
        eval_set.as_ref(),
        &run.train,
        |m| println!("{}", m.to_line()),
    )?;
    checkpoint::save(&model, &registry, &args.checkpoint_out)?;
    eprintln!("checkpoint written to {}", args.checkpoint_out.display());
    Ok(())
}

fn resolve_dataset(data: &DataSource, input_dims: (usize, usize, usize)) -> Result<Dataset, Error> {
    match (&data.images, &data.image_dir, &data.annotations, &data.config) {
        (Some(images), None, Some(annotations), None) => load_dataset(images, annotations),
        (None, Some(dir), Some(annotations), None) => {
            load_attribute_dataset(dir, annotations, (input_dims.0, input_dims.1))
        }
        (None, None, None, Some(cfg_path)) => {
            let run = load_config(cfg_path, None, None)?;
            split_synthetic(&run, &data.split)
        }
        _ => Err(Error::Config(
            "give --images + --annotations, or --image-dir + --annotations, or --config".into(),
        )),
    }
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let dataset = resolve_dataset(&args.data, model.config.input)?;
    let report = evaluate(&model, &dataset)?;
    print!("{}", format_report_table(&report, &dataset.attribute_names));
    println!("samples: {}", report.n_samples);
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<(), Error> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let dataset = resolve_dataset(&args.data, model.config.input)?;
    let summary = aggregate_affinity(&model, &dataset)?;
    export_heatmap(&summary, &args.out_csv, &args.out_pgm)?;
    println!(
        "wrote {} and {}",
        args.out_csv.display(),
        args.out_pgm.display()
    );
    Ok(())
}
