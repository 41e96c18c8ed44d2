use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use semiseg::checkpoint::ModelSection;
use semiseg::config::TrainConfig;
use semiseg::harness::{self, SplitName};

#[derive(Parser)]
#[command(
    name = "semiseg",
    version,
    about = "Semi-supervised two-modality segmentation on synthetic tube images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides a single configuration key, e.g. `--override loss.lambda_max=0.5`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its split manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (overrides data.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a student/teacher pair.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory (overrides output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of the dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// labeled, unlabeled or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// teacher or student.
        #[arg(long, default_value = "teacher")]
        model: String,
        /// Directory for the report file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full method and its two ablations over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut config = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    for o in &common.overrides {
        config
            .apply_assignment(o)
            .with_context(|| format!("--override {o}"))?;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out } => {
            let mut config = load_config(&common)?;
            if let Some(dir) = out {
                config.dataset_dir = dir;
            }
            let splits = harness::cmd_generate(&config)?;
            println!(
                "{}: {} labeled, {} unlabeled, {} test",
                config.dataset_dir.display(),
                splits.labeled_ids.len(),
                splits.unlabeled_ids.len(),
                splits.test_ids.len()
            );
        }
        Command::Train {
            common,
            resume,
            out,
        } => {
            let mut config = load_config(&common)?;
            if let Some(dir) = out {
                config.output_dir = dir;
            }
            let outcome = harness::cmd_train(&config, resume.as_deref())?;
            let d = outcome.final_report.dsc();
            println!(
                "{}: test dsc {:.4} ± {:.4}",
                outcome.run_dir.display(),
                d.mean,
                d.std
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            split,
            model,
            out,
        } => {
            let config = load_config(&common)?;
            let split =
                SplitName::parse(&split).ok_or_else(|| anyhow!("unknown split `{split}`"))?;
            let section =
                ModelSection::parse(&model).ok_or_else(|| anyhow!("unknown model `{model}`"))?;
            let path = out.map(|dir| -> Result<PathBuf> {
                std::fs::create_dir_all(&dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                Ok(dir.join(format!(
                    "report_{}_{}.tsv",
                    split.as_str(),
                    section.as_str()
                )))
            });
            let path = path.transpose()?;
            let report = harness::cmd_evaluate(
                &checkpoint,
                &config.dataset_dir,
                split,
                section,
                path.as_deref(),
            )?;
            match path {
                Some(p) => println!("{}: dsc {:.4}", p.display(), report.dsc().mean),
                None => print!("{}", report.to_tsv()),
            }
        }
        Command::Ablate { common, out } => {
            let mut config = load_config(&common)?;
            if let Some(dir) = out {
                config.output_dir = dir;
            }
            let report = harness::cmd_ablate(&config)?;
            print!("{}", report.to_tsv());
            println!(
                "plot data: {}",
                Path::new(&config.output_dir)
                    .join(harness::PLOT_FILE)
                    .display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semiseg: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
