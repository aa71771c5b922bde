use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cdftn::checkpoint;
use cdftn::config::{DomainSource, ExperimentConfig, Overrides, OUTPUT_ROOT_ENV};
use cdftn::data;
use cdftn::pipeline::{self, RunPaths};
use cdftn::records;
use cdftn_core::nets::ClassifierVariant;
use cdftn_core::trainer::Mode;
use clap::{Args, Parser, Subcommand};

/// Cross-domain liveness feature translation for face anti-spoofing.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured synthetic domains to PNG folders under `<output>/data`.
    GenerateData(Common),
    /// Stage 1: train the translation networks, checkpointing every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Ignore existing checkpoints instead of resuming from the newest one.
        #[arg(long)]
        fresh: bool,
    },
    /// Render pseudo-labeled target-style images with the final stage-1 checkpoint.
    Synthesize(Common),
    /// Stage 2: train the classifier on pseudo-labeled images, plus the source-only baseline.
    TrainClassifier(Common),
    /// Score both classifiers on every target test split; write `eval.csv` and plots.
    Evaluate(Common),
    /// Check the run directory and summarise `eval.csv` into `report.md`.
    Report(Common),
    /// Every stage in sequence.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fresh: bool,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Flags override its values.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// ss2st, ss2bt or ss2mt.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Source domain: a synthetic domain id, or `id=folder`.
    #[arg(long)]
    source: Option<String>,
    /// Comma-separated target domains, same syntax as `--source`.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; overrides the config file and the output-root variable.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    samples_per_domain: Option<usize>,
    /// Stage-2 classifier: r (binary) or l (with spoof-cue and embedding heads).
    #[arg(long, value_parser = parse_variant)]
    variant: Option<ClassifierVariant>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s.to_ascii_lowercase().as_str() {
        "ss2st" => Ok(Mode::SS2ST),
        "ss2bt" => Ok(Mode::SS2BT),
        "ss2mt" => Ok(Mode::SS2MT),
        _ => Err(format!("unknown mode `{}` (expected ss2st, ss2bt or ss2mt)", s)),
    }
}

fn parse_variant(s: &str) -> Result<ClassifierVariant, String> {
    match s.to_ascii_lowercase().as_str() {
        "r" => Ok(ClassifierVariant::R),
        "l" => Ok(ClassifierVariant::L),
        _ => Err(format!("unknown classifier variant `{}` (expected r or l)", s)),
    }
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let flags = Overrides {
            mode: self.mode,
            source: self.source.as_deref().map(DomainSource::parse).transpose()?,
            targets: self
                .targets
                .as_ref()
                .map(|t| t.iter().map(|s| DomainSource::parse(s)).collect::<Result<Vec<_>>>())
                .transpose()?,
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
            samples_per_domain: self.samples_per_domain,
            classifier_variant: self.variant,
        };
        ExperimentConfig::resolve(self.config.as_deref(), &flags, std::env::var(OUTPUT_ROOT_ENV).ok())
    }
}

fn generate_data(cfg: &ExperimentConfig, run: &RunPaths) -> Result<()> {
    let mut total = 0;
    for src in std::iter::once(&cfg.source).chain(&cfg.targets) {
        if let DomainSource::Synthetic { domain_id, .. } = src {
            let d = data::load_domain(cfg, src)?;
            let dir = run.data().join(format!("d{}", domain_id));
            total += data::export_dataset(&d, &dir)?;
            log::info!("domain {}: {} live, {} spoof -> {}", domain_id, d.live_count(), d.spoof_count(), dir.display());
        }
    }
    println!("wrote {} images under {}", total, run.data().display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(c) => {
            let cfg = c.resolve()?;
            generate_data(&cfg, &RunPaths::new(&cfg.output_dir))
        }
        Command::Train { common, fresh } => {
            let cfg = common.resolve()?;
            let run = RunPaths::new(&cfg.output_dir);
            pipeline::write_config_copy(&cfg, &run)?;
            let d = pipeline::prepare_domains(&cfg)?;
            let state = pipeline::run_stage1(&cfg, &d, &run, !fresh)?;
            println!("stage 1 finished after {} epochs, {} steps", state.epochs_done, state.history.len());
            Ok(())
        }
        Command::Synthesize(c) => {
            let cfg = c.resolve()?;
            let run = RunPaths::new(&cfg.output_dir);
            let bundle = checkpoint::load_bundle(&run.final_bundle(&cfg)).context("loading the final stage-1 checkpoint")?;
            let d = pipeline::prepare_domains(&cfg)?;
            let p = pipeline::run_synthesis(&cfg, &bundle, &d, &run)?;
            println!("wrote {} pseudo-labeled images to {}", p.len(), run.pseudo().display());
            Ok(())
        }
        Command::TrainClassifier(c) => {
            let cfg = c.resolve()?;
            let run = RunPaths::new(&cfg.output_dir);
            let pseudo = pipeline::load_pseudo(&run.pseudo()).context("loading pseudo-labeled images; run `synthesize` first")?;
            let d = pipeline::prepare_domains(&cfg)?;
            pipeline::run_classifiers(&cfg, &pseudo, &d, &run)?;
            println!("classifiers saved under {}", run.root.join("models").display());
            Ok(())
        }
        Command::Evaluate(c) => {
            let cfg = c.resolve()?;
            let run = RunPaths::new(&cfg.output_dir);
            let d = pipeline::prepare_domains(&cfg)?;
            let rows = pipeline::run_evaluation(&cfg, &d, &run)?;
            print!("{}", pipeline::render_report(&rows));
            Ok(())
        }
        Command::Report(c) => {
            let cfg = c.resolve()?;
            let run = RunPaths::new(&cfg.output_dir);
            pipeline::verify_run(&cfg, &run)?;
            let rows = records::read_eval_csv(&run.eval())?;
            let text = pipeline::render_report(&rows);
            std::fs::write(run.report(), &text)?;
            print!("{}", text);
            Ok(())
        }
        Command::Run { common, fresh } => {
            let cfg = common.resolve()?;
            let (manifest, rows) = pipeline::run_pipeline(&cfg, !fresh)?;
            if manifest.status != "completed" {
                bail!("run did not complete");
            }
            print!("{}", pipeline::render_report(&rows));
            println!("total {:.0}s", manifest.total_seconds());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
