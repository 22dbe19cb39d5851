use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xdet::harness::{self, RunConfig};

#[derive(Parser)]
#[command(name = "xdet", version, about = "Cross-domain exemplar detection on a synthetic benchmark")]
struct Cli {
    /// INI configuration file; unset keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Inputs {
    /// Gallery file (defaults to the one in the output directory).
    #[arg(long, value_name = "PATH")]
    gallery: Option<PathBuf>,
    /// Adaptation model file.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate models, renders, training pairs and test scenes.
    Synth,
    /// Train the adaptation on the generated pairs.
    Train,
    /// Build the clean-render exemplar gallery.
    Gallery,
    /// Fit per-exemplar calibration from random patches.
    Calibrate(Inputs),
    /// Detect objects in PGM images.
    Detect {
        #[command(flatten)]
        inputs: Inputs,
        /// Images to scan (defaults to the generated test scenes).
        images: Vec<PathBuf>,
    },
    /// Score detections: AP, retrieval accuracy, pose error.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_name = "PATH")]
        detections: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        annotations: Option<PathBuf>,
    },
    /// Run the family/threshold and gallery-size ablations.
    Ablate,
}

fn config(cli: &Cli) -> xdet::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cfg: &RunConfig, verb: Verb) -> xdet::Result<String> {
    match verb {
        Verb::Synth => harness::cmd_synth(cfg),
        Verb::Train => harness::cmd_train(cfg),
        Verb::Gallery => harness::cmd_gallery(cfg),
        Verb::Calibrate(i) => harness::cmd_calibrate(cfg, i.gallery.as_deref(), i.model.as_deref()),
        Verb::Detect { inputs, images } => {
            let images = if images.is_empty() { harness::default_images(cfg) } else { images };
            harness::cmd_detect(cfg, inputs.gallery.as_deref(), inputs.model.as_deref(), &images)
        }
        Verb::Eval {
            inputs,
            detections,
            annotations,
        } => harness::cmd_eval(
            cfg,
            detections.as_deref(),
            annotations.as_deref(),
            inputs.gallery.as_deref(),
            inputs.model.as_deref(),
        )
        .map(|(_, line)| line),
        Verb::Ablate => harness::cmd_ablate(cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    // A config file that cannot be read or parsed is a usage error.
    let cfg = match config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cfg, cli.verb) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
