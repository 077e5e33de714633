use std::path::PathBuf;
use std::process::ExitCode;

use aspectmix_core::pipeline::{Pipeline, PipelineConfig, DEFAULT_CONFIG, OUTPUT_ROOT_ENV};
use aspectmix_core::Error;
use clap::{Parser, Subcommand};

/// Per-aspect reward curation, LoRA fine-tuning and mixture-of-LoRA
/// composition on a toy diffusion model.
#[derive(Parser, Debug)]
#[command(name = "aspectmix", version)]
struct Cli {
    /// Pipeline config file (TOML). The built-in defaults are used when absent.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `output_dir` and the output-root variable.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Fail (exit 4) instead of skipping aspects whose manifest is empty.
    #[arg(long, global = true)]
    strict: bool,

    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the annotated default config.
    InitConfig,
    /// Train the base denoiser on procedural scenes.
    TrainBase,
    /// Generate, score and filter candidates into per-aspect manifests.
    Curate,
    /// Fine-tune one adapter set per non-empty manifest.
    Finetune,
    /// Train the mixture routers (and the balance-weight-0 ablation).
    Compose,
    /// Write the direct-merge checkpoint.
    Merge,
    /// Score every variant on the held-out prompts.
    Eval,
    /// Print average gate coefficients per layer.
    Report,
    /// Every stage in order.
    Run,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Format { .. } | Error::Io(_) => 2,
        Error::Training { .. } => 3,
        Error::Curation(_) => 4,
        _ => 1,
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override {s:?} is not KEY=VALUE")))
        })
        .collect()
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut overrides = parse_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if cli.strict {
        overrides.push(("curation.strict".into(), "true".into()));
    }
    match &cli.config {
        Some(path) => PipelineConfig::load(path, &overrides),
        None => PipelineConfig::from_toml_with_overrides(DEFAULT_CONFIG, &overrides),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Command::InitConfig = cli.command {
        print!("{DEFAULT_CONFIG}");
        return Ok(());
    }
    let config = load_config(cli)?;
    let pipeline = match &cli.out {
        Some(dir) => Pipeline::at(config, dir)?,
        None => Pipeline::new(config)?,
    };
    log::info!(
        "output directory {} (root variable {OUTPUT_ROOT_ENV})",
        pipeline.out_dir().display()
    );
    match cli.command {
        Command::InitConfig => unreachable!(),
        Command::TrainBase => {
            let (_, report) = pipeline.train_base()?;
            println!(
                "base loss: first decile {:.6}, last decile {:.6}",
                report.first_decile(),
                report.last_decile()
            );
        }
        Command::Curate => {
            let outcome = pipeline.curate()?;
            println!("{} candidates", outcome.candidates.len());
            for m in &outcome.manifests {
                println!("{:<14} {} entries", m.aspect.label(), m.entries.len());
            }
        }
        Command::Finetune => {
            for set in pipeline.finetune()? {
                println!("trained adapters for {}", set.aspect);
            }
        }
        Command::Compose => {
            let two = pipeline.compose()?;
            println!(
                "routers trained on {} examples ({} experts)",
                two.training_examples,
                two.mol.num_experts()
            );
        }
        Command::Merge => {
            pipeline.merge()?;
            println!("wrote {}", pipeline.merged_path().display());
        }
        Command::Eval => print!("{}", pipeline.evaluate()?.table()),
        Command::Report => print!("{}", pipeline.report_gates()?.text),
        Command::Run => {
            let (eval, gates) = pipeline.run_all()?;
            print!("{}\n{}", eval.table(), gates.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
