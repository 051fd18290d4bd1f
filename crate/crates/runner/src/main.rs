use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybridlab::config::{ExperimentConfig, Suite};
use hybridlab::{output, report, run};
use hybridlab_core::config::ModelConfig;
use hybridlab_core::corpus::Corpus;
use hybridlab_core::params::Parameters;
use hybridlab_core::train::{grad_check, SampleSpec};
use hybridlab_core::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "hybridlab", version, about = "Train tiny hybrid language models and ablate their components")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) the configured model and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run ablation suites; `--suite` overrides the config's list.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "suite", value_enum)]
        suites: Vec<Suite>,
    },
    /// Hidden-state metrics only.
    Metrics {
        #[arg(long)]
        config: PathBuf,
    },
    /// Combine finished runs into one report.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Directory for report.json and report.txt; printed only if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients in 64-bit.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Condition(_) | Error::Json(_) => 2,
        e if e.is_numeric() => 3,
        _ => 4,
    }
}

fn with_suites(mut config: ExperimentConfig, suites: Vec<Suite>) -> Result<ExperimentConfig> {
    if !suites.is_empty() {
        config.suites = suites;
        config.validate()?;
    }
    Ok(config)
}

fn print_manifest(m: &run::RunManifest) {
    println!("config {}", m.config_hash);
    println!("{} conditions, {} files in {}", m.conditions.len(), m.files.len(), m.config.output_dir.display());
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let config = ExperimentConfig::from_path(&config)?;
            std::fs::create_dir_all(&config.output_dir)?;
            let corpus = Corpus::load(&config.corpus_path)?;
            let mut written = Vec::new();
            run::obtain_model(&config, &corpus, &mut written)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Ablate { config, suites } => {
            let config = with_suites(ExperimentConfig::from_path(&config)?, suites)?;
            let m = run::run(&config)?;
            print_manifest(&m);
            let results = output::read_results(&config.output_dir)?;
            print!("{}", report::emit_paper_shaped_report(&[results]).render());
        }
        Command::Metrics { config } => {
            let config = with_suites(ExperimentConfig::from_path(&config)?, vec![Suite::Metrics])?;
            let m = run::run(&config)?;
            print_manifest(&m);
        }
        Command::Report { runs, out } => {
            let results = runs.iter().map(|d| output::read_results(d)).collect::<Result<Vec<_>>>()?;
            let rep = report::emit_paper_shaped_report(&results);
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    output::write_json(&dir.join("report.json"), &rep)?;
                    std::fs::write(dir.join("report.txt"), rep.render())?;
                    println!("wrote {}", dir.display());
                }
                None => print!("{}", rep.render()),
            }
        }
        Command::GradCheck { config, per_tensor } => {
            let config = ExperimentConfig::from_path(&config)?;
            let (params, model) = if config.model.d_model > 32 {
                let micro = ModelConfig::micro(config.model.layout.clone());
                println!("d_model {} too wide for a full check; using a micro model", config.model.d_model);
                (Parameters::<f32>::init(&micro)?, micro)
            } else if let Some(path) = &config.checkpoint_path {
                checkpoint::load(path)?
            } else {
                (Parameters::<f32>::init(&config.model)?, config.model.clone())
            };
            let n = 13.min(model.max_seq_len + 1);
            let tokens: Vec<u32> = (0..n as u32).map(|i| (i * 7 + 3) % model.vocab_size as u32).collect();
            let spec = SampleSpec {
                per_tensor,
                seed: config.global_seed,
                ..SampleSpec::default()
            };
            let rep = grad_check(&params.cast::<f64>(), &model, &tokens, spec)?;
            for (family, err) in &rep.per_family {
                println!("{family:?}: {err:.3e}");
            }
            println!(
                "max relative error {:.3e} at {} over {} coordinates",
                rep.max_rel_error, rep.worst_path, rep.n_coords
            );
            if rep.max_rel_error >= 1e-4 {
                return Err(Error::GradientMismatch {
                    path: rep.worst_path,
                    rel_error: rep.max_rel_error,
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
