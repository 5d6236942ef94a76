use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pamsurv::Error;
use pamsurv_cli::{cmd_evaluate, cmd_experiment, cmd_fit, cmd_simulate, ExperimentConfig, ModelKind};

#[derive(Parser, Debug)]
#[command(name = "pamsurv", version, about = "Piecewise exponential additive models on a point-cloud survival benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the simulation and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of training subjects.
    #[arg(long = "n-train")]
    n_train: Option<usize>,
}

impl Common {
    fn load(&self) -> pamsurv::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.sim.seed = s;
            cfg.train.seed = s;
        }
        if let Some(n) = self.n_train {
            cfg.sim.n_train = n;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset into a directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model on a simulated dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// One of km, pam_baseline, pam_correct, deeppam.
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score fitted models on the test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model files written by `fit`.
        #[arg(required = true)]
        models: Vec<PathBuf>,
    },
    /// Run the replicated benchmark.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        replicates: Option<usize>,
        /// Restricts the models (repeatable).
        #[arg(long)]
        model: Vec<ModelKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if err.is_numeric() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Simulate { common, out } => {
            let cfg = common.load()?;
            cfg.sim.validate()?;
            let manifest = cmd_simulate(&cfg.sim, &out)?;
            println!(
                "wrote {} training, {} validation and {} test subjects to {}",
                manifest.train_ids[1] - manifest.train_ids[0],
                manifest.val_ids[1] - manifest.val_ids[0],
                manifest.test_ids[1] - manifest.test_ids[0],
                out.display()
            );
        }
        Command::Fit {
            common,
            data,
            model,
            out,
        } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let path = cmd_fit(&data, model, &cfg, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate { data, out, models } => {
            let eval = cmd_evaluate(&data, &models, &out)?;
            for s in &eval.scores {
                println!("{:<13} ibs {:?} rel {:?}", s.model.name(), s.ibs, s.rel_ibs);
            }
        }
        Command::Experiment {
            common,
            replicates,
            model,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(r) = replicates {
                cfg.n_replicates = r;
            }
            if !model.is_empty() {
                cfg.models = model;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let report = cmd_experiment(&cfg)?;
            for rep in &report.replicates {
                if let Some(e) = &rep.error {
                    eprintln!("replicate {} (seed {}) failed: {e}", rep.replicate, rep.seed);
                } else if !rep.converged {
                    eprintln!("replicate {} (seed {}) did not converge", rep.replicate, rep.seed);
                }
            }
            println!("wrote {}", cfg.output_dir.join("table2.csv").display());
            if report.failed() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
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
    match run(cli) {
        Ok(code) => code,
        Err(e) => exit_for(&e),
    }
}
