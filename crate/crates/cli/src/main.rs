use std::path::PathBuf;
use std::process::ExitCode;

use cfparse::{CliError, FeedbackSource, Pipeline, PipelineConfig};
use cfparse_core::cflearn::{CfObjective, OslSchedule};
use cfparse_core::experiment::SystemSpec;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfparse", version, about = "Semantic parser training from logged bandit feedback")]
struct Cli {
    /// TOML pipeline configuration; defaults apply without one.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `workdir` from the configuration.
    #[arg(short, long, global = true)]
    workdir: Option<PathBuf>,
    /// Redo stages whose artifacts are already current.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    /// Run for this seed only instead of every configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate, deduplicate and split the corpus.
    GenCorpus(SeedArg),
    /// Train the baseline parser on the supervised split.
    TrainSup(SeedArg),
    /// Log the baseline's top outputs on the log questions.
    MakeLog(SeedArg),
    /// Reward the logged outputs against gold queries.
    SimulateFeedback(SeedArg),
    /// Collect statement judgments on the logged outputs over HTTP.
    ServeFeedback {
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `service.addr`.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Fine-tune the baseline on a bandit log.
    TrainCf {
        #[command(flatten)]
        seed: SeedArg,
        /// dpm, dpm+osl, dpm+t, dpm+t+osl or b2s; defaults to `objective`.
        #[arg(long)]
        objective: Option<String>,
        /// never, once, every-epoch, every-validation or every-minibatch.
        #[arg(long)]
        schedule: Option<String>,
        /// Train every system listed under `systems`.
        #[arg(long, conflicts_with_all = ["objective", "schedule"])]
        all: bool,
        #[arg(long, value_enum, default_value = "simulated")]
        feedback: FeedbackSource,
    },
    /// Compare two models on the test split: `baseline`, a system name, or a checkpoint directory.
    Eval {
        a: String,
        b: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pool the trained systems of all seeds into a significance-tested table.
    Report,
    /// Every stage with simulated feedback for every seed, then the report.
    Pipeline,
    /// The full in-memory experiment, including the every-minibatch study.
    Experiment,
}

fn seeds(config: &PipelineConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| config.seeds.clone(), |s| vec![s])
}

fn parse_objective(s: &str) -> Result<CfObjective, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| CliError::Config(format!("unknown objective `{s}`")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = cli.workdir {
        config.workdir = w;
    }
    if let Command::ServeFeedback { addr: Some(a), .. } = &cli.command {
        config.service.addr = a.clone();
    }
    config.validate()?;
    let mut p = Pipeline::new(config);
    p.force = cli.force;
    let c = p.config.clone();
    match cli.command {
        Command::Config => print!("{}", c.to_toml()),
        Command::GenCorpus(s) => {
            for seed in seeds(&c, s.seed) {
                p.gen_corpus(seed)?;
            }
        }
        Command::TrainSup(s) => {
            for seed in seeds(&c, s.seed) {
                p.train_sup(seed)?;
            }
        }
        Command::MakeLog(s) => {
            for seed in seeds(&c, s.seed) {
                p.make_log(seed)?;
            }
        }
        Command::SimulateFeedback(s) => {
            for seed in seeds(&c, s.seed) {
                p.simulate_feedback(seed)?;
            }
        }
        Command::ServeFeedback { seed, .. } => p.serve_feedback(seed.unwrap_or(c.seeds[0]))?,
        Command::TrainCf {
            seed,
            objective,
            schedule,
            all,
            feedback,
        } => {
            let specs = if all {
                c.systems.clone()
            } else {
                let objective = objective.as_deref().map(parse_objective).transpose()?.unwrap_or(c.objective);
                let schedule = match schedule {
                    Some(s) => s.parse::<OslSchedule>().map_err(|e| CliError::Config(e.to_string()))?,
                    None => c.schedule,
                };
                vec![SystemSpec::new(objective, schedule)]
            };
            for s in seeds(&c, seed.seed) {
                for spec in &specs {
                    p.train_cf(s, spec, feedback)?;
                }
            }
        }
        Command::Eval { a, b, seed } => {
            for s in seeds(&c, seed) {
                print!("{}", p.eval(s, &a, &b)?.to_text());
            }
        }
        Command::Report => print!("{}", p.report()?.to_text()),
        Command::Pipeline => print!("{}", p.run_all()?.to_text()),
        Command::Experiment => print!("{}", p.experiment()?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
