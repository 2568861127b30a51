//! Command-line orchestration for the armorbench pipeline.

pub mod config;
pub mod error;
pub mod steps;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{load_config, parse_config, RunConfig};
pub use error::CliError;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "ARMORBENCH_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "armorbench", version, about = "Adversarial robustness workbench")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// L-infinity attack budget.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Prefix log lines with timestamps.
    #[arg(long, global = true)]
    pub timestamps: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or load the dataset and write the train/val split.
    GenData,
    /// Train the baseline dual-encoder classifier.
    TrainBase,
    /// Attack the validation set with every variant.
    Attack,
    /// Build the adversarial training and validation sets.
    BuildAdvset,
    /// Fine-tune the baseline on the adversarial set.
    Retrain,
    /// Evaluate baseline and fine-tuned models on clean and adversarial data.
    Eval,
    /// Extract encoder features and train the four detector families.
    TrainDetectors,
    /// Learning-rate by depth/leaves sensitivity sweep.
    Sweep,
    /// Collect results into report.json.
    Report,
    /// Run every stage from gen-data to report.
    Pipeline,
    /// Print the fully expanded configuration.
    DumpConfig,
}

impl Cli {
    pub fn overrides(&self) -> config::Overrides {
        config::Overrides {
            seed: self.global.seed,
            output_dir: self.global.out_dir.clone(),
            threads: self.global.threads,
            epsilon: self.global.epsilon,
            timestamps: self.global.timestamps,
        }
    }

    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let path = self
            .global
            .config
            .as_ref()
            .ok_or_else(|| CliError::config(None, format!("no config given (use --config or {CONFIG_ENV})")))?;
        let mut cfg = load_config(path)?;
        self.overrides().apply(&mut cfg)?;
        Ok(cfg)
    }
}

/// Line-oriented logger; timestamps only when asked for.
pub fn init_logging(timestamps: bool) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    b.format(move |buf, rec| {
        if timestamps {
            write!(buf, "{} ", buf.timestamp())?;
        }
        writeln!(buf, "[{}] {}", rec.level(), rec.args())
    });
    let _ = b.try_init();
}

/// Run one subcommand inside a pool sized by the config.
pub fn run(command: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::config(Some("threads"), e.to_string()))?;
    pool.install(|| match command {
        Command::GenData => steps::gen_data(cfg),
        Command::TrainBase => steps::train_base(cfg),
        Command::Attack => steps::attack(cfg).map(drop),
        Command::BuildAdvset => steps::build_advset(cfg),
        Command::Retrain => steps::retrain(cfg),
        Command::Eval => steps::eval(cfg).map(drop),
        Command::TrainDetectors => steps::train_detectors(cfg).map(drop),
        Command::Sweep => steps::sweep(cfg).map(drop),
        Command::Report => steps::report(cfg).map(drop),
        Command::Pipeline => steps::pipeline(cfg).map(drop),
        Command::DumpConfig => {
            print!("{}", config::dump(cfg));
            Ok(())
        }
    })
}
