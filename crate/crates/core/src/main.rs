use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedmc::data::write_triplet_csv;
use fedmc::harness::config::SyntheticSpec;
use fedmc::harness::{self, generate_synthetic, Algo, Overrides, RunConfig};
use fedmc::kernels::RegKind;
use fedmc::{Error, Result};

#[derive(Parser)]
#[command(name = "fedmc", version, about = "Federated matrix completion simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write metrics, checkpoint and id map.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Generate a synthetic ratings file (triplet CSV) plus its ground truth.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a config and report the penalty threshold.
    Check {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
}

fn parse_reg(s: &str) -> std::result::Result<RegKind, String> {
    match s {
        "l2" | "ridge" => Ok(RegKind::Ridge),
        "l1" => Ok(RegKind::L1),
        other => Err(format!("unknown regularizer `{other}` (expected l2 or l1)")),
    }
}

#[derive(clap::Args, Default)]
struct Flags {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["fedmc-admm", "fedmavg"]))]
    algo: Option<String>,
    #[arg(long, value_parser = parse_reg)]
    reg: Option<RegKind>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    inner_iters: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed_split: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_sample: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Flags {
    fn overrides(&self) -> Result<Overrides> {
        Ok(Overrides {
            algo: self.algo.as_deref().map(str::parse::<Algo>).transpose()?,
            reg: self.reg,
            beta: self.beta,
            inner_iters: self.inner_iters,
            lambda: self.lambda,
            gamma: self.gamma,
            clients: self.clients,
            sample_size: self.sample_size,
            rank: self.rank,
            rounds: self.rounds,
            seed_split: self.seed_split,
            seed_init: self.seed_init,
            seed_sample: self.seed_sample,
            eval_every: self.eval_every,
            out: self.out.clone(),
        })
    }
}

fn load_config(path: &Path, flags: &Flags) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(&flags.overrides()?);
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, flags } => {
            let cfg = load_config(&config, &flags)?;
            let (report, out) = harness::run(&cfg)?;
            let last = report.records.last().expect("at least one round");
            println!(
                "{} rounds: objective {:.6e}, test RMSE {:.6}",
                last.round, last.objective, last.rmse_test
            );
            println!("metrics: {}", out.metrics.display());
            if let Some(p) = &out.smoothed {
                println!("smoothed: {}", p.display());
            }
            println!("checkpoint: {}", out.checkpoint.display());
            if let Some(p) = &out.idmap {
                println!("id map: {}", p.display());
            }
        }
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io { path: spec.clone(), source: e })?;
            let spec: SyntheticSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let data = generate_synthetic(&spec)?;
            write_triplet_csv(&data.matrix, &out)?;
            let truth_path = out.with_extension("truth.json");
            let truth = serde_json::to_string(&data.truth).map_err(|e| Error::Serde(e.to_string()))?;
            std::fs::write(&truth_path, truth).map_err(|e| Error::Io { path: truth_path.clone(), source: e })?;
            println!(
                "{}x{} with {} observed entries: {} (ground truth {})",
                data.matrix.rows(),
                data.matrix.cols(),
                data.matrix.nnz(),
                out.display(),
                truth_path.display()
            );
        }
        Command::Check { config, flags } => {
            let cfg = load_config(&config, &flags)?;
            match harness::check(&cfg)? {
                Some(b) => {
                    let (first, second) = b.inputs.terms();
                    println!("config ok");
                    println!("beta = {}", b.beta);
                    println!("threshold terms: {first:.6e}, {second:.6e}");
                    println!("beta_lower_bound = {:.6e}", b.lower_bound);
                    match b.warning() {
                        Some(w) => println!("warning: {w}"),
                        None => println!("beta exceeds the threshold"),
                    }
                }
                None => println!("config ok ({})", cfg.algo),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
