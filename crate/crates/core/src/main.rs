use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spinbath::harness::{self, Engine, ExperimentConfig, KernelRule};
use spinbath::Error;

#[derive(Parser)]
#[command(name = "spinbath", version, about = "Central-spin detector in a disordered spin bath")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every engine over the J_x sweep and write a run directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Estimate J_x from the fidelity period of a fresh bath.
    EstimateJx {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        target_jx: f64,
        /// Write the JSON report here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Disorder-averaged coupling statistics per J_x, as CSV.
    Stats {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the CSV here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config file, then print it with defaults filled in.
    ValidateConfig { path: PathBuf },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults are used for anything it omits.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_bath: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    jx_list: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_engine)]
    engines: Option<Vec<Engine>>,
    #[arg(long)]
    t_final_short: Option<f64>,
    #[arg(long)]
    t_final_long: Option<f64>,
    #[arg(long)]
    n_grid: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    /// Use p = q = 2√C from each bath instead of the fixed rates.
    #[arg(long)]
    variance_kernel: bool,
    /// Skip the long horizon.
    #[arg(long)]
    short_only: bool,
}

fn parse_engine(s: &str) -> Result<Engine, String> {
    match s {
        "exact" => Ok(Engine::Exact),
        "nmme" => Ok(Engine::Nmme),
        "markovian" => Ok(Engine::Markovian),
        _ => Err(format!("unknown engine {s:?} (exact, nmme, markovian)")),
    }
}

impl ConfigArgs {
    fn load(self) -> spinbath::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(n_bath, seed, realizations, jx_list, engines, t_final_short, t_final_long, n_grid, p, q);
        if self.variance_kernel {
            cfg.kernel_rule = KernelRule::Variance;
        }
        if self.short_only {
            cfg.long_horizon = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_or_print(out: Option<PathBuf>, text: &str) -> spinbath::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> spinbath::Result<ExitCode> {
    match cli.command {
        Command::Run { cfg, out } => {
            let cfg = cfg.load()?;
            let result = harness::run_experiment(&cfg, &out)?;
            let failed = result.manifest.failures();
            eprintln!(
                "{} runs, {failed} failed; results in {}",
                result.manifest.runs.len(),
                result.dir.display()
            );
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
        Command::EstimateJx { cfg, target_jx, out } => {
            let cfg = cfg.load()?;
            let report = harness::run_jx_estimation(&cfg, target_jx)?;
            write_or_print(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            Ok(match report.outcome {
                harness::EstimationOutcome::Failed => ExitCode::from(3),
                _ => ExitCode::SUCCESS,
            })
        }
        Command::Stats { cfg, out } => {
            let cfg = cfg.load()?;
            let table = harness::statistics_table(&cfg)?;
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            write_or_print(out, &String::from_utf8_lossy(&buf))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateConfig { path } => {
            let cfg = ExperimentConfig::from_file(&path)?;
            print!("{}", cfg.to_toml_string());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                e if e.is_numerical() => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
