//! `doublepass`: batch front end for the trajectory, filter comparison and
//! ensemble scan experiments.

mod commands;
mod config;
mod error;
mod output;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use doublepass_core::ScanTask;
use serde::Serialize;
use serde_json::{Map, Value};

use config::{CompareConfig, ScanSection, TrajectoryConfig};
use error::CliError;
use output::{Manifest, Staging};

pub const OUTPUT_ROOT_ENV: &str = "DOUBLEPASS_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "doublepass", version, about = "Double-pass magnetometry simulations")]
struct Cli {
    /// TOML file with one section per subcommand, e.g. `[crb-scan]`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory. Defaults to `$DOUBLEPASS_OUTPUT_ROOT/<subcommand>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Maximum number of worker threads for ensemble runs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Also write SVG plots next to the CSV files.
    #[arg(long, global = true)]
    plot: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Matched-noise single and double pass trajectories.
    Trajectory(TrajectoryArgs),
    /// Exact and projection filters on a shared record.
    CompareFilters(CompareArgs),
    /// Finite-difference Cramer-Rao bound vs F.
    CrbScan(ScanArgs),
    /// Particle-filter field uncertainty vs F.
    ParticleScan(ScanArgs),
    /// Particle-filter bias vs prior width D.
    BiasScan(ScanArgs),
    /// Re-run the command recorded in a manifest and compare the CSVs.
    VerifyManifest {
        /// Output directory containing manifest.json.
        dir: PathBuf,
    },
}

#[derive(Args, Debug, Serialize)]
struct TrajectoryArgs {
    #[arg(long, visible_alias = "spin")]
    f: Option<f64>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, visible_alias = "seed")]
    master_seed: Option<u64>,
    /// euler_ito or heun_stratonovich
    #[arg(long)]
    scheme: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct CompareArgs {
    #[arg(long, visible_alias = "spin")]
    f: Option<f64>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, visible_alias = "seed")]
    master_seed: Option<u64>,
    #[arg(long)]
    floor_fraction: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct ScanArgs {
    /// Comma-separated spin values.
    #[arg(long, value_delimiter = ',')]
    f_values: Option<Vec<f64>>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Fixed M (requires --k).
    #[arg(long)]
    m: Option<f64>,
    /// Fixed K (requires --m).
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    b_true: Option<f64>,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, visible_alias = "seed")]
    master_seed: Option<u64>,
    #[arg(long)]
    delta: Option<f64>,
    /// shared_innovation or shared_record
    #[arg(long)]
    crb_mode: Option<String>,
    #[arg(long)]
    richardson: Option<bool>,
    /// Prior width of the particle scan.
    #[arg(long)]
    d: Option<f64>,
    /// Comma-separated prior widths of the bias scan.
    #[arg(long, value_delimiter = ',')]
    d_values: Option<Vec<f64>>,
    #[arg(long)]
    np: Option<usize>,
    /// shared or per_particle
    #[arg(long)]
    innovation: Option<String>,
}

/// A fully resolved run.
enum Job {
    Trajectory(TrajectoryConfig),
    Compare(CompareConfig),
    Scan(ScanTask, ScanSection),
    Bias(ScanSection),
}

impl Job {
    fn name(&self) -> &'static str {
        match self {
            Job::Trajectory(_) => "trajectory",
            Job::Compare(_) => "compare-filters",
            Job::Scan(ScanTask::Crb, _) => "crb-scan",
            Job::Scan(_, _) => "particle-scan",
            Job::Bias(_) => "bias-scan",
        }
    }

    fn config_value(&self) -> Result<Value, CliError> {
        let v = match self {
            Job::Trajectory(c) => serde_json::to_value(c),
            Job::Compare(c) => serde_json::to_value(c),
            Job::Scan(_, s) | Job::Bias(s) => serde_json::to_value(s),
        };
        v.map_err(|e| CliError::Other(e.into()))
    }

    /// Rebuilds a job from a manifest's command and config.
    fn from_recorded(command: &str, config: Value) -> Result<Self, CliError> {
        let Value::Object(map) = config else {
            return Err(CliError::Config("manifest config is not an object".into()));
        };
        let none = Map::new();
        Ok(match command {
            "trajectory" => Job::Trajectory(config::resolve(TrajectoryConfig::default(), map, none)?),
            "compare-filters" => Job::Compare(config::resolve(CompareConfig::default(), map, none)?),
            "crb-scan" => Job::Scan(ScanTask::Crb, config::resolve(ScanSection::crb(), map, none)?),
            "particle-scan" => Job::Scan(ScanTask::Particle, config::resolve(ScanSection::particle(), map, none)?),
            "bias-scan" => Job::Bias(config::resolve(ScanSection::bias(), map, none)?),
            other => return Err(CliError::Config(format!("unknown command `{other}` in manifest"))),
        })
    }

    fn run(&self, out: &mut Staging, workers: Option<usize>, plots: bool) -> Result<(), CliError> {
        match self {
            Job::Trajectory(c) => commands::trajectory(c, out, plots),
            Job::Compare(c) => commands::compare_filters(c, out, plots),
            Job::Scan(task, s) => commands::scan(*task, s, workers, out, plots),
            Job::Bias(s) => commands::bias(s, workers, out, plots),
        }
    }
}

fn flags<T: Serialize>(args: &T) -> Result<Map<String, Value>, CliError> {
    match serde_json::to_value(args).map_err(|e| CliError::Other(e.into()))? {
        Value::Object(mut m) => {
            // Enum-valued flags arrive as plain strings, which is also how
            // the config types deserialize them.
            m.retain(|_, v| !v.is_null());
            Ok(m)
        }
        _ => Ok(Map::new()),
    }
}

fn resolve_job(cli: &Cli) -> Result<Job, CliError> {
    let section = |name: &str| match &cli.config {
        Some(path) => config::load_section(path, name),
        None => Ok(Map::new()),
    };
    Ok(match &cli.command {
        Command::Trajectory(a) => {
            Job::Trajectory(config::resolve(TrajectoryConfig::default(), section("trajectory")?, flags(a)?)?)
        }
        Command::CompareFilters(a) => {
            Job::Compare(config::resolve(CompareConfig::default(), section("compare-filters")?, flags(a)?)?)
        }
        Command::CrbScan(a) => Job::Scan(ScanTask::Crb, config::resolve(ScanSection::crb(), section("crb-scan")?, flags(a)?)?),
        Command::ParticleScan(a) => Job::Scan(
            ScanTask::Particle,
            config::resolve(ScanSection::particle(), section("particle-scan")?, flags(a)?)?,
        ),
        Command::BiasScan(a) => Job::Bias(config::resolve(ScanSection::bias(), section("bias-scan")?, flags(a)?)?),
        Command::VerifyManifest { .. } => unreachable!("verify-manifest has no job config"),
    })
}

fn default_out(command: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("output"));
    root.join(command)
}

fn execute(job: &Job, dest: &Path, workers: Option<usize>, plots: bool) -> Result<PathBuf, CliError> {
    let mut staging = Staging::new(dest)?;
    job.run(&mut staging, workers, plots)?;
    staging.commit(job.name(), job.config_value()?, plots)
}

fn verify(dir: &Path, workers: Option<usize>) -> Result<(), CliError> {
    let manifest = Manifest::read(dir)?;
    let job = Job::from_recorded(&manifest.command, manifest.config.clone())?;
    let scratch = std::env::temp_dir().join(format!("doublepass-verify-{}", std::process::id()));
    if scratch.exists() {
        std::fs::remove_dir_all(&scratch)?;
    }
    let result = (|| {
        execute(&job, &scratch, workers, false)?;
        let mut mismatched = Vec::new();
        let mut checked = 0;
        for entry in manifest.files.iter().filter(|e| e.name.ends_with(".csv")) {
            let original = std::fs::read(dir.join(&entry.name))?;
            let rerun = std::fs::read(scratch.join(&entry.name)).unwrap_or_default();
            checked += 1;
            if original == rerun {
                println!("OK        {}", entry.name);
            } else {
                println!("MISMATCH  {}", entry.name);
                mismatched.push(entry.name.clone());
            }
        }
        if mismatched.is_empty() {
            println!("{checked} CSV files reproduced byte-identically");
            Ok(())
        } else {
            Err(CliError::Verify(format!("{} of {checked} CSV files differ: {}", mismatched.len(), mismatched.join(", "))))
        }
    })();
    let _ = std::fs::remove_dir_all(&scratch);
    result
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.workers == Some(0) {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    if let Command::VerifyManifest { dir } = &cli.command {
        return verify(dir, cli.workers);
    }
    let job = resolve_job(&cli)?;
    let dest = cli.out.clone().unwrap_or_else(|| default_out(job.name()));
    let written = execute(&job, &dest, cli.workers, cli.plot)?;
    println!("{}", written.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
