use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use collrad::config::ScenarioConfig;
use collrad::scenario::{self, SweepAxis};

#[derive(Parser)]
#[command(
    name = "collrad",
    version,
    about = "Collective decay of inverted emitter arrays"
)]
struct Cli {
    /// Worker threads (default: $COLLRAD_THREADS, then all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate one scenario and write CSV + JSON sidecar
    Run(ScenarioArgs),
    /// Repeat a scenario along one parameter axis
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// n | a | drop_k | method
        #[arg(long)]
        axis: String,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Dump collective rates, positions and couplings
    Modes(ScenarioArgs),
    /// Time a scenario and compare with the exact solver when small
    Bench {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
    },
}

/// Flags mirror the config keys and override the file.
#[derive(Args)]
struct ScenarioArgs {
    /// key = value scenario file
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    geometry: Option<String>,
    /// Total emitter count
    #[arg(long)]
    n: Option<String>,
    /// Emitters per axis
    #[arg(long)]
    n1d: Option<String>,
    /// Lattice constant in units of λ₀
    #[arg(long, short = 'a')]
    spacing: Option<String>,
    #[arg(long)]
    polarization: Option<String>,
    #[arg(long)]
    environment: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// none | default | light_cone | threshold:<v> | drop_k:<k>
    #[arg(long)]
    truncation: Option<String>,
    #[arg(long)]
    t_max: Option<String>,
    #[arg(long)]
    points: Option<String>,
    #[arg(long)]
    rtol: Option<String>,
    #[arg(long)]
    atol: Option<String>,
    #[arg(long)]
    max_step: Option<String>,
    #[arg(long)]
    initial_step: Option<String>,
    #[arg(long)]
    dense_output: Option<String>,
    #[arg(long)]
    fixed_step: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    oracle_cap: Option<String>,
    /// Output directory
    #[arg(long, short)]
    output: Option<String>,
}

impl ScenarioArgs {
    fn resolve(self) -> collrad::Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::from_file(p)?,
            None => ScenarioConfig::default(),
        };
        let pairs = [
            ("geometry", self.geometry),
            ("n", self.n),
            ("n1d", self.n1d),
            ("spacing", self.spacing),
            ("polarization", self.polarization),
            ("environment", self.environment),
            ("method", self.method),
            ("truncation", self.truncation),
            ("t_max", self.t_max),
            ("points", self.points),
            ("rtol", self.rtol),
            ("atol", self.atol),
            ("max_step", self.max_step),
            ("initial_step", self.initial_step),
            ("dense_output", self.dense_output),
            ("fixed_step", self.fixed_step),
            ("max_steps", self.max_steps),
            ("oracle_cap", self.oracle_cap),
            ("output", self.output),
        ];
        cfg.apply_overrides(pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("serializable report")
    );
}

fn execute(cli: Cli) -> collrad::Result<i32> {
    scenario::configure_threads(cli.threads)?;
    match cli.cmd {
        Cmd::Run(args) => {
            let report = scenario::run(&args.resolve()?)?;
            print_json(&report);
            Ok(0)
        }
        Cmd::Sweep {
            scenario: args,
            axis,
            values,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = args.resolve()?;
            let report = scenario::sweep(&cfg, axis, &values)?;
            for p in &report.points {
                match &p.outcome {
                    Ok(r) => eprintln!(
                        "[{}] {}={} ok ({:.2}s)",
                        p.index,
                        axis.name(),
                        p.value,
                        r.wall_time_s
                    ),
                    Err(e) => eprintln!("[{}] {}={} failed: {e}", p.index, axis.name(), p.value),
                }
            }
            println!("{}", report.summary.display());
            Ok(report.exit_code())
        }
        Cmd::Modes(args) => {
            print_json(&scenario::modes_report(&args.resolve()?)?);
            Ok(0)
        }
        Cmd::Bench {
            scenario: args,
            repeat,
        } => {
            print_json(&scenario::bench(&args.resolve()?, repeat)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(scenario::exit_code(&e) as u8)
        }
    }
}
