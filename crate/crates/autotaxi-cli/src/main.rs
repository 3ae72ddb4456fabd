use std::path::PathBuf;
use std::process::ExitCode;

use autotaxi::sim::Policy;
use autotaxi_cli::commands::{output_root, OUT_ENV};
use autotaxi_cli::{cmd_compare, cmd_plot_data, cmd_run, cmd_validate, CliError, Overrides};
use clap::{Args, Parser, Subcommand};

/// Multi-aircraft auto-taxiing simulator.
#[derive(Parser)]
#[command(name = "autotaxi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario under its policy.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Also write the reference spline coefficients.
        #[arg(long)]
        splines: bool,
    },
    /// Run safe_taxi, naive and wait_and_go on the same scenario.
    Compare {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Derive figure series from a run or comparison directory.
    PlotData {
        /// Directory written by `run` or `compare`.
        #[arg(long = "run")]
        run_dir: PathBuf,
    },
    /// Check a scenario file and print the resolved scenario.
    Validate {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// safe_taxi, naive or wait_and_go.
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. `solver.gamma=0.2` or `aircraft[1].priority=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct OutArgs {
    /// Output root; run directories are created inside it.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

impl ScenarioArgs {
    fn overrides(&self) -> Result<Overrides, CliError> {
        let mut o = Overrides {
            policy: self.policy,
            seed: self.seed,
            ..Overrides::default()
        };
        for s in &self.set {
            o.push_assignment(s)?;
        }
        Ok(o)
    }
}

fn execute(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Run { scenario, out, splines } => {
            let report = cmd_run(&scenario.scenario, &output_root(out.out.as_deref()), &scenario.overrides()?, splines)?;
            let m = &report.metrics;
            println!("{}", report.dir.display());
            match m.comp_time {
                Some(t) => println!("{}: complete in {t:.1} s, avg_acc_var {:.4}", m.policy, m.avg_acc_var),
                None => println!("{}: {:?}", m.policy, report.status),
            }
            Ok(report.exit_code())
        }
        Command::Compare { scenario, out } => {
            let report = cmd_compare(&scenario.scenario, &output_root(out.out.as_deref()), &scenario.overrides()?)?;
            println!("{}", report.dir.display());
            print!("{}", report.table);
            Ok(report.exit_code())
        }
        Command::PlotData { run_dir } => {
            for path in cmd_plot_data(&run_dir)? {
                println!("{}", path.display());
            }
            Ok(0)
        }
        Command::Validate { scenario } => {
            let s = cmd_validate(&scenario.scenario, &scenario.overrides()?)?;
            print!("{}", autotaxi_cli::scenario_to_toml(&s)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
