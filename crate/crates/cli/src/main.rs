use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfb_cli::{cmd_bench, cmd_equivalence, cmd_gradcheck, cmd_train, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "mfb", about = "Factorized bilinear pooling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// `key = value` config file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every registered operator and network.
    Gradcheck(Common),
    /// Factorization and MLB specialization suites.
    Equivalence(Common),
    /// Synthetic-task training (single run or sweep).
    Train(Common),
    /// Parameter counts and fusion throughput.
    Bench(Common),
    /// Prints the canonical config with every default.
    Defaults,
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let load = |c: &Common| match &c.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    };
    match cli.command {
        Command::Gradcheck(c) => {
            let o = cmd_gradcheck(&load(&c)?, &c.out)?;
            o.messages.iter().for_each(|m| println!("{m}"));
            println!("gradcheck: {}", if o.pass { "pass" } else { "FAIL" });
            Ok(o.exit_code())
        }
        Command::Equivalence(c) => {
            let o = cmd_equivalence(&load(&c)?, &c.out)?;
            o.messages.iter().for_each(|m| println!("{m}"));
            println!("equivalence: {}", if o.pass { "pass" } else { "FAIL" });
            Ok(o.exit_code())
        }
        Command::Train(c) => {
            let r = cmd_train(&load(&c)?, &c.out)?;
            for run in &r.runs {
                println!(
                    "{:28} accuracy {:.4}  p50 range {:.4}  mean spread {:.4}",
                    run.label,
                    run.final_accuracy,
                    run.percentiles.p50_range,
                    run.percentiles.mean_spread
                );
            }
            Ok(0)
        }
        Command::Bench(c) => {
            let rows = cmd_bench(&load(&c)?, &c.out)?;
            for r in rows {
                println!(
                    "{} m={} n={} k={} o={} d={} params={} inter={} fwd={:.0}ns bwd={:.0}ns",
                    r.operator,
                    r.m,
                    r.n,
                    r.k,
                    r.o,
                    r.d,
                    r.projection_param_count,
                    r.intermediate_dim,
                    r.forward_ns_per_call,
                    r.backward_ns_per_call
                );
            }
            Ok(0)
        }
        Command::Defaults => {
            print!("{}", RunConfig::default().emit());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
