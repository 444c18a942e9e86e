//! Command-line front door: verification and the three benchmark families.
//!
//! Subcommands:
//!   verify       run the exactness suites and exit nonzero on any failure
//!   bench-attn   decode-shaped attention microbenchmark sweep
//!   bench-e2e    end-to-end decoding throughput sweep on the toy model
//!   tree-bench   single-level vs two-level sharing on the tree workload
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 usage error.

mod config;

use anyhow::Result;
use clap::Parser;

use config::{Overrides, Precision, RunConfig};
use hydragen_core::attention::fault;
use hydragen_core::bench::{emit_results, run_attention_sweep, run_e2e_sweep, run_tree_bench};
use hydragen_core::numerics::Scalar;
use hydragen_core::verify;

#[derive(Debug, Parser)]
#[command(
    name = "hydragen",
    version,
    about = "Shared-prefix attention engine and benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Run the engine-equivalence, LSE-additivity, tree-exactness,
    /// combine-stability and prefill-equivalence suites.
    Verify {
        /// Test-only sabotage: drop the combine rescaling factors to prove
        /// the suites detect a broken merge.
        #[arg(long, hide = true)]
        inject_combine_bug: bool,
    },
    /// Time the attention operation alone over the configured grid.
    BenchAttn,
    /// Time end-to-end greedy decoding on the toy model.
    BenchE2e,
    /// Compare single-level and two-level sharing on the tree workload.
    TreeBench,
}

fn main() {
    let cli = Cli::parse();
    let run = match cli.overrides.resolve() {
        Ok(run) => run,
        Err(err) => {
            eprintln!("error: {:#}", err);
            std::process::exit(2);
        }
    };
    match dispatch(&cli.command, &run) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {:#}", err);
            std::process::exit(1);
        }
    }
}

/// Routes the subcommand, after pinning the thread pool and logging the
/// run's provenance line.
fn dispatch(command: &Command, run: &RunConfig) -> Result<i32> {
    if run.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(run.threads)
            .build_global()
            .ok(); // the pool can already exist under tests
    }
    eprintln!(
        "run: seed={} precision={} threads={} version={}",
        run.seed,
        run.precision,
        if run.threads == 0 {
            rayon::current_num_threads()
        } else {
            run.threads
        },
        env!("CARGO_PKG_VERSION"),
    );

    match run.precision {
        Precision::Single => dispatch_typed::<f32>(command, run),
        Precision::Double => dispatch_typed::<f64>(command, run),
    }
}

fn dispatch_typed<T: Scalar>(command: &Command, run: &RunConfig) -> Result<i32> {
    match command {
        Command::Verify { inject_combine_bug } => {
            if *inject_combine_bug {
                eprintln!("verify: injecting the combine bug (expect failures)");
                fault::set_inject_combine_bug(true);
            }
            let report = verify::run_all::<T>(run.seed)?;
            fault::set_inject_combine_bug(false);
            print!("{}", report.render());
            if report.all_passed() {
                Ok(0)
            } else {
                let worst = report
                    .suites
                    .iter()
                    .filter(|s| !s.passed())
                    .max_by(|a, b| a.max_deviation.total_cmp(&b.max_deviation))
                    .expect("some suite failed");
                eprintln!(
                    "verify failed: {} deviated {:.3e} (tol {:.0e}) at {}",
                    worst.name, worst.max_deviation, worst.tolerance, worst.worst_case
                );
                Ok(1)
            }
        }
        Command::BenchAttn => {
            let records = run_attention_sweep::<T>(&run.sweep)?;
            emit_results(&records, &run.output)?;
            eprintln!("wrote {} records to {}", records.len(), run.output.display());
            Ok(0)
        }
        Command::BenchE2e => {
            let records = run_e2e_sweep::<T>(&run.sweep, &run.model)?;
            emit_results(&records, &run.output)?;
            eprintln!("wrote {} records to {}", records.len(), run.output.display());
            Ok(0)
        }
        Command::TreeBench => {
            if run.tree.is_degenerate() {
                eprintln!(
                    "warning: tree workload has fewer than two subtrees below the root; \
                     the single-level and two-level variants coincide structurally"
                );
            }
            let records = run_tree_bench::<T>(&run.tree, &run.sweep, &run.model)?;
            emit_results(&records, &run.output)?;
            eprintln!("wrote {} records to {}", records.len(), run.output.display());
            Ok(0)
        }
    }
}
