use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use byzmesh_cli::checks::{run_suite, CheckOptions, Suite};
use byzmesh_cli::config::{load_config, ConfigError, Experiment};
use byzmesh_cli::experiment::run_experiment;
use byzmesh_core::trainer::write_atomic;
use byzmesh_core::AggregatorSpec;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "byzmesh", version, about = "Byzantine-resilient decentralized SGD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (aggregator, attack, seed) combination of a config.
    Run {
        config: PathBuf,
        /// Output directory; overrides `run.out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds; override `run.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads. Results do not depend on this.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check measured runs against the theoretical bounds.
    Check {
        /// contraction, consensus, convergence, fixed_point, counterexamples or all.
        suite: Suite,
        /// Rule under test for the contraction suite, e.g. `ios:q=auto`.
        #[arg(long)]
        rule: Option<String>,
        /// Random instances per topology and adversary.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        /// Random topologies for the contraction and convergence suites.
        #[arg(long, default_value_t = 5)]
        topologies: usize,
        /// Comma-separated seeds for the consensus suite.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Offset for the generated topologies.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `<suite>.json` reports.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    Ok(match threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f),
        None => f(),
    })
}

fn run(config: PathBuf, out: Option<PathBuf>, seeds: Option<Vec<u64>>, threads: Option<usize>) -> anyhow::Result<bool> {
    let mut cfg = load_config(&config)?;
    if let Some(out) = out {
        cfg.run.out = out;
    }
    if let Some(seeds) = seeds {
        cfg.run.seeds = seeds;
    }
    let exp = Experiment::resolve(cfg).with_context(|| format!("in {}", config.display()))?;
    let out_dir = exp.config.run.out.clone();
    let sweep = run_experiment(&exp, &out_dir, threads)?;
    for r in &sweep.rows {
        let acc = r.accuracy.map_or("-".to_string(), |a| format!("{:.2}%", 100.0 * a));
        println!("{:<28} {:<16} acc {acc:>7}  H {:.3e}  loss {:.4e}", r.aggregator, r.attack, r.h, r.loss);
    }
    println!("wrote {} runs to {}", sweep.rows.iter().map(|r| r.seeds.len()).sum::<usize>(), out_dir.display());
    Ok(true)
}

fn check(suite: Suite, rule: Option<String>, mut opts: CheckOptions, out: Option<PathBuf>, threads: Option<usize>) -> anyhow::Result<bool> {
    opts.rule = rule
        .map(|r| r.parse::<AggregatorSpec>().map_err(|e| ConfigError::new("--rule", e.to_string())))
        .transpose()?;
    let reports = with_threads(threads, || run_suite(suite, &opts))??;
    let mut all = true;
    for r in &reports {
        for line in &r.lines {
            println!("  {line}");
        }
        println!("{} {}", if r.passed { "PASS" } else { "FAIL" }, r.suite);
        all &= r.passed;
        if let Some(dir) = &out {
            let path = dir.join(format!("{}.json", r.suite));
            write_atomic(&path, serde_json::to_string_pretty(r)?.as_bytes())
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(all)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            threads,
        } => run(config, out, seeds, threads),
        Command::Check {
            suite,
            rule,
            samples,
            topologies,
            seeds,
            seed,
            out,
            threads,
        } => {
            let mut opts = CheckOptions {
                samples,
                topologies,
                seed,
                ..CheckOptions::default()
            };
            if let Some(s) = seeds {
                opts.seeds = s;
            }
            check(suite, rule, opts, out, threads)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(byzmesh_cli::exit_code(&e))
        }
    }
}
