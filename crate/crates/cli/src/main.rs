use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vmpadmm_cli::{run_batch, run_solve, CliError, Corpus, ProblemSource, RunConfig, VerifyFlags};

#[derive(Parser)]
#[command(name = "vmpadmm", version, about = "Variable-metric proximal ADMM with certified convergence bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem, writing a CSV iteration log and a JSON report.
    Solve {
        /// Problem JSON file or `gen:<kind>:<dims>:<seed>`.
        #[arg(long)]
        problem: String,
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run every instance of a corpus file.
    Batch {
        /// JSON file `{"instances": [{"problem": ..., "theta"?: ..., "schedule"?: ...}]}`.
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for per-instance logs and `aggregate.json`.
        #[arg(long)]
        out_dir: PathBuf,
        /// Default theta for entries without one.
        #[arg(long, default_value_t = 1.0)]
        theta: f64,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Schedule JSON; defaults to H = I, R = S = 0.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    sigma_margin: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    rho: f64,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Comma-separated subset of hpe,bounds,memberships,fejer (or all/none).
    #[arg(long, default_value = "all")]
    verify: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples per ergodic eps-subdifferential test.
    #[arg(long, default_value_t = 200)]
    eps_samples: usize,
}

impl Common {
    fn config(self, problem: ProblemSource, theta: f64) -> Result<RunConfig, CliError> {
        let cfg = RunConfig {
            schedule: self.schedule,
            sigma_margin: self.sigma_margin,
            max_iters: self.max_iters,
            rho: self.rho,
            eps: self.eps,
            seed: self.seed,
            eps_samples: self.eps_samples,
            verify: self.verify.parse::<VerifyFlags>()?,
            ..RunConfig::new(problem, theta)
        };
        cfg.with_env_seed()
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Solve { problem, theta, log, report, common } => {
            let mut cfg = common.config(ProblemSource::parse(&problem), theta)?;
            cfg.log = Some(log);
            cfg.report = Some(report);
            let (code, rep) = run_solve(&cfg)?;
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(msg) = &rep.aborted {
                eprintln!("aborted: {msg}");
            }
            println!(
                "{}: {} after {} iterations (pointwise {}, ergodic {})",
                rep.problem,
                if rep.pass { "verified" } else { "VERIFICATION FAILED" },
                rep.iterations,
                rep.stopping.pointwise_status,
                rep.stopping.ergodic_status
            );
            Ok(code)
        }
        Command::Batch { corpus, out_dir, theta, common } => {
            let template = common.config(ProblemSource::Generator(String::new()), theta)?;
            let corpus_file = Corpus::load(&corpus)?;
            let base = corpus.parent().map(PathBuf::from).unwrap_or_default();
            let agg = run_batch(&corpus_file, &base, &template, Some(&out_dir))?;
            for r in &agg.results {
                match &r.error {
                    Some(e) => println!("[{}] {}: error: {e}", r.index, r.problem),
                    None => println!("[{}] {}: {}", r.index, r.problem, r.status),
                }
            }
            println!("{}/{} passed, {} failed, {} errors", agg.passed, agg.instances, agg.failed, agg.errored);
            Ok(agg.exit_code())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
