use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use homogen::harness::{
    run_analyticity, run_corrector_report, run_diff_bounds, run_three_ball, summary, ExperimentConfig, Report,
    SolutionStore,
};
use homogen::Error;

#[derive(Parser)]
#[command(name = "homogen", version, about = "Periodic homogenization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or load the corrector hierarchy and report it.
    Correctors(Common),
    /// Large-scale analyticity: decay of u minus its fitted heterogeneous polynomial.
    Analyticity(Common),
    /// Decay of lattice differences of solutions on growing cubes.
    DiffBounds(Common),
    /// Three-ball inequality over a random-boundary corpus.
    ThreeBall(Common),
    /// Print headline numbers of report files.
    Summary {
        /// A report JSON or a directory of them.
        path: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON or TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for hierarchy and solution caches.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// First boundary seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(c: &Common) -> homogen::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output.out = o.display().to_string();
    }
    if let Some(d) = &c.cache_dir {
        cfg.output.cache_dir = Some(d.display().to_string());
    }
    if let Some(t) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> homogen::Result<bool> {
    let (c, which) = match cmd {
        Command::Summary { path } => {
            let rows = summary(&path)?;
            println!("report,quantity,value,target,pass");
            let mut ok = true;
            for r in rows {
                ok &= r.pass;
                let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6e}"));
                println!("{},{},{},{},{}", r.report, r.quantity, f(r.value), f(r.target), r.pass);
            }
            return Ok(ok);
        }
        Command::Correctors(c) => (c, 0),
        Command::Analyticity(c) => (c, 1),
        Command::DiffBounds(c) => (c, 2),
        Command::ThreeBall(c) => (c, 3),
    };
    let cfg = load(&c)?;
    if let Some(d) = &cfg.output.cache_dir {
        std::fs::create_dir_all(d)?;
    }
    let store = SolutionStore::new(cfg.output.cache_dir.as_ref().map(PathBuf::from));
    let report = match which {
        0 => Report::Correctors(run_corrector_report(&cfg, &store)?),
        1 => Report::Analyticity(run_analyticity(&cfg, &store)?),
        2 => Report::DiffBounds(run_diff_bounds(&cfg, &store)?),
        _ => Report::ThreeBall(run_three_ball(&cfg, &store)?),
    };
    let (json, csv) = report.write(&PathBuf::from(&cfg.output.out))?;
    println!("{} -> {}, {}", report.name(), json.display(), csv.display());
    for r in homogen::harness::summarize(&report) {
        println!("  {} = {:?} (target {:?}) {}", r.quantity, r.value, r.target, if r.pass { "ok" } else { "FAIL" });
    }
    Ok(report.pass())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e @ (Error::NotConverged { .. } | Error::Cancellation { .. })) => {
            eprintln!("solver failure: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
