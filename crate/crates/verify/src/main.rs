use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nczw_core::dyadic_model::DyadicGrid;
use nczw_core::hardy_atoms::atom_suite;
use nczw_core::kernels_operators::{hormander_modulus, KernelSpec, Orientation};
use nczw_core::weights::WeightSpec;
use nczw_verify::config::ExperimentConfig;
use nczw_verify::error::{Context, Result, VerifyError};
use nczw_verify::report::{Bound, ConstantReport};
use nczw_verify::suites::{parse_suites, run};

#[derive(Parser)]
#[command(name = "nczw", about = "Noncommutative Calderón-Zygmund experiments on dyadic grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact identities and contracts; prints one line per check.
    Check(RunArgs),
    /// Every constant sweep; writes report.json and ratios.csv to --out.
    Sweep(RunArgs),
    /// Writes the JSON report to --out (or stdout), or dumps a single
    /// artifact for the suites `atoms`, `modulus` and `weight`.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Suite name, comma-separated list, or `all`.
    #[arg(long)]
    suite: Option<String>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the ratio table here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Kernel for `--suite modulus`.
    #[arg(long, default_value = "hilbert")]
    kernel: String,
    /// Weight for `--suite atoms` and `--suite weight`.
    #[arg(long, default_value = "const:1")]
    weight: String,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 6)]
    depth: usize,
    #[arg(long, default_value_t = 1)]
    m: usize,
    /// Number of atoms for `--suite atoms`.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Exponent of the modulus for `--suite modulus`.
    #[arg(long, default_value_t = 2.0)]
    r: f64,
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn write(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| VerifyError::Report(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_checks(report: &ConstantReport) {
    for c in &report.checks {
        let op = match c.bound {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {}/{}: worst {:.3e} {op} {:.3e} over {} samples",
            c.suite, c.name, c.worst, c.limit, c.samples
        );
    }
    for s in &report.stability {
        if s.gated {
            let verdict = if s.stability.stable { "PASS" } else { "FAIL" };
            println!(
                "{verdict} {}/{} stable [{} {} m={}]: spread {:.3} trend {:.3}",
                s.suite, s.quantity, s.weight, s.kernel, s.m, s.stability.spread, s.stability.trend
            );
        }
    }
    for c in &report.caveats {
        println!("NOTE {c}");
    }
}

fn verdict(report: &ConstantReport) -> ExitCode {
    if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run_args(args: &RunArgs, default_suites: &str) -> Result<ConstantReport> {
    let cfg = load(&args.config, args.seed)?;
    let suites = parse_suites(args.suite.as_deref().unwrap_or(default_suites))?;
    run(&cfg, &suites)
}

fn artifact(args: &ReportArgs) -> Result<Option<String>> {
    let grid = || DyadicGrid::new(args.dim, args.depth).context(|| "grid".into());
    let weight = || -> Result<_> {
        let spec: WeightSpec = args.weight.parse().context(|| format!("weight `{}`", args.weight))?;
        spec.build(grid()?).context(|| format!("weight {spec}"))
    };
    Ok(Some(match args.suite.as_str() {
        "weight" => weight()?.to_json(),
        "atoms" => {
            let atoms = atom_suite(grid()?, args.m, &weight()?, args.count, args.seed.unwrap_or(0))
                .context(|| "atom suite".into())?;
            serde_json::to_string_pretty(&atoms).map_err(|e| VerifyError::Report(e.to_string()))?
        }
        "modulus" => {
            let spec: KernelSpec = args.kernel.parse().context(|| format!("kernel `{}`", args.kernel))?;
            let kernel = spec.build(args.dim).context(|| format!("kernel {spec}"))?;
            let grid = grid()?;
            let level = args.depth.saturating_sub(2).max(1);
            let centre = grid.cube_of(grid.cell_of_coords([(1 << args.depth) / 2; 2]), level);
            hormander_modulus(&kernel, grid, args.r, &[centre], level.saturating_sub(1).max(1), Orientation::Standard)
                .context(|| format!("modulus of {spec}"))?
                .to_csv()
        }
        _ => return Ok(None),
    }))
}

fn report(args: &ReportArgs) -> Result<ExitCode> {
    if let Some(text) = artifact(args)? {
        write(args.out.as_deref(), &text)?;
        return Ok(ExitCode::SUCCESS);
    }
    let config = args.config.as_deref().ok_or_else(|| VerifyError::Config("--config is required".into()))?;
    let cfg = load(config, args.seed)?;
    let report = run(&cfg, &parse_suites(&args.suite)?)?;
    write(args.out.as_deref(), &format!("{}\n", report.to_json()))?;
    if let Some(csv) = &args.csv {
        write(Some(csv), &report.ratios_csv()?)?;
    }
    Ok(verdict(&report))
}

fn main_inner(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Check(args) => {
            let report = run_args(&args, "identities,cuculescu,lemmas,kernels")?;
            print_checks(&report);
            if let Some(out) = &args.out {
                write(Some(out), &format!("{}\n", report.to_json()))?;
            }
            Ok(verdict(&report))
        }
        Command::Sweep(args) => {
            let report = run_args(&args, "all")?;
            print_checks(&report);
            let cfg = ExperimentConfig::load(&args.config)?;
            let dir = args.out.clone().or(cfg.out).unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir)?;
            write(Some(&dir.join("report.json")), &format!("{}\n", report.to_json()))?;
            write(Some(&dir.join("ratios.csv")), &report.ratios_csv()?)?;
            for s in &report.summaries {
                println!("{}/{}: max {:.4} median {:.4} over {} rows", s.suite, s.quantity, s.max, s.median, s.rows);
            }
            Ok(verdict(&report))
        }
        Command::Report(args) => report(&args),
    }
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("NCZW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
        }
    }
    match main_inner(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
