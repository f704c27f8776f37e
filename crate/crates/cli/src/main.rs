//! Batch experiment runner: validate coefficients, build cell and
//! homogenized tables, solve the PDE systems, run Monte Carlo sweeps and
//! write machine-readable reports.
//!
//! Exit codes: 0 on success, 1 on a stage error, 2 when a sweep decay
//! verdict fails.

use clap::{Parser, Subcommand};
use homlab::harness::pipeline::{
    run_pipeline, stage_cells, stage_pde, stage_table, stage_validate, write_outputs, RunOptions,
};
use homlab::harness::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "homlab",
    about = "Numerical laboratory for periodic homogenization of quasilinear parabolic systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the Monte Carlo seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides output.dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Cache directory for stage artifacts
    #[arg(long, global = true)]
    cache: Option<PathBuf>,

    /// Worker threads (defaults to the number of cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output format override: json, csv or plotdata
    #[arg(long, global = true)]
    format: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check Assumption (H) on a dense sample and print the hypothesis report
    Validate,
    /// Build (or load from cache) the cell table and print solve residuals
    Cells,
    /// Build the homogenized coefficient table and print the ellipticity report
    Table,
    /// Solve the limit, regularized and oscillatory systems
    Pde,
    /// One Monte Carlo run at the first sweep entries (ε, n)
    Simulate,
    /// Full (ε, n) sweep with decay verdicts
    Sweep,
    /// Everything: full pipeline, report files in the output directory
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, String> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| "--config <path> is required".to_string())?;
    let src = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&src).map_err(|e| e.to_string())?;
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.display().to_string();
    }
    if let Some(fmt) = &cli.format {
        cfg.output.formats = vec![fmt.clone()];
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, String> {
    let cfg = load_config(cli)?;
    let opts = RunOptions {
        cache_dir: cli.cache.clone(),
        threads: cli.threads,
        seed_override: cli.seed,
    };
    let cache = opts.cache_dir.as_ref().map(|p| homlab::harness::CacheDir::new(p.clone()));

    match cli.command {
        Command::Validate => {
            let (_, report) = stage_validate(&cfg).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            if report.passed {
                println!("validation: pass");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("validation: FAIL");
                Ok(ExitCode::from(1))
            }
        }
        Command::Cells => {
            let (spec, vrep) = stage_validate(&cfg).map_err(|e| e.to_string())?;
            if !vrep.passed {
                return Err("hypothesis validation failed; see `validate`".into());
            }
            let (_, report) = stage_cells(&cfg, &spec, cache.as_ref()).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            Ok(ExitCode::SUCCESS)
        }
        Command::Table => {
            let (spec, vrep) = stage_validate(&cfg).map_err(|e| e.to_string())?;
            if !vrep.passed {
                return Err("hypothesis validation failed; see `validate`".into());
            }
            let (cells, crep) = stage_cells(&cfg, &spec, cache.as_ref()).map_err(|e| e.to_string())?;
            let (_, treport) = stage_table(&cfg, &spec, &cells, &crep.cache_key, cache.as_ref())
                .map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&treport).unwrap());
            Ok(ExitCode::SUCCESS)
        }
        Command::Pde => {
            let (spec, vrep) = stage_validate(&cfg).map_err(|e| e.to_string())?;
            if !vrep.passed {
                return Err("hypothesis validation failed; see `validate`".into());
            }
            let (cells, crep) = stage_cells(&cfg, &spec, cache.as_ref()).map_err(|e| e.to_string())?;
            let (table, treport) = stage_table(&cfg, &spec, &cells, &crep.cache_key, cache.as_ref())
                .map_err(|e| e.to_string())?;
            let (_, preport) = stage_pde(&cfg, &spec, &table, &treport.cache_key, cache.as_ref())
                .map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&preport).unwrap());
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate => {
            let mut one = cfg.clone();
            one.sweep.eps_k.truncate(1);
            one.sweep.n_reg.truncate(1);
            let report = run_pipeline(&one, &opts).map_err(|e| e.to_string())?;
            println!("{}", report.to_json().map_err(|e| e.to_string())?);
            Ok(exit_for(&report))
        }
        Command::Sweep => {
            let report = run_pipeline(&cfg, &opts).map_err(|e| e.to_string())?;
            if let Some(sweep) = &report.sweep {
                println!("{}", report.to_csv());
                for v in &sweep.verdicts {
                    println!(
                        "verdict {} (n = {:?}): {:?}",
                        v.metric, v.n_reg, v.verdict
                    );
                }
            }
            Ok(exit_for(&report))
        }
        Command::Report => {
            let report = run_pipeline(&cfg, &opts).map_err(|e| e.to_string())?;
            let out_dir = PathBuf::from(&report.config.output.dir);
            let written = write_outputs(&report, &out_dir).map_err(|e| e.to_string())?;
            for p in &written {
                println!("wrote {}", p.display());
            }
            println!(
                "overall: {}",
                if report.overall_pass { "pass" } else { "FAIL" }
            );
            Ok(exit_for(&report))
        }
    }
}

fn exit_for(report: &homlab::harness::Report) -> ExitCode {
    if report.overall_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}
