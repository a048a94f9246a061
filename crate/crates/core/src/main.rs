use clap::{Args, Parser, Subcommand};
use gcdyn::harness::config::ExperimentConfig;
use gcdyn::harness::output::{write_run, Row};
use gcdyn::harness::run::{run_experiment, run_method, solve_point_dmf};
use gcdyn::harness::verify::{verify_moments, verify_theorem1};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "gcdyn", version, about = "Perceptron training dynamics on Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set size.m=2000`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (overrides experiment.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides experiment.out without changing the config hash).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Replicate one method at every point of the config.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// empirical, dmf, refined, alternative or perturbed.
        #[arg(long)]
        method: String,
    },
    /// Solve the DMF equations and write the solution and its metric curves.
    Dmf {
        #[command(flatten)]
        common: Common,
    },
    /// DMF solution plus finite-size refined curves.
    Refine {
        #[command(flatten)]
        common: Common,
    },
    /// Compare trajectory statistics of the alternative and perturbed processes.
    VerifyTheorem1 {
        #[command(flatten)]
        common: Common,
    },
    /// Compare second moments of both processes at a fixed point.
    VerifyMoments {
        #[command(flatten)]
        common: Common,
    },
    /// Run every configured method over the sweep.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn load(c: &Common, extra: &[String]) -> gcdyn::Result<(ExperimentConfig, PathBuf)> {
    let mut sets = c.set.clone();
    if let Some(s) = c.seed {
        sets.push(format!("experiment.seed={s}"));
    }
    sets.extend_from_slice(extra);
    let cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p, &sets)?,
        None => ExperimentConfig::from_toml_with("", &sets)?,
    };
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.experiment.out));
    Ok((cfg, out))
}

fn experiment(c: &Common, extra: &[String]) -> gcdyn::Result<()> {
    let (cfg, out) = load(c, extra)?;
    let res = run_experiment(&cfg, c.threads)?;
    write_run(&out, &cfg, &res.rows, &res.summary_json(&cfg))?;
    eprintln!("{} rows written to {}", res.rows.len(), out.join("results.csv").display());
    Ok(())
}

fn dmf(c: &Common) -> gcdyn::Result<()> {
    let (cfg, out) = load(c, &["experiment.methods=[\"dmf\"]".into()])?;
    let start = Instant::now();
    let hash = cfg.hash();
    std::fs::create_dir_all(&out)?;
    let mut rows: Vec<Row> = Vec::new();
    let mut diags = Vec::new();
    for (i, point) in cfg.points().iter().enumerate() {
        let sol = solve_point_dmf(point, &hash)?;
        std::fs::write(out.join(format!("dmf_{i}.txt")), sol.to_text())?;
        let (r, d) = run_method(point, i, &cfg, &hash, "dmf", Some(&sol), c.threads)?;
        rows.extend(r);
        diags.push(json!({ "point": i, "file": format!("dmf_{i}.txt"), "dmf": d }));
    }
    let summary = json!({
        "config": cfg,
        "config_hash": hash,
        "wall_clock_seconds": start.elapsed().as_secs_f64(),
        "diagnostics": diags,
    });
    write_run(&out, &cfg, &rows, &summary)
}

fn write_report(out: &Path, cfg: &ExperimentConfig, report: serde_json::Value, passed: bool) -> gcdyn::Result<()> {
    let summary = json!({
        "config": cfg,
        "config_hash": cfg.hash(),
        "report": report,
        "acceptance": { "passed": passed },
    });
    write_run(out, cfg, &[], &summary)?;
    eprintln!("{}", if passed { "PASS" } else { "FAIL" });
    Ok(())
}

fn run(cli: Cli) -> gcdyn::Result<()> {
    match cli.command {
        Command::Simulate { common, method } => {
            experiment(&common, &[format!("experiment.methods=[\"{method}\"]")])
        }
        Command::Dmf { common } => dmf(&common),
        Command::Refine { common } => {
            experiment(&common, &["experiment.methods=[\"dmf\", \"refined\"]".into()])
        }
        Command::Experiment { common } => experiment(&common, &[]),
        Command::VerifyTheorem1 { common } => {
            let (cfg, out) = load(&common, &[])?;
            let rep = verify_theorem1(&cfg, common.threads)?;
            let passed = rep.passed;
            write_report(&out, &cfg, json!(rep), passed)
        }
        Command::VerifyMoments { common } => {
            let (cfg, out) = load(&common, &[])?;
            let rep = verify_moments(&cfg, common.threads)?;
            let passed = rep.passed;
            write_report(&out, &cfg, json!(rep), passed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
