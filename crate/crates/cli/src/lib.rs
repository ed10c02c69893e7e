//! Driver for the `lorentz` binary: config handling, output files and the
//! seven subcommands.

pub mod checks;
pub mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use serde_json::{json, Value};

pub use commands::Command;
use config::RunConfig;
use output::Outputs;

#[derive(Debug, Clone, Parser)]
#[command(
    name = "lorentz",
    version,
    about = "Forced periodic Lorentz gas: simulation and fluctuation analysis"
)]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config worker count.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Exit status: 0 when every check passes, 1 when a check fails, 2 on error.
pub fn run(args: &Args) -> i32 {
    let start = Instant::now();
    let name = args.command.name();
    let mut record = json!({
        "tool": "lorentz",
        "version": env!("CARGO_PKG_VERSION"),
        "command": name,
    });
    let code = match run_inner(args, &mut record) {
        Ok(pass) => {
            record["status"] = json!(if pass { "pass" } else { "fail" });
            if pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            record["status"] = json!("error");
            record["error"] = json!({ "message": format!("{e:#}"), "chain": e.chain().map(|c| c.to_string()).collect::<Vec<_>>() });
            2
        }
    };
    record["wall_time_s"] = json!(start.elapsed().as_secs_f64());
    if let Err(e) = write_manifest(&args.out, name, &record) {
        eprintln!("error: writing manifest: {e:#}");
        return 2;
    }
    code
}

fn write_manifest(dir: &Path, name: &str, record: &Value) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut s = serde_json::to_string_pretty(record)?;
    s.push('\n');
    std::fs::write(dir.join(format!("{name}.manifest.json")), s)?;
    Ok(())
}

fn run_inner(args: &Args, record: &mut Value) -> anyhow::Result<bool> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    record["seed"] = json!(cfg.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()?;
    record["workers"] = json!(pool.current_num_threads());
    pool.install(|| run_command(args.command, cfg, &args.out, record))
}

/// A finished command: its outcome, the files it wrote and the resolved
/// config.
pub struct Finished {
    pub outcome: commands::Outcome,
    pub outputs: Outputs,
    pub config: RunConfig,
}

/// Builds the system, writes `resolved_config.json` and runs `cmd` inside the
/// current thread pool.
pub fn execute(cmd: Command, mut cfg: RunConfig, dir: &Path) -> anyhow::Result<Finished> {
    let sys = match cfg.system() {
        Ok(s) => Some(s),
        Err(e) if cmd == Command::TableCheck => {
            eprintln!("warning: {e}");
            None
        }
        Err(e) => return Err(e),
    };
    let mut out = Outputs::new(dir, &cfg.digest())?;
    out.json("resolved_config.json", &cfg)?;
    let outcome = commands::execute(cmd, &cfg, sys.as_ref(), &mut out)?;
    Ok(Finished {
        outcome,
        outputs: out,
        config: cfg,
    })
}

/// Runs one command, prints its checks and writes the summary file.
pub fn run_command(
    cmd: Command,
    cfg: RunConfig,
    dir: &Path,
    record: &mut Value,
) -> anyhow::Result<bool> {
    let Finished {
        outcome,
        outputs: mut out,
        ..
    } = execute(cmd, cfg, dir)?;
    let digest = out.digest().to_string();
    record["config_digest"] = json!(digest);
    let pass = outcome.checks.iter().all(|c| c.pass);
    for c in &outcome.checks {
        println!(
            "{} {}: {:e} (threshold {:e}){}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold,
            if c.detail.is_empty() {
                String::new()
            } else {
                format!(" [{}]", c.detail)
            }
        );
    }
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    out.json(
        &format!("{}_summary.json", cmd.name()),
        &json!({
            "command": cmd.name(),
            "config_digest": digest,
            "pass": pass,
            "checks": outcome.checks,
            "warnings": outcome.warnings,
            "results": outcome.results,
        }),
    )?;
    record["discarded"] = outcome.discarded;
    record["files"] = json!(out.files());
    record["checks_passed"] = json!(pass);
    Ok(pass)
}
