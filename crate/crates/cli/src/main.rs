use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use essential::config::RunConfig;
use essential::driver::{analyze_run, run_ablation, run_benchmark, write_run, Preset};
use essential::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_TOL};
use essential::{Error, OpKind, Result};

#[derive(Parser)]
#[command(name = "essential", version, about = "Video class-incremental learning with episodic and semantic memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task sequence and write results, manifest, memory and model.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op, block and the training loss.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Run one ablation grid and print its table.
    Ablate {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Reconstruction distances for a finished run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
    },
}

fn cmd_run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = &out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    let outcome = run_benchmark(&cfg)?;
    let dir = cfg.out_dir.clone();
    write_run(&dir, &outcome)?;
    let m = &outcome.metrics;
    for k in 0..m.tasks() {
        println!("task {}: AA {:.4}  AIA {:.4}  BWF {:.4}", k + 1, m.aa[k], m.aia[k], m.bwf[k]);
    }
    let usage = outcome.usage.last().copied().unwrap_or_default();
    println!(
        "memory: episodic {} B, semantic {} B ({:.1} MiB)",
        usage.episodic_bytes,
        usage.semantic_bytes,
        essential::memory::mib_rounded(usage.total())
    );
    println!("wrote {}", dir.display());
    Ok(())
}

/// Returns whether every check passed.
fn cmd_gradcheck(tol: f64, corrupt: Option<String>) -> Result<bool> {
    if !(tol > 0.0) {
        return Err(Error::Input(format!("tolerance must be positive, got {tol}")));
    }
    let fault = match corrupt {
        Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| Error::Input(format!("unknown op `{name}`")))?),
        None => None,
    };
    let mut ok = true;
    for e in run_suite(DEFAULT_STEP, fault)? {
        if e.report.passes(tol) {
            println!("PASS {:<28} max rel err {:.3e}", e.name, e.report.max_rel_err());
        } else {
            ok = false;
            println!("FAIL {:<28} max rel err {:.3e}", e.name, e.report.max_rel_err());
            for p in e.report.failures(tol) {
                println!("     {} rel err {:.3e}", p.name, p.max_rel_err);
            }
        }
    }
    println!("{} at tol {tol:e}", if ok { "all checks passed" } else { "gradient check failed" });
    Ok(ok)
}

fn cmd_ablate(preset: &str, config: PathBuf) -> Result<()> {
    let preset: Preset = preset.parse()?;
    let cfg = RunConfig::load(&config)?;
    cfg.validate()?;
    let table = run_ablation(preset, &cfg)?;
    let csv = table.to_csv();
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("ablation_{preset}.csv"));
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_analyze(run: PathBuf) -> Result<()> {
    let reports = analyze_run(&run)?;
    println!("task,clips,d_sparse,d_retrieved,d_random");
    for r in &reports {
        println!("{},{},{:.6},{:.6},{:.6}", r.task + 1, r.clips, r.d_sparse, r.d_retrieved, r.d_random);
    }
    let holds = reports.iter().all(|r| r.ordering_holds());
    println!(
        "verdict: D_retrieved < D_sparse and D_retrieved < D_random {}",
        if holds { "holds for every task" } else { "VIOLATED" }
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => cmd_run(config, seed, out).map(|()| true),
        Command::Gradcheck { tol, corrupt } => cmd_gradcheck(tol, corrupt),
        Command::Ablate { preset, config } => cmd_ablate(&preset, config).map(|()| true),
        Command::Analyze { run } => cmd_analyze(run).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_invalid_input() { 2 } else { 1 })
        }
    }
}
