//! Command-line front end: trace synthesis and analysis, single-cell
//! runs, grid sweeps, and report re-emission.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stacksim::harness::{emit_report, reemit_report, run_sweep, ExperimentConfig};
use stacksim::stack::StackMode;
use stacksim::trace::{load_trace, rescale_qps, save_trace, synthesize_trace, trace_stats, TraceSpec};

#[derive(Parser)]
#[command(name = "stacksim", version, about = "Tiered HBM-PIM LLM serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a trace from a built-in preset and write it as JSONL.
    Synth {
        /// One of: api-short, mixed, code, reasoning.
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 1000)]
        requests: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print length and reuse statistics for a trace file.
    Stats {
        trace: PathBuf,
    },
    /// Execute a single (mode, qps) cell and print its metrics as JSON.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stack organization; defaults to the first mode in the config.
        #[arg(long)]
        mode: Option<String>,
        /// Target arrival rate; defaults to the first qps in the config.
        #[arg(long)]
        qps: Option<f64>,
    },
    /// Execute the full (mode × qps) grid and write report files.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Re-emit the CSV tables from a stored summary.json.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Command::Synth {
            preset,
            requests,
            seed,
            out,
        } => {
            let spec = TraceSpec::preset(&preset, requests, seed)?;
            let trace = synthesize_trace(&spec)?;
            save_trace(&trace, &out)?;
            let stats = trace_stats(&trace)?;
            eprintln!(
                "wrote {} requests (mean prompt {:.0}, mean gen {:.0}, top-10% reuse share {:.3}) to {}",
                trace.requests.len(),
                stats.mean_prompt,
                stats.mean_gen,
                stats.top10_reuse_share,
                out.display()
            );
            Ok(())
        }
        Command::Stats { trace } => {
            let trace = load_trace(&trace)?;
            let stats = trace_stats(&trace)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(())
        }
        Command::Run { config, mode, qps } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let mode = match mode {
                Some(s) => StackMode::parse(&s)
                    .ok_or_else(|| format!("unknown mode `{s}` (hybrid, dedicated-pim, full-gpu, uniform)"))?,
                None => cfg.modes[0],
            };
            let qps = qps.unwrap_or(cfg.qps[0]);
            if qps <= 0.0 {
                return Err("qps must be positive".into());
            }
            let trace = cfg.resolve_trace()?;
            let scaled = rescale_qps(&trace, qps)?;
            let run_cfg = cfg.run_config(mode)?;
            let outcome = stacksim::engine::run(&run_cfg, &scaled);
            println!("{}", serde_json::to_string_pretty(&outcome)?);
            Ok(())
        }
        Command::Sweep { config, out_dir } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let result = run_sweep(&cfg)?;
            let dir = out_dir
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let files = emit_report(&result, &dir)?;
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            for s in &result.summaries {
                eprintln!(
                    "{}: slo capacity {} qps, geomean normalized throughput {}",
                    s.mode.as_str(),
                    s.slo_capacity_qps,
                    s.geomean_normalized_throughput
                        .map(|g| format!("{g:.3}"))
                        .unwrap_or_else(|| "n/a".into()),
                );
            }
            Ok(())
        }
        Command::Report { dir } => {
            for f in reemit_report(&dir)? {
                eprintln!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}
