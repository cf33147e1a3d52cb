//! Experiment command line: config-driven runs, sweeps, gradient checks,
//! dataset conversion, and plot-data emission.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spikessm_core::data::{
    convert_jsonl_to_container, read_container, stratified_subset, write_manifest,
};
use spikessm_core::expcli::{
    cmd_gradcheck, cmd_run, emit_plots, read_config, read_sweep, results_to_csv, run_sweep,
};
use spikessm_core::Error;

#[derive(Parser)]
#[command(
    name = "spikessm",
    version,
    about = "Spiking state-space neuron experiments"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override run.output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override run.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an architecture sweep and emit CSV/JSON result tables.
    Sweep {
        #[arg(long)]
        sweep: PathBuf,
        /// Table and per-cell output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override base run.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference gradient checks for a small config.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Convert, verify, and subset event dataset containers.
    ConvertDataset {
        /// JSON-lines event file to convert ({"label", "times", "units"} per line).
        #[arg(long, requires = "output")]
        input: Option<PathBuf>,
        /// Container file to write.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 700)]
        channels: u16,
        #[arg(long, default_value_t = 20)]
        classes: u16,
        /// Base for auto-assigned sample IDs (keep train/test ranges disjoint).
        #[arg(long, default_value_t = 0)]
        id_offset: u32,
        /// Container to integrity-check.
        #[arg(long)]
        verify: Option<PathBuf>,
        /// Emit a stratified subset manifest from this container.
        #[arg(long)]
        subset_from: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        subset_size: usize,
        #[arg(long)]
        subset_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert sweep result JSON into gnuplot-compatible .dat files.
    EmitPlots {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::DataFormat { .. } | Error::InvalidDimension(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("error: could not configure {workers} workers: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn dispatch(command: Command) -> Result<u8, Error> {
    match command {
        Command::Run { config, out, seed } => {
            let mut cfg = read_config(&config)?;
            if let Some(dir) = out {
                cfg.run.output_dir = Some(dir);
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let summary = cmd_run(&cfg)?;
            println!(
                "accuracy: {:.4} +/- {:.4} over {} trial(s)",
                summary.mean_acc,
                summary.std_acc,
                summary.trials.len()
            );
            for t in &summary.trials {
                println!(
                    "  trial {} seed {}: {:.4} ({:.1}s)",
                    t.trial, t.seed, t.test_accuracy, t.wall_clock_s
                );
            }
            if !summary.failed.is_empty() {
                for (trial, msg) in &summary.failed {
                    eprintln!("trial {trial} failed: {msg}");
                }
                return Ok(EXIT_RUNTIME);
            }
            Ok(EXIT_OK)
        }
        Command::Sweep { sweep, out, seed } => {
            let mut sw = read_sweep(&sweep)?;
            if let Some(s) = seed {
                sw.base.run.seed = s;
            }
            let results = run_sweep(&sw, out.as_deref())?;
            print!("{}", results_to_csv(&results));
            let failures = results.iter().filter(|r| r.error.is_some()).count();
            if failures > 0 {
                eprintln!("{failures} cell(s) failed");
                return Ok(EXIT_RUNTIME);
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck { config, tolerance } => {
            let cfg = read_config(&config)?;
            let reports = cmd_gradcheck(&cfg, tolerance)?;
            let mut all_pass = true;
            for (name, report) in &reports {
                println!("== {name} (tolerance {tolerance:.1e}) ==");
                print!("{}", report.summary());
                all_pass &= report.pass;
            }
            Ok(if all_pass { EXIT_OK } else { EXIT_CHECK })
        }
        Command::ConvertDataset {
            input,
            output,
            channels,
            classes,
            id_offset,
            verify,
            subset_from,
            subset_size,
            subset_out,
            seed,
        } => {
            let mut did_something = false;
            if let (Some(input), Some(output)) = (input, output) {
                let count =
                    convert_jsonl_to_container(&input, &output, channels, classes, id_offset)?;
                println!("wrote {count} samples to {}", output.display());
                did_something = true;
            }
            if let Some(path) = verify {
                let ds = read_container(&path)?;
                let events: usize = ds.records.iter().map(|r| r.num_events()).sum();
                println!(
                    "{}: {} samples, {} channels, {} classes, {} events, checksums OK",
                    path.display(),
                    ds.len(),
                    ds.channels,
                    ds.classes,
                    events
                );
                did_something = true;
            }
            if let Some(path) = subset_from {
                let out_path = subset_out
                    .ok_or_else(|| Error::Config("--subset-from requires --subset-out".into()))?;
                let ds = read_container(&path)?;
                let ids = stratified_subset(&ds, subset_size, seed);
                write_manifest(&out_path, &ids)?;
                println!(
                    "wrote manifest with {} sample ids to {}",
                    ids.len(),
                    out_path.display()
                );
                did_something = true;
            }
            if !did_something {
                return Err(Error::Config(
                    "convert-dataset needs --input/--output, --verify, or --subset-from".into(),
                ));
            }
            Ok(EXIT_OK)
        }
        Command::EmitPlots { results, out } => {
            let path = emit_plots(&results, &out)?;
            println!("wrote {}", path.display());
            Ok(EXIT_OK)
        }
    }
}
