//! Batch CLI for SPOD/POD reduced-order modeling and LSTM forecasting.
//!
//! Exit codes: 0 success, 2 config validation, 3 data error, 4 numerical
//! failure, 5 provenance mismatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use spodem::pipeline::{
    cmd_decompose, cmd_forecast, cmd_pipeline, cmd_project, cmd_sweep, cmd_train, PipelineConfig,
};
use spodem::synth::{jet_surrogate, latlon_surrogate, JetSurrogateSpec, LatLonSurrogateSpec};

#[derive(Parser)]
#[command(
    name = "spodem",
    about = "SPOD/POD reduced-order modeling with LSTM latent-dynamics forecasting",
    version
)]
struct Cli {
    /// Bound the rayon worker pool.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Force sequential execution (same as --jobs 1).
    #[arg(long, global = true)]
    single_thread: bool,

    /// Override the emulator seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist the SPOD or POD basis from the train split.
    Decompose {
        #[arg(long)]
        config: PathBuf,
    },
    /// Project train and test data onto the persisted basis.
    Project {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the per-mode LSTM ensemble on the train coefficients.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Forecast test coefficients, reconstruct fields, write errors.csv.
    Forecast {
        #[arg(long)]
        config: PathBuf,
        /// Dump truth/projection/prediction fields for one global snapshot.
        #[arg(long)]
        dump_snapshot: Option<usize>,
    },
    /// Run decompose, project, train, and forecast in sequence.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dump_snapshot: Option<usize>,
    },
    /// Expand the config's sweep lists and append every cell to errors.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic benchmark dataset (.npy, plus grid JSON for latlon).
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        nt: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Jet,
    Latlon,
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> spodem::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.emulator.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> spodem::Result<()> {
    match cli.command {
        Command::Decompose { config } => {
            let cfg = load_config(&config, cli.seed)?;
            let s = cmd_decompose(&cfg)?;
            println!(
                "decompose: kind={:?} blocks={} frequencies={} modes={} -> {}",
                s.kind,
                s.n_blocks,
                s.n_freq,
                s.n_modes,
                s.basis_dir.display()
            );
        }
        Command::Project { config } => {
            let cfg = load_config(&config, cli.seed)?;
            let s = cmd_project(&cfg)?;
            if s.effective_rank < s.d {
                eprintln!(
                    "warning: mode gram has effective rank {} < d = {}",
                    s.effective_rank, s.d
                );
            }
            match s.freq_shape {
                Some(shape) => println!(
                    "project: d={} rank={} compression={:.4} freq_coeffs={:?}",
                    s.d, s.effective_rank, s.compression, shape
                ),
                None => println!(
                    "project: d={} rank={} compression={:.4}",
                    s.d, s.effective_rank, s.compression
                ),
            }
        }
        Command::Train { config } => {
            let cfg = load_config(&config, cli.seed)?;
            let s = cmd_train(&cfg)?;
            println!(
                "train: networks={} features={:?} final_loss={:?}",
                s.n_networks, s.features_per_network, s.final_train_loss
            );
        }
        Command::Forecast {
            config,
            dump_snapshot,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let s = cmd_forecast(&cfg, dump_snapshot)?;
            print_forecast(&s);
        }
        Command::Pipeline {
            config,
            dump_snapshot,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let (d, p, t, f) = cmd_pipeline(&cfg, dump_snapshot)?;
            println!(
                "decompose: blocks={} frequencies={} modes={}",
                d.n_blocks, d.n_freq, d.n_modes
            );
            println!("project: d={} compression={:.4}", p.d, p.compression);
            println!("train: networks={}", t.n_networks);
            print_forecast(&f);
        }
        Command::Sweep { config } => {
            let cfg = load_config(&config, cli.seed)?;
            let rows = cmd_sweep(&cfg)?;
            println!("sweep: {} cells -> report/errors.csv", rows.len());
            for r in &rows {
                println!(
                    "  modes={} freqs={} n_tau_f={} seed={} proj_l2={:.3e} learn_l2={:.3e}",
                    r.modes,
                    r.frequencies,
                    r.n_tau_f,
                    r.seed,
                    r.report.projection.l2,
                    r.report.learning.l2
                );
            }
        }
        Command::Synth {
            kind,
            out,
            nt,
            seed,
        } => match kind {
            SynthKind::Jet => {
                let q = jet_surrogate(&JetSurrogateSpec {
                    nt,
                    seed,
                    ..Default::default()
                });
                let flat: Vec<f64> = q.values.iter().cloned().collect();
                spodem::npy::write_f64(&out, &flat, &[q.n_rows(), q.n_snapshots()])?;
                println!("synth: jet-like record {}x{} -> {}", q.n_rows(), nt, out.display());
            }
            SynthKind::Latlon => {
                let (q, grid) = latlon_surrogate(&LatLonSurrogateSpec {
                    nt,
                    seed,
                    ..Default::default()
                });
                let flat: Vec<f64> = q.values.iter().cloned().collect();
                spodem::npy::write_f64(&out, &flat, &[q.n_rows(), q.n_snapshots()])?;
                let grid_path = out.with_extension("grid.json");
                let s = serde_json::to_string_pretty(&grid)
                    .map_err(|e| spodem::Error::json("serializing grid", e))?;
                std::fs::write(&grid_path, s)
                    .map_err(|e| spodem::Error::io("writing grid json", e))?;
                println!(
                    "synth: lat-lon record {}x{} -> {} (+ {})",
                    q.n_rows(),
                    nt,
                    out.display(),
                    grid_path.display()
                );
            }
        },
    }
    Ok(())
}

fn print_forecast(s: &spodem::pipeline::ForecastSummary) {
    let r = &s.report;
    println!(
        "forecast: window=[{}, {}) n={} triangle_ok={}",
        s.window.0, s.window.1, r.n_snapshots, r.triangle_ok
    );
    println!(
        "  projection: l1={:.3e} l2={:.3e} linf={:.3e}",
        r.projection.l1, r.projection.l2, r.projection.linf
    );
    println!(
        "  learning:   l1={:.3e} l2={:.3e} linf={:.3e}",
        r.learning.l1, r.learning.l2, r.learning.linf
    );
    println!(
        "  total:      l1={:.3e} l2={:.3e} linf={:.3e}",
        r.total.l1, r.total.l2, r.total.linf
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.single_thread {
        Some(1)
    } else {
        cli.jobs
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
