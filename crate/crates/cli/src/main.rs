//! `stereospike` command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage and configuration errors, 2 on
//! runtime failures (I/O, malformed files, non-finite losses, a failing
//! gradient check).

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stereospike::autodiff::run_gradcheck_suite;
use stereospike::evalx::{self, DensityReport};
use stereospike::events::{make_chunk, read_evt};
use stereospike::model::{checkpoint, Mode};
use stereospike::synthdata::{make_dataset, Dataset};
use stereospike::train::{constant_baseline_mde, evaluate, run_training};
use stereospike::{Error, Net, Result};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "stereospike", version, about = "Spiking stereo depth estimation from event streams")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// `key = value` settings file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// mono or bino.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long = "lambda-smooth", global = true)]
    lambda_smooth: Option<f64>,
    #[arg(long = "lambda-spike", global = true)]
    lambda_spike: Option<f64>,
    #[arg(long = "base-channels", global = true)]
    base_channels: Option<usize>,
    /// Dataset directory written by `synth-gen`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset into --out.
    SynthGen {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on --data (or an in-memory dataset) and write the log and best checkpoint to --out.
    Train {
        /// Enable the spike-count penalty.
        #[arg(long)]
        penalty: bool,
        /// Scenes to generate in memory when --data is absent.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Test-split MDE, constant baseline and density report.
    Eval,
    /// Predict a depth map from event files.
    Infer {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: Option<PathBuf>,
        /// Chunk start, microseconds.
        #[arg(long, default_value_t = 0)]
        t0: u64,
        /// Histogram window per frame, microseconds.
        #[arg(long = "frame-us")]
        frame_us: Option<u64>,
    },
    /// Per-layer density table; --compare adds a second checkpoint as a column.
    Profile {
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in f32 and f64.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Invalid(_) | Error::Geometry(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    let flags: [(&str, Option<String>); 10] = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("mode", common.mode.clone()),
        ("epochs", common.epochs.map(|v| v.to_string())),
        ("lr", common.lr.map(|v| v.to_string())),
        ("lambda_smooth", common.lambda_smooth.map(|v| v.to_string())),
        ("lambda_spike", common.lambda_spike.map(|v| v.to_string())),
        ("base_channels", common.base_channels.map(|v| v.to_string())),
        ("data", common.data.as_ref().map(|p| p.display().to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
        ("checkpoint", common.checkpoint.as_ref().map(|p| p.display().to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> std::result::Result<&'a Path, Failure> {
    path.as_deref().ok_or_else(|| Failure::Usage(format!("--{flag} is required")))
}

fn prepare_out(cfg: &RunConfig) -> std::result::Result<&Path, Failure> {
    let out = require(&cfg.out, "out")?;
    fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    cfg.echo(out)?;
    Ok(out)
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(dir) => Dataset::load(dir),
        None => Dataset::generate(&cfg.family, cfg.count, cfg.seed),
    }
}

/// The checkpoint given by --checkpoint, or a fresh seeded initialization.
fn network(cfg: &RunConfig) -> Result<Net> {
    match &cfg.checkpoint {
        Some(path) => checkpoint::load(path, Some(&cfg.model)),
        None => Net::new(cfg.model.clone(), cfg.seed),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn decoder_mean(report: &DensityReport) -> String {
    report.group("Decoder").map_or("-".into(), |d| format!("{:.1}%", 100.0 * d))
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let mut cfg = resolve(&cli.common)?;
    match cli.command {
        Command::SynthGen { count } => {
            if let Some(n) = count {
                cfg.count = n;
            }
            let out = prepare_out(&cfg)?;
            let manifest = make_dataset(&cfg.family, cfg.count, cfg.seed, out)?;
            println!(
                "wrote {} scenes ({} train / {} test) to {}",
                manifest.samples.len(),
                manifest.train.len(),
                manifest.test.len(),
                out.display()
            );
        }
        Command::Train { penalty, count } => {
            if let Some(n) = count {
                cfg.count = n;
            }
            cfg.plan.spike_penalty_enabled |= penalty;
            let out = prepare_out(&cfg)?.to_path_buf();
            let data = dataset(&cfg)?;
            println!("constant baseline MDE: {:.2} cm", constant_baseline_mde(&data)?);
            let mut net = network(&cfg)?;
            let log = run_training(&mut net, &data, &cfg.plan, &cfg.losses, |r| {
                println!(
                    "epoch {:>3}  lr {:.1e}  train loss {:.4} mde {:.2}  test loss {:.4} mde {:.2}",
                    r.epoch, r.lr, r.train.loss.total, r.train.mde_cm, r.test.loss.total, r.test.mde_cm
                );
            })?;
            write(&out.join("train_log.csv"), log.to_csv())?;
            checkpoint::save(&log.best, &out.join("best.ssk"))?;
            checkpoint::save(&net, &out.join("last.ssk"))?;
            let eval = evaluate(&log.best, data.test_samples(), &cfg.losses, cfg.plan.spike_penalty_enabled)?;
            eval.report.write(&out, "density")?;
            println!("best epoch {} test MDE {:.2} cm", log.best_epoch, log.best_test_mde_cm);
            print!("{}", eval.report.to_text());
        }
        Command::Eval => {
            let data = dataset(&cfg)?;
            let net = network(&cfg)?;
            let eval = evaluate(&net, data.test_samples(), &cfg.losses, cfg.plan.spike_penalty_enabled)?;
            let baseline = constant_baseline_mde(&data)?;
            println!("test MDE {:.2} cm  constant baseline {:.2} cm  test loss {:.4}", eval.stats.mde_cm, baseline, eval.stats.loss.total);
            print!("{}", eval.report.to_text());
            if cfg.out.is_some() {
                eval.report.write(prepare_out(&cfg)?, "density")?;
            }
        }
        Command::Infer { left, right, t0, frame_us } => {
            let frame_us = frame_us.unwrap_or(cfg.frame_us);
            if frame_us == 0 {
                return Err(Failure::Usage("--frame-us must be positive".into()));
            }
            let out = prepare_out(&cfg)?;
            let net = network(&cfg)?;
            let m = net.config();
            let n_frames = m.in_channels / 2;
            let chunk = |path: &Path| -> Result<_> {
                Ok(make_chunk(&read_evt(path)?, t0, n_frames, frame_us).pad_or_crop(m.input_height, m.input_width))
            };
            let l = chunk(&left)?;
            let r = match (m.mode, &right) {
                (Mode::Binocular, Some(p)) => Some(chunk(p)?),
                (Mode::Binocular, None) => return Err(Failure::Usage("binocular mode needs --right".into())),
                (Mode::Monocular, _) => None,
            };
            let (depth, _) = net.forward(&l, r.as_ref())?;
            evalx::write_depth_raster(&depth, &out.join("depth.f32"))?;
            evalx::write_depth_pgm(&depth, m.depth.d_max, &out.join("depth.pgm"))?;
            let mean = depth.depth.iter().map(|&d| d as f64).sum::<f64>() / depth.depth.len() as f64;
            println!("depth {}x{} mean {:.3} m -> {}", depth.height, depth.width, mean, out.display());
        }
        Command::Profile { compare } => {
            let data = dataset(&cfg)?;
            let net = network(&cfg)?;
            let base = evaluate(&net, data.test_samples(), &cfg.losses, false)?.report;
            let text = match &compare {
                Some(path) => {
                    let other: Net = checkpoint::load(path, Some(&cfg.model))?;
                    let theirs = evaluate(&other, data.test_samples(), &cfg.losses, false)?.report;
                    println!("decoder mean density {} -> {}", decoder_mean(&base), decoder_mean(&theirs));
                    if cfg.out.is_some() {
                        theirs.write(prepare_out(&cfg)?, "density_compare")?;
                    }
                    base.side_by_side(&theirs, ("checkpoint", "compare"))
                }
                None => base.to_text(),
            };
            print!("{text}");
            if cfg.out.is_some() {
                let out = prepare_out(&cfg)?;
                base.write(out, "density")?;
                write(&out.join("profile.txt"), &text)?;
            }
        }
        Command::Gradcheck { instances } => {
            let mut failed = Vec::new();
            for (label, reports) in [
                ("f32", run_gradcheck_suite::<f32>(instances, cfg.seed, 1e-3)?),
                ("f64", run_gradcheck_suite::<f64>(instances, cfg.seed, 1e-5)?),
            ] {
                for r in reports {
                    let verdict = if r.passed() { "ok" } else { "FAIL" };
                    println!(
                        "{label} {:<20} n={:<4} max_rel_err={:.3e} tol={:.0e} {verdict}",
                        r.case.name(),
                        r.instances,
                        r.max_rel_err,
                        r.tolerance
                    );
                    if !r.passed() {
                        failed.push(format!("{label}/{}", r.case.name()));
                    }
                }
            }
            if !failed.is_empty() {
                return Err(Failure::Runtime(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
