//! `ctseq`: simulate, run, bound and export sequential CT confidence sets.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctseq::experiment::artifacts::{replay, write_log, write_run};
use ctseq::experiment::config::{AngleSchedule, PredictorKind};
use ctseq::experiment::export::export;
use ctseq::experiment::intervals::{compute_intervals, write_intervals};
use ctseq::experiment::run::{run, summarize, Scenario};
use ctseq::experiment::sweep::{run_sweep, write_tables, SweepConfig};
use ctseq::experiment::{exit, ExperimentConfig};
use ctseq::forward::AcquisitionMode;
use ctseq::io::write_image;
use ctseq::{Error, PhantomFamily};

#[derive(Parser)]
#[command(name = "ctseq", version, about = "Anytime-valid confidence sequences for sequential CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate measurements only: config echo, measurement log and truth.
    Simulate(RunArgs),
    /// Run the confidence sequence and write all run artifacts.
    Run {
        #[arg(value_enum)]
        mode: Mode,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Run, then compute pixel intervals for the final confidence set.
    Intervals(RunArgs),
    /// Run a configuration grid and write the summary tables.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute a run's trajectory from its measurement log.
    Replay {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Per-figure tables and greyscale maps from sweep or run directories.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Map value rendered as white; zero is black.
        #[arg(long, default_value_t = 0.1)]
        white_point: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sparse,
    Dense,
}

/// Config file plus flag overrides of individual fields.
#[derive(Args)]
struct RunArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    family: Option<PhantomFamily>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    phantom_index: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    total_intensity: Option<f64>,
    #[arg(long)]
    angles: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, value_enum)]
    schedule: Option<Schedule>,
    #[arg(long, value_enum)]
    predictor: Option<Kind>,
    #[arg(long)]
    refit_steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Golden,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Fbp,
    Mle,
    Ensemble,
    EnsembleMean,
    SmoothedFbp,
    SmoothedMle,
    Constant,
}

impl From<Kind> for PredictorKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Fbp => PredictorKind::Fbp,
            Kind::Mle => PredictorKind::Mle,
            Kind::Ensemble => PredictorKind::Ensemble,
            Kind::EnsembleMean => PredictorKind::EnsembleMean,
            Kind::SmoothedFbp => PredictorKind::SmoothedFbp,
            Kind::SmoothedMle => PredictorKind::SmoothedMle,
            Kind::Constant => PredictorKind::Constant,
        }
    }
}

impl RunArgs {
    fn config(&self, mode: Option<Mode>) -> Result<ExperimentConfig, Error> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => match mode {
                Some(Mode::Dense) => ExperimentConfig::dense(PhantomFamily::Ellipses, 64, 200, 1e4, 1e9, 30),
                _ => ExperimentConfig::sparse(PhantomFamily::Ellipses, 64, 1e6),
            },
        };
        match mode {
            Some(Mode::Sparse) if c.acquisition.mode != AcquisitionMode::Sparse => {
                return Err(Error::Config {
                    field: "acquisition.mode".into(),
                    message: "config is dense but `run sparse` was requested".into(),
                })
            }
            Some(Mode::Dense) if c.acquisition.mode != AcquisitionMode::Dense => {
                return Err(Error::Config {
                    field: "acquisition.mode".into(),
                    message: "config is sparse but `run dense` was requested".into(),
                })
            }
            _ => {}
        }
        if let Some(v) = self.family {
            c.phantom.family = v;
        }
        if let Some(v) = self.side {
            c.phantom.side = v;
        }
        if let Some(v) = self.phantom_index {
            c.phantom.index = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.delta {
            c.delta = v;
        }
        if let Some(v) = self.total_intensity {
            c.acquisition.total_intensity = Some(v);
        }
        if let Some(v) = self.angles {
            c.acquisition.angles = v;
        }
        if let Some(v) = self.warmup {
            c.acquisition.warmup = v;
        }
        if let Some(v) = self.schedule {
            c.acquisition.schedule = match v {
                Schedule::Golden => AngleSchedule::Golden,
                Schedule::Uniform => AngleSchedule::Uniform,
            };
        }
        if let Some(v) = self.predictor {
            c.predictor.kind = v.into();
        }
        if let Some(v) = self.refit_steps {
            c.predictor.refit_steps = Some(v);
        }
        c.validate()?;
        Ok(c)
    }
}

fn write_config(dir: &Path, c: &ExperimentConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), c.to_toml())?;
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Simulate(args) => {
            let c = args.config(None)?;
            let s = Scenario::simulate(&c)?;
            write_config(&args.out, &c)?;
            write_log(&args.out.join("measurements.jsonl"), &s)?;
            write_image(&args.out.join("truth.f32"), &s.truth, Default::default())?;
            log::info!("simulated {} steps into {}", s.steps.len(), args.out.display());
        }
        Command::Run { mode, args } => {
            let c = args.config(Some(mode))?;
            let (s, r) = run(&c)?;
            write_run(&args.out, &s, &r)?;
            let m = summarize(&s, &r)?;
            println!(
                "{}: beta {:.3} truth nll {:.3} gap {:.3} crossed {} psnr {:.2} dB",
                r.method, m.final_beta, m.truth_nll, m.gap, m.crossed, m.psnr
            );
        }
        Command::Intervals(args) => {
            let c = args.config(None)?;
            let (s, r) = run(&c)?;
            write_run(&args.out, &s, &r)?;
            let outcomes = compute_intervals(&s, &r, &c.intervals)?;
            write_intervals(&args.out.join("intervals"), &outcomes)?;
            let mut w = csv_writer(&args.out.join("intervals.csv"))?;
            w.write_record(["interval", "coverage", "width", "ause", "in_set", "total", "flagged", "audited"])?;
            for o in &outcomes {
                println!("{}: coverage {:.4} width {:.4}", o.method, o.coverage, o.width);
                w.write_record([
                    o.method.clone(),
                    o.coverage.to_string(),
                    o.width.to_string(),
                    o.ause.to_string(),
                    o.in_set.to_string(),
                    o.total.to_string(),
                    o.flagged.to_string(),
                    o.audited.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Command::Sweep { config, out } => {
            let sweep = SweepConfig::load(&config)?;
            let result = run_sweep(&sweep, Some(&out))?;
            write_tables(&out, &sweep, &result)?;
            println!("{} runs, {} failures", result.rows.len(), result.failures.len());
            for f in &result.failures {
                eprintln!("failed {} {}: {}", f.cell, f.method, f.message);
            }
            if !result.failures.is_empty() {
                return Ok(exit::PARTIAL_FAILURE);
            }
        }
        Command::Replay { run, tolerance } => {
            let rep = replay(&run)?;
            println!(
                "{} steps, max beta error {:e}, max nll error {:e}",
                rep.steps, rep.max_beta_error, rep.max_nll_error
            );
            if !rep.within(tolerance) {
                eprintln!("replay differs from the stored trajectory beyond {tolerance:e}");
                return Ok(exit::PARTIAL_FAILURE);
            }
        }
        Command::Export {
            input,
            output,
            white_point,
        } => {
            let rep = export(&input, &output, white_point)?;
            println!("wrote {} files", rep.written.len());
            for m in &rep.missing {
                eprintln!("missing {}", m.display());
            }
        }
    }
    Ok(exit::SUCCESS)
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::INVALID_CONFIG as u8) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::INVALID_CONFIG as u8)
        }
    }
}
