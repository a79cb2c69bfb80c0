use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use odesr::data::{
    bicubic_upsample, clip_unit, load_png, save_png, write_synthetic_fixture, Dataset, Manifest, MANIFEST_NAME,
};
use odesr::harness::{
    bicubic_baseline, grad_check_suite, nfe_difficulty_report, stability_bench, train, validate, GradCheckConfig,
    Scenario, TrainConfig, NFE_REPORT_FILE, STABILITY_FILE,
};
use odesr::model::{load_checkpoint, Generator};
use odesr::sensitivity::Method;
use odesr::{Error, Precision, Result, Scalar};

#[derive(Parser)]
#[command(name = "odesr", version, about = "Neural ODE super-resolution experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; omitted fields take their defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Gradient backend of the ODE core
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Adjoint,
    Discrete,
    Checkpointed,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator on a directory or manifest of PNG images
    Train {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Score a checkpoint on held-out images against bicubic upsampling
    Eval {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Score training images as well
        #[arg(long)]
        all: bool,
    },
    /// Finite-difference check of every backend, field type and augmentation
    GradCheck,
    /// Bucket images by ODE step count and compare RRDB models of growing depth
    NfeReport {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Trained ODE checkpoint
        #[arg(long, value_name = "PATH")]
        ode: PathBuf,
        /// RRDB checkpoints in increasing depth
        #[arg(long, value_name = "PATH", required = true, num_args = 1..)]
        rrdb: Vec<PathBuf>,
        #[arg(long)]
        all: bool,
    },
    /// Backward-solve cost and gradient error on x' = -lambda x
    StabilityBench {
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 10.0, 30.0, 50.0, 100.0, 300.0, 1000.0])]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-3, 1e-6])]
        tolerances: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        budget: usize,
    },
    /// Super-resolve one PNG; bicubic upsampling when no checkpoint is given
    Upscale {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Write the synthetic PNG fixture with its manifest
    Fixture {
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
}

impl Global {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = self.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if let Some(b) = self.backend {
            cfg.generator.backend = match b {
                BackendArg::Adjoint => Method::Adjoint,
                BackendArg::Discrete => Method::Discrete,
                BackendArg::Checkpointed => Method::Checkpointed,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.global.train_config()?;
    let out = &cli.global.out_dir;
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(&cli.command, &cfg, out),
        Precision::F64 => dispatch::<f64>(&cli.command, &cfg, out),
    }
}

fn dispatch<T: Scalar>(command: &Command, cfg: &TrainConfig, out: &Path) -> Result<()> {
    match command {
        Command::Train { data } => run_train::<T>(cfg, data, out),
        Command::Eval { data, checkpoint, all } => run_eval::<T>(data, checkpoint, *all),
        Command::GradCheck => run_grad_check(cfg),
        Command::NfeReport { data, ode, rrdb, all } => run_nfe_report::<T>(data, ode, rrdb, *all, out),
        Command::StabilityBench {
            lambdas,
            tolerances,
            budget,
        } => run_stability(lambdas, tolerances, *budget, out),
        Command::Upscale {
            input,
            output,
            checkpoint,
        } => run_upscale::<T>(input, output, checkpoint.as_deref()),
        Command::Fixture { dir, count, size } => {
            write_synthetic_fixture(dir, *count, *size, cfg.seed)?;
            Manifest::scan(dir)?.save(&dir.join(MANIFEST_NAME))?;
            println!("wrote {count} images of {size}x{size} to {}", dir.display());
            Ok(())
        }
    }
}

fn run_train<T: Scalar>(cfg: &TrainConfig, data: &Path, out: &Path) -> Result<()> {
    let dataset = Dataset::<T>::open(data)?;
    let outcome = train(cfg, &dataset, out)?;
    let last = outcome.epochs.last();
    println!("epochs: {}", outcome.epochs.len());
    println!("bicubic baseline: {:.3} dB", outcome.baseline_psnr);
    println!("best validation: {:.3} dB", outcome.best_psnr);
    if let Some(nfe) = last.and_then(|e| e.val.nfe) {
        println!("final validation nfe: {:.1} ± {:.1}", nfe.mean, nfe.std);
    }
    println!(
        "flagged backward solves: {} of {}",
        outcome.watchdog.flagged.len(),
        outcome.watchdog.batches
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn run_eval<T: Scalar>(data: &Path, checkpoint: &Path, all: bool) -> Result<()> {
    let generator: Generator<T> = load_checkpoint(checkpoint)?;
    let mut dataset = Dataset::<T>::open(data)?;
    let images = if all {
        dataset.train.append(&mut dataset.val);
        dataset.train
    } else {
        dataset.val
    };
    let stats = validate(&generator, &images)?;
    let baseline = bicubic_baseline(&images, generator.config().scale)?;
    for e in &stats.images {
        match e.nfe {
            Some(n) => println!("{}: {:.3} dB, nfe {n}", e.id, e.psnr),
            None => println!("{}: {:.3} dB", e.id, e.psnr),
        }
    }
    println!("mean: {:.3} dB (bicubic {baseline:.3} dB)", stats.psnr_mean);
    if let Some(nfe) = stats.nfe {
        println!("nfe: {:.1} ± {:.1} over {} calls", nfe.mean, nfe.std, nfe.calls);
    }
    Ok(())
}

fn run_grad_check(cfg: &TrainConfig) -> Result<()> {
    let check = GradCheckConfig {
        seed: cfg.seed,
        ..GradCheckConfig::new(cfg.precision)
    };
    let cells = grad_check_suite(&check)?;
    for c in &cells {
        println!(
            "{:<12} {:<14} augment {}  max rel error {:.3e}  nfe {}/{}  {}",
            c.method.as_str(),
            if c.time_dependent {
                "time-dependent"
            } else {
                "autonomous"
            },
            c.augment,
            c.max_rel_error,
            c.forward_nfe,
            c.backward_nfe,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    for m in Method::ALL {
        let worst = cells
            .iter()
            .filter(|c| c.method == m)
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max);
        println!("{m}: max rel error {worst:.3e}");
    }
    let failed = cells.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::numeric(format!(
            "{failed} of {} cells exceed {:e}",
            cells.len(),
            check.threshold
        )));
    }
    Ok(())
}

fn run_nfe_report<T: Scalar>(data: &Path, ode: &Path, rrdb: &[PathBuf], all: bool, out: &Path) -> Result<()> {
    let ode: Generator<T> = load_checkpoint(ode)?;
    let rrdbs = rrdb
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<Generator<T>>>>()?;
    let mut dataset = Dataset::<T>::open(data)?;
    let images = if all {
        dataset.train.append(&mut dataset.val);
        dataset.train
    } else {
        dataset.val
    };
    let report = nfe_difficulty_report(&ode, &rrdbs, &images)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(NFE_REPORT_FILE);
    report.write_csv(&path)?;
    for (bucket, means) in report.bucket_means() {
        let cols: Vec<String> = report
            .blocks
            .iter()
            .zip(&means)
            .map(|(b, p)| format!("b{b} {p:.3}"))
            .collect();
        println!("{:<6} {}", bucket.as_str(), cols.join("  "));
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run_stability(lambdas: &[f64], tolerances: &[f64], budget: usize, out: &Path) -> Result<()> {
    let table = stability_bench(&Scenario::grid(lambdas, tolerances, budget))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(STABILITY_FILE);
    table.write_csv(&path)?;
    for r in &table.rows {
        println!(
            "lambda {:<6} tol {:<6e} {:<12} backward nfe {:>6}  diverged {:<5}  grad error {}",
            r.lambda,
            r.tolerance,
            r.method.as_str(),
            r.backward_nfe,
            r.diverged,
            r.grad_error.map(|e| format!("{e:.2e}")).unwrap_or_else(|| "-".into())
        );
    }
    println!("{}", table.summary());
    println!("wrote {}", path.display());
    Ok(())
}

fn run_upscale<T: Scalar>(input: &Path, output: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let lr = load_png::<T>(input)?;
    let sr = match checkpoint {
        Some(p) => {
            let generator: Generator<T> = load_checkpoint(p)?;
            clip_unit(&generator.forward(&lr)?.0)
        }
        None => bicubic_upsample(&lr, odesr::data::SCALE)?,
    };
    save_png(&sr, output)?;
    let s = sr.shape();
    println!("wrote {}x{} image to {}", s.w(), s.h(), output.display());
    Ok(())
}
