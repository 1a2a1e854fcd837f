use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attrfuse_core::io::{load_checkpoint, read_dataset, read_pgm, save_checkpoint, write_dataset, write_pgm};
use attrfuse_core::metrics::MetricReport;
use attrfuse_core::model::{fuse, FuseOptions, ModelConfig};
use attrfuse_core::train::{gen_synthetic, train, write_log, Ablations, SceneSample, TrainConfig};
use attrfuse_core::{Error, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attrfuse", version, about = "Attribution-guided unfolding fusion of infrared and visible images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// CSV training log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainArgs,
    },
    /// Fuse one image pair.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vi: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every clamped stage output as stage_K.pgm.
        #[arg(long)]
        dump_stages: Option<PathBuf>,
        #[command(flatten)]
        opts: InferArgs,
    },
    /// Export the weight maps and per-stage attention maps of one pair.
    Attribute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vi: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: InferArgs,
    },
    /// Score a fused image against its sources.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vi: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train once per value of a hyperparameter and report dataset-mean metrics.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        /// Directory for the per-value checkpoints.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainArgs,
    },
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 5)]
    stages: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    seg_channels: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    mu: f64,
    #[arg(long, default_value_t = 5)]
    ig_steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated ablation flags.
    #[arg(long, default_value = "")]
    ablate: String,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig, Error> {
        Ok(TrainConfig {
            model: ModelConfig {
                stages: self.stages,
                channels: self.channels,
                seg_classes: self.classes,
                seg_channels: self.seg_channels,
            },
            ig_steps: self.ig_steps,
            lambda: self.lambda,
            mu: self.mu,
            lr: self.lr,
            epochs: self.epochs,
            batch: self.batch,
            patch: self.patch,
            seed: self.seed,
            max_iters: self.max_iters,
            ablations: Ablations::parse(&self.ablate)?,
            ..Default::default()
        })
    }
}

/// Inference switches; these must match the ones the model was trained with.
#[derive(Args)]
struct InferArgs {
    #[arg(long, default_value_t = 5)]
    ig_steps: usize,
    #[arg(long, default_value = "")]
    ablate: String,
}

impl InferArgs {
    fn options(&self) -> Result<FuseOptions, Error> {
        let cfg = TrainConfig { ig_steps: self.ig_steps, ablations: Ablations::parse(&self.ablate)?, ..Default::default() };
        if self.ig_steps == 0 {
            return Err(Error::Config("ig_steps must be at least 1".into()));
        }
        Ok(cfg.fuse_options())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Stages,
    IgSteps,
    Lambda,
    Mu,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

/// Prefixes data errors with the file they came from.
fn at<T>(path: &Path, r: Result<T, Error>) -> Result<T, Failure> {
    r.map_err(|e| match Failure::from(e) {
        Failure::Data(m) => Failure::Data(format!("{}: {m}", path.display())),
        f => f,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (2, m),
                Failure::Data(m) => (3, m),
                Failure::Numeric(m) => (4, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { out, count, size, classes, seed } => {
            let samples = gen_synthetic(count, size, classes, seed)?;
            at(&out, write_dataset(&out, &samples))?;
            Ok(())
        }
        Command::Train { data, out, log, opts } => {
            let cfg = opts.config()?;
            let dataset = load_data(&data)?;
            let outcome = train(&cfg, &dataset)?;
            at(&out, save_checkpoint(&out, &outcome.model))?;
            if let Some(path) = log {
                let mut buf = Vec::new();
                write_log(&outcome.log, &mut buf).map_err(|e| io_err(&path, e))?;
                fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
            }
            match outcome.aborted {
                Some(e) => Err(Failure::Numeric(format!("training aborted after {} iterations: {e}", outcome.log.len()))),
                None => Ok(()),
            }
        }
        Command::Fuse { ckpt, ir, vi, out, dump_stages, opts } => {
            let model = at(&ckpt, load_checkpoint(&ckpt))?;
            let (ir, vi) = (at(&ir, read_pgm(&ir))?, at(&vi, read_pgm(&vi))?);
            let res = fuse(&model, &ir, &vi, &opts.options()?)?;
            at(&out, write_pgm(&out, &clamp01(res.output())))?;
            if let Some(dir) = dump_stages {
                fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
                for (k, s) in res.states.iter().enumerate() {
                    write_pgm(dir.join(format!("stage_{k}.pgm")), &clamp01(s))?;
                }
            }
            Ok(())
        }
        Command::Attribute { ckpt, ir, vi, out, opts } => {
            let model = at(&ckpt, load_checkpoint(&ckpt))?;
            let (ir, vi) = (at(&ir, read_pgm(&ir))?, at(&vi, read_pgm(&vi))?);
            let res = fuse(&model, &ir, &vi, &opts.options()?)?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            write_pgm(out.join("w1.pgm"), &res.weights.w1)?;
            write_pgm(out.join("w2.pgm"), &res.weights.w2)?;
            for (k, a) in res.attention.iter().enumerate() {
                write_pgm(out.join(format!("attention_{}.pgm", k + 1)), &a.map(|v| 1.0 / (1.0 + (-v).exp())))?;
            }
            Ok(())
        }
        Command::Eval { fused, ir, vi, json } => {
            let report = MetricReport::compute(
                &at(&fused, read_pgm(&fused))?,
                &at(&ir, read_pgm(&ir))?,
                &at(&vi, read_pgm(&vi))?,
            )?;
            let text = report.to_json();
            println!("{text}");
            if let Some(path) = json {
                fs::write(&path, format!("{text}\n")).map_err(|e| io_err(&path, e))?;
            }
            Ok(())
        }
        Command::Sweep { param, values, data, out, opts } => sweep(param, &values, &data, &out, &opts),
    }
}

fn load_data(dir: &Path) -> Result<Vec<SceneSample>, Failure> {
    let data = at(dir, read_dataset(dir))?;
    if data.is_empty() {
        return Err(Failure::Data(format!("{}: no *_ir.pgm samples", dir.display())));
    }
    Ok(data)
}

fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn sweep(param: SweepParam, values: &[f64], data: &Path, out: &Path, base: &TrainArgs) -> Result<(), Failure> {
    let dataset = load_data(data)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    let _ = writeln!(w, "value,en,sf,cc,qabf,ssim,l_total");
    for &v in values {
        let mut args = base.clone();
        let count = || {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Failure::Usage(format!("sweep value {v} must be a positive integer")))
            }
        };
        let name = match param {
            SweepParam::Stages => {
                args.stages = count()?;
                "stages"
            }
            SweepParam::IgSteps => {
                args.ig_steps = count()?;
                "ig_steps"
            }
            SweepParam::Lambda => {
                args.lambda = v;
                "lambda"
            }
            SweepParam::Mu => {
                args.mu = v;
                "mu"
            }
        };
        let cfg = args.config()?;
        let outcome = train(&cfg, &dataset)?;
        if let Some(e) = outcome.aborted {
            return Err(Failure::Numeric(format!("{name}={v}: {e}")));
        }
        save_checkpoint(out.join(format!("{name}_{v}.ckpt")), &outcome.model)?;
        let opts = cfg.fuse_options();
        let reports = dataset
            .iter()
            .map(|s| {
                let f = clamp01(fuse(&outcome.model, &s.ir, &s.vi, &opts)?.output());
                MetricReport::compute(&f, &s.ir, &s.vi)
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let m = MetricReport::mean(&reports).expect("dataset is non-empty");
        let opt = |x: Option<f64>| x.map_or_else(String::new, |x| format!("{x:.6}"));
        let last = outcome.log.last().map_or_else(String::new, |r| r.loss.l_total.to_string());
        let _ = writeln!(w, "{v},{:.6},{:.6},{},{},{:.6},{last}", m.en, m.sf, opt(m.cc), opt(m.qabf), m.ssim);
    }
    Ok(())
}
