use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bcnn::bench::{self, Comparison};
use bcnn::engine::Engine;
use bcnn::error::Error;
use bcnn::model::{InputMode, Layer, ModelDescriptor, ReferenceConfig};
use bcnn::oracle;
use bcnn::preproc;

#[derive(Parser)]
#[command(name = "bcnn", version, about = "Packed XNOR/popcount inference for binarized CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify one PPM/PGM image.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Time the packed forward pass on seeded random images.
    Bench(BenchArgs),
    /// Time the packed path against a full-precision forward pass.
    BenchBaseline(BenchArgs),
    /// Compare the packed engine against the reference evaluation.
    Validate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip one kernel bit in the engine's copy of the model.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write a model with the reference architecture and random weights.
    GenModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::ThresholdRgb)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[arg(long, default_value_t = 96)]
        width: usize,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print one row per layer.
    #[arg(long)]
    layerwise: bool,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    None,
    ThresholdRgb,
    ThresholdGray,
    Lbp,
}

impl From<Mode> for InputMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::None => InputMode::None,
            Mode::ThresholdRgb => InputMode::ThresholdRgb,
            Mode::ThresholdGray => InputMode::ThresholdGray,
            Mode::Lbp => InputMode::Lbp,
        }
    }
}

enum Failure {
    /// Exit 1 with the message already printed.
    Reported,
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. }
        | Error::Image(_)
        | Error::ShapeMismatch { .. }
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::Truncated { .. }
        | Error::Validation { .. }
        | Error::Model(_)
        | Error::Corrupt(_)
        | Error::UnsupportedKernel(_) => 2,
        Error::Parameter(_) | Error::Config(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Reported) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { model, image } => run(&model, &image),
        Command::Bench(a) => bench_cmd(a, false),
        Command::BenchBaseline(a) => bench_cmd(a, true),
        Command::Validate {
            model,
            samples,
            seed,
            inject_fault,
        } => validate(&model, samples as usize, seed, inject_fault),
        Command::GenModel {
            out,
            mode,
            seed,
            height,
            width,
        } => {
            let cfg = ReferenceConfig {
                height,
                width,
                ..ReferenceConfig::with_mode(mode.into())
            };
            let m = cfg.random_model(seed)?;
            m.save(&out)?;
            println!(
                "wrote {} ({} input {}, {} layers)",
                out.display(),
                m.input_mode(),
                m.input_shape(),
                m.layers().len()
            );
            Ok(())
        }
    }
}

fn run(model_path: &Path, image_path: &Path) -> Result<(), Failure> {
    let model = ModelDescriptor::load(model_path)?;
    let mut image = preproc::load_image(image_path)?;
    let expected = model.input_shape();
    if expected.channels == 1 && image.shape().channels == 3 {
        image = preproc::grayscale(&image)?;
    }
    let out = Engine::default().forward(&model, &image)?;
    let scores: Vec<String> = out.scores.iter().map(|s| format!("{s:.6}")).collect();
    println!("class={}", out.class);
    println!("scores=[{}]", scores.join(", "));
    println!("input_mode={}", model.input_mode());
    Ok(())
}

fn write_csv(path: &Path, body: &str) -> Result<(), Failure> {
    std::fs::write(path, body).map_err(|e| Failure::Error(Error::Io {
        path: path.to_owned(),
        source: e,
    }))
}

fn bench_cmd(a: BenchArgs, with_baseline: bool) -> Result<(), Failure> {
    let model = ModelDescriptor::load(&a.model)?;
    let samples = a.samples as usize;
    let packed = bench::bench_packed(&Engine::default(), &model, samples, a.seed)?;
    if with_baseline {
        let baseline = bench::bench_baseline(&model, samples, a.seed)?;
        let cmp = Comparison::new(packed, baseline)?;
        println!("{cmp}");
        if let Some(p) = &a.csv {
            write_csv(p, &cmp.to_csv())?;
        }
    } else {
        println!("{}", packed.display(a.layerwise));
        if let Some(p) = &a.csv {
            write_csv(p, &packed.to_csv())?;
        }
    }
    Ok(())
}

fn with_fault(model: &ModelDescriptor) -> ModelDescriptor {
    let (mode, shape, thresholds, mut layers) = model.clone().into_parts();
    let slot = layers
        .iter_mut()
        .find(|l| matches!(l, Layer::ConvBinary(_) | Layer::ConvFloatInput(_)));
    if let Some(Layer::ConvBinary(w) | Layer::ConvFloatInput(w)) = slot {
        *w = w.with_flipped_bit(0, 0, w.bitwidth() / 2);
    }
    ModelDescriptor::new(mode, shape, thresholds, layers).expect("same shapes as a valid model")
}

fn validate(path: &Path, samples: usize, seed: u64, inject_fault: bool) -> Result<(), Failure> {
    let model = ModelDescriptor::load(path)?;
    let engine_model = if inject_fault { with_fault(&model) } else { model.clone() };
    let start = Instant::now();
    let report =
        oracle::check_equivalence_between(&Engine::default(), &engine_model, &model, samples, seed)?;
    println!("{report}");
    println!("elapsed {:.1} s", start.elapsed().as_secs_f64());
    if report.is_equivalent() {
        Ok(())
    } else {
        Err(Failure::Reported)
    }
}
