use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fusionseg::app::{self, SegSource};
use fusionseg::checkpoint::Checkpoint;
use fusionseg::config::RunConfig;
use fusionseg::data::{build_dataset, Manifest};
use fusionseg::image::GrayImage;
use fusionseg::train::bilevel::{verify_hypergrad, DEFAULT_DAMPING};
use fusionseg::Error;

/// Exit codes.
const VALIDATION: u8 = 1;
const USAGE: u8 = 2;
const IO: u8 = 3;

#[derive(Parser)]
#[command(name = "fusionseg", version, about = "Multimodal image fusion and segmentation, trained jointly")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic two-modality phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Pre-train the fusion encoder/decoder and discriminators.
    Pretrain(TrainArgs),
    /// Cooperative fusion + segmentation training.
    Train(TrainArgs),
    /// Fuse two registered images.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        m1: PathBuf,
        #[arg(long)]
        m2: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the low-band attention heat map.
        #[arg(long)]
        attn_out: Option<PathBuf>,
    },
    /// Segment a modality pair (through fusion) or an already fused image.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, requires = "m2", conflicts_with = "fused")]
        m1: Option<PathBuf>,
        #[arg(long, requires = "m1")]
        m2: Option<PathBuf>,
        #[arg(long, required_unless_present = "m1")]
        fused: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fusion quality metrics for lists of fused images and their sources.
    EvalFusion {
        #[arg(long, num_args = 1.., required = true)]
        fused: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        m1: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        m2: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segmentation metrics for predicted vs reference masks.
    EvalSeg {
        #[arg(long, num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        #[arg(long = "ref", num_args = 1.., required = true)]
        reference: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check implicit hypergradients against closed form on a toy problem.
    Verify {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Damping coefficient for the curvature solve; large values break the match.
        #[arg(long, default_value_t = DEFAULT_DAMPING)]
        damping: f64,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override a config key, e.g. `--set epochs_fusion=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl TrainArgs {
    fn config(&self) -> fusionseg::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) | Error::Dataset(_) | Error::Json(_) => IO,
        Error::Config(_) | Error::InvalidArgument { .. } | Error::Shape { .. } | Error::UnknownParam(_) => USAGE,
        Error::NonFinite(_) | Error::InnerNotConverged { .. } | Error::NonScalarLoss(_) => VALIDATION,
    }
}

fn run(cmd: Cmd) -> fusionseg::Result<u8> {
    match cmd {
        Cmd::GenData { out, cases, seed, size } => {
            build_dataset(cases, seed, size, &out)?;
            println!("{}", out.join(Manifest::FILE_NAME).display());
        }
        Cmd::Pretrain(args) => {
            let r = app::run_pretrain(&args.config()?, &args.data, &args.out)?;
            println!("{}", r.checkpoint.display());
        }
        Cmd::Train(args) => {
            let r = app::run_train(&args.config()?, &args.data, args.init.as_deref(), &args.out)?;
            println!("{}", r.checkpoint.display());
        }
        Cmd::Fuse { ckpt, m1, m2, out, attn_out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (fused, heat) = app::fuse_images(&ck, &GrayImage::read_pgm(&m1)?, &GrayImage::read_pgm(&m2)?)?;
            fused.write_pgm(&out)?;
            if let Some(p) = attn_out {
                let heat = heat.ok_or_else(|| Error::Config("model has no cross-attention to export".into()))?;
                heat.write_pgm(&p)?;
            }
        }
        Cmd::Segment { ckpt, m1, m2, fused, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mask = match (m1, m2, fused) {
                (Some(a), Some(b), _) => {
                    let (x, y) = (GrayImage::read_pgm(&a)?, GrayImage::read_pgm(&b)?);
                    app::segment_image(&ck, SegSource::Pair(&x, &y))?
                }
                (_, _, Some(f)) => app::segment_image(&ck, SegSource::Fused(&GrayImage::read_pgm(&f)?))?,
                _ => return Err(Error::Config("give --m1 and --m2, or --fused".into())),
            };
            mask.write_pgm(&out)?;
        }
        Cmd::EvalFusion { fused, m1, m2, out } => {
            let mean = app::eval_fusion(&fused, &m1, &m2, &out)?;
            println!("{}", serde_json::to_string(&mean)?);
        }
        Cmd::EvalSeg { pred, reference, out } => {
            let mean = app::eval_seg(&pred, &reference, &out)?;
            println!("{}", serde_json::to_string(&mean)?);
        }
        Cmd::Verify { seed, damping, out } => {
            let report = verify_hypergrad(seed, damping)?;
            let json = report.to_json()?;
            println!("{json}");
            if let Some(p) = out {
                write(&p, json.as_bytes())?;
            }
            return Ok(if report.pass { 0 } else { VALIDATION });
        }
    }
    Ok(0)
}

fn write(path: &Path, bytes: &[u8]) -> fusionseg::Result<()> {
    fusionseg::data::write_atomic(path, bytes)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
