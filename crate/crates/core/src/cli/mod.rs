//! Command-line front end. [`run`] maps errors to exit codes:
//! 0 ok, 2 usage, 3 data, 4 numeric.

pub mod container;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::metrics::{bd_rate, RdCurve};
use crate::net::Codec;
use crate::netpbm::RgbImage;
use crate::region::RegionMap;
use crate::tensor::ParamStore;
use crate::train::{eval_rd, train_loop, trace_csv, Sample, TrainConfig};
use container::{decode_image, encode_image, self_test, RegionSource};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Overrides the training seed.
pub const SEED_ENV: &str = "SEGCODEC_SEED";

#[derive(Parser, Debug)]
#[command(name = "segcodec", version, about = "Region-adaptive learned image codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
#[group(multiple = false)]
struct RegionArgs {
    /// Side of the grid partition (1..=8). Default 4.
    #[arg(long)]
    grid: Option<usize>,
    /// PGM label map; the decoder needs the same file.
    #[arg(long)]
    regions: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress a PPM image into a container.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        regions: RegionArgs,
        /// Decode the result and check it matches the encoder.
        #[arg(long)]
        verify: bool,
    },
    /// Reconstruct a PPM image from a container.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        regions: Option<PathBuf>,
    },
    /// Train on the synthetic dataset described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV. Defaults to `<out>.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Code every PPM in a directory and write `bpp,psnr,image` rows.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 4)]
        grid: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// BD-rate of one `bpp,psnr` CSV against another.
    Bdrate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn load_model(path: &Path) -> Result<(Codec, ParamStore)> {
    let p = ParamStore::read_from(std::fs::File::open(path)?)?;
    Ok((Codec::for_params(&p)?, p))
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Usage(format!("{SEED_ENV}='{v}' is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    v.sort();
    Ok(v)
}

fn execute(cmd: Command, out: &mut dyn std::io::Write) -> Result<()> {
    match cmd {
        Command::Encode { input, model, out: dst, regions, verify } => {
            let (codec, p) = load_model(&model)?;
            let img = RgbImage::load(&input)?.to_tensor();
            let source = match (regions.grid, regions.regions) {
                (_, Some(path)) => RegionSource::External(RegionMap::load(path)?),
                (n, None) => RegionSource::Grid(n.unwrap_or(4)),
            };
            let enc = if verify { self_test(&codec, &p, &img, &source)? } else { encode_image(&codec, &p, &img, &source)? };
            std::fs::write(&dst, &enc.bytes)?;
            let bpp = crate::metrics::bpp(enc.bytes.len(), img.dim(1), img.dim(2));
            writeln!(out, "{} bytes, {bpp:.4} bpp", enc.bytes.len())?;
        }
        Command::Decode { input, model, out: dst, regions } => {
            let (codec, p) = load_model(&model)?;
            let rm = regions.map(RegionMap::load).transpose()?;
            let img = decode_image(&codec, &p, &std::fs::read(&input)?, rm.as_ref())?;
            RgbImage::from_tensor(&img)?.save(&dst)?;
        }
        Command::Train { config, out: dst, trace } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed_override()? {
                cfg.seed = s;
            }
            let codec = Codec::new(cfg.net.clone())?;
            let init = codec.init(cfg.seed)?;
            let data = cfg.dataset()?;
            let steps = cfg.steps;
            let res = train_loop(&cfg, &data, init, |r| {
                if r.step % 100 == 0 || r.step == steps {
                    eprintln!("step {:>6}  loss {:.5}  bpp {:.4}  psnr {:.2}", r.step, r.loss.total, r.loss.rate(), r.psnr);
                }
            })?;
            res.params.write_to(std::fs::File::create(&dst)?)?;
            let trace = trace.unwrap_or_else(|| {
                let mut s = dst.clone().into_os_string();
                s.push(".trace.csv");
                s.into()
            });
            std::fs::write(trace, trace_csv(&res.trace))?;
        }
        Command::Eval { model, dir, csv, grid } => {
            let (codec, p) = load_model(&model)?;
            let files = ppm_files(&dir)?;
            if files.is_empty() {
                return Err(Error::Usage(format!("no .ppm files in {}", dir.display())));
            }
            let data = files
                .iter()
                .map(|f| {
                    let image = RgbImage::load(f)?.to_tensor();
                    let regions = RegionMap::uniform(image.dim(1), image.dim(2));
                    Ok(Sample { image, regions, seeds: Vec::new() })
                })
                .collect::<Result<Vec<_>>>()?;
            let pts = eval_rd(&codec, &p, &data, |_| RegionSource::Grid(grid))?;
            let mut s = String::from("bpp,psnr,image\n");
            for (pt, f) in pts.iter().zip(&files) {
                writeln!(s, "{},{},{}", pt.bpp, pt.psnr, f.file_name().unwrap().to_string_lossy()).unwrap();
            }
            std::fs::write(&csv, s)?;
        }
        Command::Gradcheck { module } => {
            let mut failed = Vec::new();
            for o in crate::gradsuite::run(&module)? {
                let status = if o.passed() { "ok" } else { "FAIL" };
                let worst = o.report.worst().map(|w| w.0.as_str()).unwrap_or("-");
                writeln!(
                    out,
                    "{:<8} {status:<4} max rel err {:.3e} over {} elements (worst {worst}) in {:.1}s",
                    o.module,
                    o.max_rel_error(),
                    o.checked(),
                    o.seconds
                )?;
                if !o.passed() {
                    failed.push(o.module);
                }
            }
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Bdrate { test, anchor } => {
            let d = bd_rate(&RdCurve::load(test)?, &RdCurve::load(anchor)?)?;
            writeln!(out, "{d:.2}")?;
        }
    }
    Ok(())
}

/// Parse `args` (program name first) and run. Returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    match execute(cli.cmd, &mut stdout.lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("segcodec: {e}");
            exit_code(&e)
        }
    }
}
