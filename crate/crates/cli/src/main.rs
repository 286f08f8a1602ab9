//! `wdst`: fuse a distortion-optimized and a perception-optimized image.
//!
//! Exit codes: 0 success, 1 usage/contract/configuration error, 2 I/O error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wdst_core::imgcore::{load_image, save_image};
use wdst_core::lse::{lse_train, synthetic_deblur_dataset, write_history, LseNetwork, TrainConfig};
use wdst_core::metrics::{subband_histogram, Histogram};
use wdst_core::pipeline::training::lse_pairs_from_images;
use wdst_core::pipeline::{
    parse_skip, pd_curve, pd_curve_csv, substitution_experiment, FeatureWeights, FusionConfig,
    FusionEngine, FusionReport,
};
use wdst_core::wavelet::{dump_pyramid, swt2, FilterFamily};
use wdst_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "wdst", version, about = "Wavelet-domain style transfer fusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file; omitted fields take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Wavelet family (haar, db2, db4, bior2.2, bior4.4, rbio2.2, coif2)
    #[arg(long, global = true)]
    filter: Option<String>,
    /// Decomposition levels
    #[arg(long, global = true)]
    levels: Option<usize>,
    /// Worker threads (WDST_THREADS takes precedence)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for the random feature network and for training
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write per-iteration optimizer records to <out>.trace.jsonl
    #[arg(long, global = true)]
    trace: bool,
}

#[derive(Args, Debug)]
struct Pair {
    /// Distortion-optimized input (content)
    #[arg(long)]
    content: PathBuf,
    /// Perception-optimized input (style)
    #[arg(long)]
    style: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fuse two images; writes the image and <out>.report.jsonl
    Fuse {
        #[command(flatten)]
        pair: Pair,
        /// Ground truth for PSNR/SSIM rows
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON object of externally computed scores keyed by image (A_o, A_p, A_r)
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Fuse while passing the listed orientations through unchanged
    Ablate {
        #[command(flatten)]
        pair: Pair,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated orientations to skip: lh,hl,hh
        #[arg(long, default_value = "")]
        skip: String,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Swap LL bands between the inputs and score all four images
    Substitute {
        #[command(flatten)]
        pair: Pair,
        #[arg(long)]
        gt: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// PSNR and histogram distance along mu * style + (1 - mu) * content
    PdCurve {
        #[command(flatten)]
        pair: Pair,
        #[arg(long)]
        gt: PathBuf,
        /// CSV output
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated mu values
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        mu: String,
    },
    /// Train the LL enhancement network; writes weights and <out>.loss.txt
    LseTrain {
        /// Clean training images (synthetic deblur data when none are given)
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        /// Bicubic degradation factor for image-based pairs
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = 32)]
        patch: usize,
        /// Number of synthetic patches
        #[arg(long, default_value_t = 200)]
        synthetic: usize,
        /// Start from these weights instead of a fresh init
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Write every sub-band as a PGM plus scales.txt
    SwtDump {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Also write a 64-bin histogram CSV per band
        #[arg(long)]
        histograms: bool,
    },
}

fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn load_config(common: &Common) -> Result<FusionConfig> {
    let mut cfg = match &common.config {
        Some(p) => FusionConfig::load(p)?,
        None => FusionConfig::default(),
    };
    if let Some(f) = &common.filter {
        cfg.wavelet = f.parse::<FilterFamily>()?;
    }
    if let Some(l) = common.levels {
        cfg.levels = l;
    }
    if let (Some(s), FeatureWeights::Random { seed, .. }) = (common.seed, &mut cfg.feature_weights)
    {
        *seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_scores(path: &Option<PathBuf>) -> Result<Option<BTreeMap<String, f64>>> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map(Some).map_err(|e| {
        Error::Config(format!(
            "{}: scores must be a JSON object of numbers: {e}",
            path.display()
        ))
    })
}

fn write_reports(
    report: &mut FusionReport,
    out: &Path,
    command: &str,
    trace: bool,
    scores: &Option<PathBuf>,
) -> Result<()> {
    if let Some(s) = load_scores(scores)? {
        report.attach_external_scores(&s);
    }
    report.write_jsonl(with_suffix(out, ".report.jsonl"), command)?;
    if trace {
        report.write_trace(with_suffix(out, ".trace.jsonl"))?;
    }
    Ok(())
}

fn parse_mu(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad mu value {s:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Fuse {
            pair,
            gt,
            out,
            scores,
        } => {
            let engine = FusionEngine::new(load_config(common)?)?;
            let a_o = load_image(&pair.content)?;
            let a_p = load_image(&pair.style)?;
            let gt = gt.as_ref().map(load_image).transpose()?;
            let (img, mut report) = engine.fuse_with_reference(&a_o, &a_p, gt.as_ref())?;
            save_image(&img, out)?;
            write_reports(&mut report, out, "fuse", common.trace, scores)
        }
        Command::Ablate {
            pair,
            gt,
            out,
            skip,
            scores,
        } => {
            let skip = parse_skip(skip)?;
            let engine = FusionEngine::new(load_config(common)?)?;
            let a_o = load_image(&pair.content)?;
            let a_p = load_image(&pair.style)?;
            let gt = gt.as_ref().map(load_image).transpose()?;
            let (img, mut report) = engine.ablation_fuse(&a_o, &a_p, &skip, gt.as_ref())?;
            save_image(&img, out)?;
            write_reports(&mut report, out, "ablate", common.trace, scores)
        }
        Command::Substitute {
            pair,
            gt,
            out,
            scores,
        } => {
            let cfg = load_config(common)?;
            let a_o = load_image(&pair.content)?;
            let a_p = load_image(&pair.style)?;
            let gt = load_image(gt)?;
            let mut sub = substitution_experiment(&a_o, &a_p, &gt, &cfg)?;
            std::fs::create_dir_all(out).map_err(|e| Error::Io {
                path: out.clone(),
                reason: e.to_string(),
            })?;
            save_image(&sub.tilde_p, out.join("tilde_p.png"))?;
            save_image(&sub.tilde_o, out.join("tilde_o.png"))?;
            write_reports(
                &mut sub.report,
                &out.join("substitute"),
                "substitute",
                false,
                scores,
            )
        }
        Command::PdCurve { pair, gt, out, mu } => {
            let cfg = load_config(common)?;
            let mus = parse_mu(mu)?;
            let a_o = load_image(&pair.content)?;
            let a_p = load_image(&pair.style)?;
            let gt = load_image(gt)?;
            let points = pd_curve(&a_o, &a_p, &gt, &mus, &cfg)?;
            std::fs::write(out, pd_curve_csv(&points)).map_err(|e| Error::Io {
                path: out.clone(),
                reason: e.to_string(),
            })
        }
        Command::LseTrain {
            images,
            out,
            epochs,
            batch,
            lr,
            momentum,
            scale,
            patch,
            synthetic,
            init,
        } => {
            let cfg = load_config(common)?;
            let seed = common.seed.unwrap_or(0);
            let data = if images.is_empty() {
                synthetic_deblur_dataset(*synthetic, *patch, 1.5, seed)
            } else {
                let planes = images
                    .iter()
                    .map(|p| load_image(p).map(|img| img.luma()))
                    .collect::<Result<Vec<_>>>()?;
                lse_pairs_from_images(&planes, &cfg.filter(), cfg.levels, *scale, *patch, *patch)?
            };
            let net = match init {
                Some(p) => LseNetwork::load(p)?,
                None => LseNetwork::he_uniform(seed),
            };
            let train = TrainConfig {
                batch_size: *batch,
                learning_rate: *lr,
                momentum: *momentum,
                epochs: *epochs,
                seed,
                ..Default::default()
            };
            log::info!("training on {} pairs", data.len());
            let outcome = lse_train(net, &data, &train)?;
            outcome.net.save(out)?;
            write_history(with_suffix(out, ".loss.txt"), &outcome.history)
        }
        Command::SwtDump {
            input,
            out,
            histograms,
        } => {
            let cfg = load_config(common)?;
            let img = load_image(input)?;
            let pyr = swt2(&img.luma(), &cfg.filter(), cfg.levels)?;
            dump_pyramid(&pyr, out)?;
            if *histograms {
                for (name, band) in pyr.named_bands() {
                    let (lo, hi) = band.min_max();
                    let hist: Histogram = if hi > lo {
                        subband_histogram(band, 64, (lo, hi))?
                    } else {
                        subband_histogram(band, 64, (lo - 0.5, lo + 0.5))?
                    };
                    hist.write_csv(out.join(format!("{name}.hist.csv")))?;
                }
            }
            Ok(())
        }
    }
}

fn configure_threads(requested: Option<usize>) {
    let from_env = std::env::var("WDST_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = from_env.or(requested) {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    configure_threads(cli.common.threads);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wdst: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
