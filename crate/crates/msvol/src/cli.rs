//! Command-line interface: volume construction, classical disparity
//! estimation, toy network training, and disparity evaluation.
//!
//! Every subcommand exits 0 only when its artifact was fully written;
//! any error is reported on stderr and exits with status 2.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::confidence::SigmaConfig;
use crate::error::{Error, Result};
use crate::imagio::{
    load_gray, read_disparity_auto, write_disparity_auto, DisparityMap, GrayImage,
    DEFAULT_CHANNEL_WEIGHTS,
};
use crate::matchers::MatcherConfig;
use crate::metrics::{bad_x, random_dot_pair, EvalResult};
use crate::regress::{
    mean_cost_volume, soft_argmin, wta, LossWeights, DEFAULT_SHARPNESS_CLASSICAL,
};
use crate::toynet::{train_step, ParamStore, ToyNetConfig, Variant};
use crate::volume::{build_matching_volume_with_stats, write_msv, FEATURE_NAMES};

/// Learning rate at which the bundled synthetic training run converges
/// comfortably within 100 steps.
pub const DEFAULT_LR: f64 = 0.05;

const SYNTHETIC_SIZE: usize = 64;
const SYNTHETIC_D: usize = 8;

#[derive(Parser, Debug)]
#[command(
    name = "msvol",
    about = "Stereo matching volumes: classical costs, confidences, disparity regression, and a toy 3-D regularizer",
    version
)]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (fallback: MSVOL_THREADS env var, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the 8-feature matching volume for a stereo pair and write it
    /// as an MSV1 file.
    Volume(VolumeArgs),
    /// Estimate a disparity map with the classical pipeline (mean of the
    /// normalized cost features, then WTA or soft-argmin).
    Disparity(DisparityArgs),
    /// Train the toy 3-D regularizer on one stereo sample (or the built-in
    /// synthetic pair) and write an MSNP checkpoint.
    TrainToy(TrainToyArgs),
    /// Evaluate a predicted disparity map against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SigmaArgs {
    /// Likelihood sigma for the NCC cost channel.
    #[arg(long, default_value_t = SigmaConfig::default().ncc)]
    pub sigma_ncc: f64,
    /// Likelihood sigma for the ZSAD cost channel.
    #[arg(long, default_value_t = SigmaConfig::default().zsad)]
    pub sigma_zsad: f64,
    /// Likelihood sigma for the census cost channel.
    #[arg(long, default_value_t = SigmaConfig::default().census)]
    pub sigma_census: f64,
    /// Likelihood sigma for the Sobel cost channel.
    #[arg(long, default_value_t = SigmaConfig::default().sobel)]
    pub sigma_sobel: f64,
}

impl SigmaArgs {
    fn to_config(&self) -> SigmaConfig {
        SigmaConfig {
            ncc: self.sigma_ncc,
            zsad: self.sigma_zsad,
            census: self.sigma_census,
            sobel: self.sigma_sobel,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ResolutionArgs {
    /// Pool the pair to half resolution before matching (the default).
    #[arg(long, conflicts_with = "full_res")]
    pub half_res: bool,
    /// Match at full resolution.
    #[arg(long)]
    pub full_res: bool,
}

impl ResolutionArgs {
    fn half(&self) -> bool {
        !self.full_res
    }
}

#[derive(Args, Debug)]
pub struct VolumeArgs {
    /// Left image (8-bit PNG or PGM).
    #[arg(long)]
    pub left: PathBuf,
    /// Right image (8-bit PNG or PGM).
    #[arg(long)]
    pub right: PathBuf,
    /// Number of disparity hypotheses at full resolution.
    #[arg(long, default_value_t = 192)]
    pub dmax: usize,
    #[command(flatten)]
    pub res: ResolutionArgs,
    #[command(flatten)]
    pub sigma: SigmaArgs,
    /// Output MSV1 file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Method {
    Wta,
    Softargmin,
}

#[derive(Args, Debug)]
pub struct DisparityArgs {
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    /// Number of disparity hypotheses at full resolution.
    #[arg(long, default_value_t = 192)]
    pub dmax: usize,
    #[command(flatten)]
    pub res: ResolutionArgs,
    /// Disparity selection rule.
    #[arg(long, value_enum, default_value_t = Method::Wta)]
    pub method: Method,
    /// Softmax sharpness for the softargmin method.
    #[arg(long, default_value_t = DEFAULT_SHARPNESS_CLASSICAL)]
    pub sharpness: f64,
    #[command(flatten)]
    pub sigma: SigmaArgs,
    /// Output disparity file; `.pfm` writes PFM, `.png` writes 16-bit PNG
    /// with 1/256 quantization.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional ground truth (.pfm or .png) to evaluate against.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Optional non-occlusion mask PNG (nonzero = evaluate).
    #[arg(long)]
    pub noc_mask: Option<PathBuf>,
    /// Bad-x thresholds for the evaluation rows.
    #[arg(long, value_delimiter = ',', default_values_t = [3.0])]
    pub thresholds: Vec<f64>,
    /// Dataset label for result rows.
    #[arg(long, default_value = "custom")]
    pub dataset: String,
    /// Pair label for result rows.
    #[arg(long, default_value = "0")]
    pub pair_id: String,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum VariantArg {
    Gc,
    Psm,
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    /// Left image; requires --right and --gt.
    #[arg(long, requires_all = ["right", "gt"], conflicts_with = "synthetic")]
    pub left: Option<PathBuf>,
    #[arg(long)]
    pub right: Option<PathBuf>,
    /// Ground-truth disparity (.pfm or .png).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Train on the built-in 64x64 random-dot pair instead of files.
    #[arg(long)]
    pub synthetic: bool,
    /// Number of disparity hypotheses (the volume is built at full
    /// resolution for training).
    #[arg(long, default_value_t = SYNTHETIC_D)]
    pub dmax: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    pub lr: f64,
    /// Seed for the network initialization and the synthetic pair.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = VariantArg::Psm)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 4)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    #[command(flatten)]
    pub sigma: SigmaArgs,
    /// Output MSNP checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV file receiving one `step,loss` row per step.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted disparity (.pfm or .png).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth disparity (.pfm or .png).
    #[arg(long)]
    pub gt: PathBuf,
    /// Optional non-occlusion mask PNG (nonzero = evaluate); adds a `noc`
    /// row per threshold next to the `all` row.
    #[arg(long)]
    pub noc_mask: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [3.0])]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value = "custom")]
    pub dataset: String,
    #[arg(long, default_value = "0")]
    pub pair_id: String,
}

/// Parse the process arguments, run, and return the exit code.
pub fn run() -> i32 {
    let cfg = RunConfig::parse();
    match execute(cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            2
        }
    }
}

fn execute(cfg: RunConfig) -> Result<()> {
    if let Some(n) = resolve_threads(cfg.threads)? {
        // The pool can only be installed once per process; a failure here
        // means it is already running, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cfg.command {
        Command::Volume(a) => cmd_volume(a),
        Command::Disparity(a) => cmd_disparity(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    let (n, source) = match flag {
        Some(n) => (Some(n), "--threads"),
        None => match std::env::var("MSVOL_THREADS") {
            Ok(s) => {
                let n = s.parse::<usize>().map_err(|_| {
                    Error::Config(format!(
                        "MSVOL_THREADS must be a positive integer, got {:?}",
                        s
                    ))
                })?;
                (Some(n), "MSVOL_THREADS")
            }
            Err(_) => (None, ""),
        },
    };
    if n == Some(0) {
        return Err(Error::Config(format!("{} must be >= 1", source)));
    }
    Ok(n)
}

fn load_pair(left: &PathBuf, right: &PathBuf) -> Result<(GrayImage, GrayImage)> {
    Ok((
        load_gray(left, DEFAULT_CHANNEL_WEIGHTS)?,
        load_gray(right, DEFAULT_CHANNEL_WEIGHTS)?,
    ))
}

fn cmd_volume(a: VolumeArgs) -> Result<()> {
    let (left, right) = load_pair(&a.left, &a.right)?;
    let t0 = Instant::now();
    let (vol, stats) = build_matching_volume_with_stats(
        &left,
        &right,
        a.dmax,
        &MatcherConfig::default(),
        &a.sigma.to_config(),
        a.res.half(),
    )?;
    let feature_time = t0.elapsed().as_secs_f64();
    println!(
        "volume dims: {}x{}x{}x{} (DxHxWxF)",
        vol.d_max, vol.height, vol.width, vol.n_features
    );
    for k in 0..vol.n_features {
        println!(
            "channel {}: raw min {:.6} max {:.6}",
            FEATURE_NAMES[k], stats.channel_min[k], stats.channel_max[k]
        );
    }
    println!("feature time: {:.3} s", feature_time);
    write_msv(&vol, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn print_result_header() {
    println!("dataset,pair_id,threshold,mask,bad_rate,avg_err,n_evaluated");
}

fn print_result_row(dataset: &str, pair_id: &str, r: &EvalResult) {
    println!(
        "{},{},{},{},{:.4},{:.4},{}",
        dataset,
        pair_id,
        r.threshold,
        r.mask_mode.label(),
        r.bad_rate,
        r.avg_err,
        r.n_evaluated
    );
}

fn load_noc_mask(path: &PathBuf, width: usize, height: usize) -> Result<Vec<bool>> {
    let img = load_gray(path, DEFAULT_CHANNEL_WEIGHTS)?;
    if img.width != width || img.height != height {
        return Err(Error::Size(format!(
            "{}: mask is {}x{}, expected {}x{}",
            path.display(),
            img.width,
            img.height,
            width,
            height
        )));
    }
    Ok(img.data.iter().map(|&v| v != 0.0).collect())
}

fn evaluate_against(
    pred: &DisparityMap,
    gt_path: &PathBuf,
    noc_path: Option<&PathBuf>,
    thresholds: &[f64],
    dataset: &str,
    pair_id: &str,
) -> Result<()> {
    let gt = read_disparity_auto(gt_path)?;
    let mask = match noc_path {
        Some(p) => Some(load_noc_mask(p, gt.width, gt.height)?),
        None => None,
    };
    print_result_header();
    for &x in thresholds {
        print_result_row(dataset, pair_id, &bad_x(pred, &gt, x, None)?);
        if let Some(m) = &mask {
            print_result_row(dataset, pair_id, &bad_x(pred, &gt, x, Some(m))?);
        }
    }
    Ok(())
}

fn cmd_disparity(a: DisparityArgs) -> Result<()> {
    let (left, right) = load_pair(&a.left, &a.right)?;
    let (vol, _) = build_matching_volume_with_stats(
        &left,
        &right,
        a.dmax,
        &MatcherConfig::default(),
        &a.sigma.to_config(),
        a.res.half(),
    )?;
    let mean = mean_cost_volume(&vol);
    let mut map = match a.method {
        Method::Wta => wta(&mean),
        Method::Softargmin => soft_argmin(&mean, a.sharpness)?,
    };
    if a.res.half() {
        map = map.upsample_double();
    }
    write_disparity_auto(&map, &a.out)?;
    println!("wrote {}", a.out.display());
    if let Some(gt) = &a.gt {
        evaluate_against(&map, gt, a.noc_mask.as_ref(), &a.thresholds, &a.dataset, &a.pair_id)?;
    }
    Ok(())
}

fn cmd_train_toy(a: TrainToyArgs) -> Result<()> {
    if !a.synthetic && a.left.is_none() {
        return Err(Error::Config(
            "either --synthetic or --left/--right/--gt must be given".to_string(),
        ));
    }
    let (left, right, gt) = if a.synthetic {
        random_dot_pair(SYNTHETIC_SIZE, SYNTHETIC_SIZE, SYNTHETIC_D - 1, a.seed)?
    } else {
        let (l, r) = load_pair(a.left.as_ref().unwrap(), a.right.as_ref().unwrap())?;
        let gt = read_disparity_auto(a.gt.as_ref().unwrap())?;
        (l, r, gt)
    };
    // Training consumes the full-resolution volume so the ground truth
    // aligns pixel-for-pixel with the network output.
    let (vol, _) = build_matching_volume_with_stats(
        &left,
        &right,
        a.dmax,
        &MatcherConfig::default(),
        &a.sigma.to_config(),
        false,
    )?;
    let cfg = ToyNetConfig {
        in_features: vol.n_features,
        base_channels: a.base_channels,
        levels: a.levels,
        variant: match a.variant {
            VariantArg::Gc => Variant::Gc,
            VariantArg::Psm => Variant::Psm,
        },
    };
    let mut store = ParamStore::init(&cfg, a.seed)?;
    let weights = LossWeights::default();
    let mut csv = String::from("step,loss\n");
    let mut final_loss = f64::NAN;
    for step in 0..a.steps {
        let loss = train_step(&mut store, &cfg, &vol, &gt, a.lr, &weights)?;
        if !loss.is_finite() {
            return Err(Error::Eval(format!(
                "training diverged: loss {} at step {}",
                loss, step
            )));
        }
        csv.push_str(&format!("{},{:.12}\n", step, loss));
        final_loss = loss;
    }
    if let Some(path) = &a.loss_csv {
        std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
        println!("wrote {}", path.display());
    }
    if a.steps > 0 {
        println!("final loss: {:.6}", final_loss);
    }
    store.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pred = read_disparity_auto(&a.pred)?;
    evaluate_against(&pred, &a.gt, a.noc_mask.as_ref(), &a.thresholds, &a.dataset, &a.pair_id)
}
