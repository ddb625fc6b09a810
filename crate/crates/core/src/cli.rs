//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::read_checkpoint;
use crate::config::{KeyValues, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    accumulate_by_height, accumulate_metrics, bands_csv, compare_obstacle_sources, median_refine, metrics_csv,
    write_text, MetricSums,
};
use crate::network::Network;
use crate::refmap::build_reference;
use crate::scene_sim::{generate_dataset, read_camera_meta, read_scan, read_scene, DatasetSummary, SampleFiles, Split};
use crate::training::{ensure_dir, load_samples, predict_all, predict_full, train, TrainOutputs, TrainingSample};

pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(
    name = "depthfuse",
    version,
    about = "Depth from a monocular image and a planar laser scan"
)]
struct Cli {
    /// Worker threads (1 gives the reference single-threaded schedule).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key (repeatable), e.g. `--set batch_size=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_scenes: Option<usize>,
    },
    /// Train a model on a dataset's training split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// `reference=off` or `skip=off` (repeatable).
        #[arg(long)]
        ablate: Vec<String>,
        /// `cls` or `cls+reg`.
        #[arg(long)]
        loss: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long, required_unless_present = "ground_truth_oracle")]
        checkpoint: Option<PathBuf>,
        /// Config of the run (default: config.txt next to the checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use ground truth as the prediction (pipeline self-check).
        #[arg(long)]
        ground_truth_oracle: bool,
    },
    /// Predict a depth map for one sample directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the upsampled full-resolution map instead of the network
        /// output resolution.
        #[arg(long)]
        full_resolution: bool,
    },
    /// Render the reference depth map of a scan.
    RenderRef {
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = crate::refmap::DEFAULT_MEDIAN_WINDOW)]
        window: usize,
    },
    /// Compare obstacle maps from scans, a dense prediction and ground truth.
    Obstacle {
        /// Sample directory holding scene.txt, camera.txt and the rasters.
        #[arg(long)]
        sample: PathBuf,
        /// Checkpoint for the dense prediction (default: ground truth).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Laser heights in meters, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.8")]
        heights: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(args: &ConfigArgs) -> Result<(RunConfig, KeyValues)> {
    let mut kv = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            KeyValues::parse(&text)?
        }
        None => KeyValues::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        kv.set(k.trim(), v.trim());
    }
    let cfg = RunConfig::from_key_values(kv.clone())?;
    Ok((cfg, kv))
}

fn run_config_for(checkpoint: Option<&Path>, explicit: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::read(p);
    }
    if let Some(c) = checkpoint {
        let p = c.parent().unwrap_or(Path::new(".")).join(CONFIG_ECHO);
        if p.exists() {
            return RunConfig::read(&p);
        }
    }
    Ok(RunConfig::default())
}

fn load_network(cfg: &RunConfig, checkpoint: &Path) -> Result<Network> {
    let mut net = Network::new(cfg.network.clone())?;
    let store = read_checkpoint(checkpoint)?;
    net.load_params(&store)?;
    Ok(net)
}

fn apply_ablation(cfg: &mut RunConfig, spec: &str) -> Result<()> {
    match spec {
        "reference=off" => {
            cfg.network.ablation.reference_input = false;
            cfg.network.ablation.global_skip = false;
        }
        "skip=off" => cfg.network.ablation.global_skip = false,
        other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
    }
    Ok(())
}

fn cmd_gen_data(cfg: ConfigArgs, out: &Path, seed: Option<u64>, n_scenes: Option<usize>) -> Result<()> {
    let (mut rc, _) = resolve_config(&cfg)?;
    if let Some(s) = seed {
        rc.data.seed = s;
    }
    if let Some(n) = n_scenes {
        rc.data.n_scenes = n;
    }
    rc.validate()?;
    ensure_dir(out)?;
    generate_dataset(out, &rc.scene, rc.data.n_scenes, rc.data.split_ratio, rc.data.seed)?;
    rc.write(&out.join(CONFIG_ECHO))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: ConfigArgs,
    data: &Path,
    out: &Path,
    iterations: Option<usize>,
    seed: Option<u64>,
    ablate: &[String],
    loss: Option<&str>,
) -> Result<()> {
    let (mut rc, _) = resolve_config(&cfg)?;
    if let Some(n) = iterations {
        rc.train.iterations = n;
    }
    if let Some(s) = seed {
        rc.train.seed = s;
        rc.network.init_seed = s;
    }
    for a in ablate {
        apply_ablation(&mut rc, a)?;
    }
    if let Some(l) = loss {
        rc.train.loss = l.parse()?;
    }
    rc.validate()?;
    let summary = DatasetSummary::load(data)?;
    let samples = load_samples(summary.split(Split::Train))?;
    ensure_dir(out)?;
    rc.write(&out.join(CONFIG_ECHO))?;
    let mut net = Network::new(rc.network.clone())?;
    let outputs = TrainOutputs { dir: out.to_path_buf() };
    train(&mut net, &samples, &rc.train, Some(&outputs))?;
    Ok(())
}

/// Pooled metrics of predictions against ground truth, unrefined and
/// median-refined, globally and per height band.
pub struct EvalOutputs {
    pub metrics: String,
    pub metrics_refined: String,
    pub bands: String,
    pub bands_refined: String,
}

pub fn evaluate_predictions(
    rc: &RunConfig,
    samples: &[TrainingSample],
    preds: &[crate::raster::DepthMap],
) -> Result<EvalOutputs> {
    let bands = rc.eval.bands();
    let mut global = [MetricSums::default(); 2];
    let mut per_band = [
        vec![MetricSums::default(); bands.len()],
        vec![MetricSums::default(); bands.len()],
    ];
    for (s, p) in samples.iter().zip(preds) {
        let refined = median_refine(p, rc.eval.refine_window)?;
        for (i, pred) in [p, &refined].into_iter().enumerate() {
            accumulate_metrics(&mut global[i], pred, &s.gt, None)?;
            accumulate_by_height(&mut per_band[i], pred, &s.gt, &s.intrinsics, &s.gravity, &bands)?;
        }
    }
    let report = |m: &MetricSums| m.report().ok_or(Error::EmptyMask("metrics"));
    let band_reports = |v: &[MetricSums]| v.iter().map(MetricSums::report).collect::<Vec<_>>();
    Ok(EvalOutputs {
        metrics: metrics_csv(&report(&global[0])?),
        metrics_refined: metrics_csv(&report(&global[1])?),
        bands: bands_csv(&bands, &band_reports(&per_band[0])),
        bands_refined: bands_csv(&bands, &band_reports(&per_band[1])),
    })
}

fn cmd_eval(checkpoint: Option<&Path>, config: Option<&Path>, data: &Path, out: &Path, oracle: bool) -> Result<()> {
    let rc = run_config_for(checkpoint, config)?;
    let summary = DatasetSummary::load(data)?;
    let samples = load_samples(summary.split(Split::Test))?;
    if samples.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let preds = if oracle {
        samples.iter().map(|s| s.gt.clone()).collect()
    } else {
        let ckpt = checkpoint.ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
        let net = load_network(&rc, ckpt)?;
        predict_all(&net, &samples, rc.train.batch_size)?
    };
    let e = evaluate_predictions(&rc, &samples, &preds)?;
    ensure_dir(out)?;
    rc.write(&out.join(CONFIG_ECHO))?;
    write_text(&out.join("metrics.csv"), &e.metrics)?;
    write_text(&out.join("metrics_refined.csv"), &e.metrics_refined)?;
    write_text(&out.join("bands.csv"), &e.bands)?;
    write_text(&out.join("bands_refined.csv"), &e.bands_refined)
}

fn cmd_infer(checkpoint: &Path, config: Option<&Path>, sample: &Path, out: &Path, full: bool) -> Result<()> {
    let rc = run_config_for(Some(checkpoint), config)?;
    let net = load_network(&rc, checkpoint)?;
    let s = TrainingSample::load(&SampleFiles::from_dir(sample, Split::Test))?;
    let pred = if full {
        predict_full(&net, &s)?
    } else {
        net.predict(&s.image, &s.reference)?
    };
    pred.write_pfm(out)
}

fn cmd_render_ref(scan: &Path, camera: &Path, out: &Path, window: usize) -> Result<()> {
    let scan = read_scan(scan)?;
    let meta = read_camera_meta(camera)?;
    let r = build_reference(&scan, &meta.gravity, &meta.intrinsics, window)?;
    r.write(out)
}

fn cmd_obstacle(
    sample: &Path,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    heights: &[f64],
    out: &Path,
) -> Result<()> {
    let rc = run_config_for(checkpoint, config)?;
    let files = SampleFiles::from_dir(sample, Split::Test);
    let (scene, pose) = read_scene(&files.scene)?;
    let s = TrainingSample::load(&files)?;
    let dense = match checkpoint {
        Some(c) => predict_full(&load_network(&rc, c)?, &s)?,
        None => s.gt.clone(),
    };
    let cmp = compare_obstacle_sources(
        &scene,
        &pose,
        &s.intrinsics,
        heights,
        &dense,
        rc.eval.obstacle_height,
        rc.eval.obstacle_bins,
        rc.scene.max_range,
    )?;
    ensure_dir(out)?;
    write_text(&out.join("obstacles.csv"), &cmp.csv())?;
    write_text(&out.join("obstacle_summary.csv"), &cmp.summary_csv())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            cfg,
            out,
            seed,
            n_scenes,
        } => cmd_gen_data(cfg, &out, seed, n_scenes),
        Command::Train {
            cfg,
            data,
            out,
            iterations,
            seed,
            ablate,
            loss,
        } => cmd_train(cfg, &data, &out, iterations, seed, &ablate, loss.as_deref()),
        Command::Eval {
            checkpoint,
            config,
            data,
            out,
            ground_truth_oracle,
        } => cmd_eval(
            checkpoint.as_deref(),
            config.as_deref(),
            &data,
            &out,
            ground_truth_oracle,
        ),
        Command::Infer {
            checkpoint,
            config,
            sample,
            out,
            full_resolution,
        } => cmd_infer(&checkpoint, config.as_deref(), &sample, &out, full_resolution),
        Command::RenderRef {
            scan,
            camera,
            out,
            window,
        } => cmd_render_ref(&scan, &camera, &out, window),
        Command::Obstacle {
            sample,
            checkpoint,
            config,
            heights,
            out,
        } => cmd_obstacle(&sample, checkpoint.as_deref(), config.as_deref(), &heights, &out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| dispatch(cli)),
            Err(e) => Err(Error::Config(format!("thread pool: {e}"))),
        },
        None => dispatch(cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
