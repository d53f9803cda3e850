use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use headgap::config::RunConfig;
use headgap::diffengine::Tensor;
use headgap::gapnet::Identity;
use headgap::headmodel::HeadTemplate;
use headgap::pipeline::{
    self, finetune, invert, metrics, psnr, reenact, reference_cameras, reference_drift, shot_samples, train_prior,
    Avatar, CsvLog, Phase,
};
use headgap::raster::{load_png_rgb, save_png_rgb};
use headgap::synthdata::{generate_dataset, load_dataset, write_dataset, Dataset};

const THREADS_ENV: &str = "HEADGAP_THREADS";

#[derive(Parser)]
#[command(name = "headgap", version, about = "Gaussian head avatars with a part-based identity prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for artifacts.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// `dotted.key=value`, applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-identity dataset into `--out`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Learn the identity prior on the first `prior.identities` identities.
    TrainPrior {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to `data.path`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fit mixture weights of a prior to the few-shot input.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prior checkpoint; defaults to `<out>/prior.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune an inverted avatar on the few-shot input.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Inverted checkpoint; defaults to `<out>/inverted.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Drive a personalized avatar with the subject's recorded expressions.
    Reenact {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `<out>/finetuned.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset view to render from; defaults to the first non-input view.
        #[arg(long)]
        view: Option<usize>,
    },
    /// PSNR, SSIM and L1 between two RGB PNG images.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Render a checkpoint on the reference camera grid.
    RenderGrid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Codebook row to show for prior checkpoints.
        #[arg(long, default_value_t = 0)]
        identity: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = configure_threads().and_then(|_| run(Cli::parse())) {
        let msg = format!("{e:#}").replace('\n', " ");
        eprintln!("error: {msg}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let base = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the run directory and writes the config echo.
fn prepare_run(c: &Common, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    std::fs::write(c.out.join("config.toml"), cfg.to_toml()).context("writing config echo")?;
    Ok(())
}

fn data_dir(arg: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    arg.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.path))
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_phase(path: &Path, want: Phase, producer: &str) -> Result<Avatar> {
    if !path.exists() {
        bail!(
            "phase error: {producer} needs a {want} checkpoint, none found at {} (run the preceding step first)",
            path.display()
        );
    }
    let av = Avatar::load(path)?;
    if av.phase != want {
        bail!("phase error: {producer} needs a {want} checkpoint, {} is {}", path.display(), av.phase);
    }
    Ok(av)
}

fn csv(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Tiles `[3, H, W]` images row-major into a grid.
fn grid(images: &[Tensor], cols: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| anyhow!("nothing to tile"))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![1.0; 3 * gh * gw];
    for (k, img) in images.iter().enumerate() {
        let (r0, c0) = ((k / cols) * h, (k % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[(c * gh + r0 + y) * gw + c0 + x] = img.data()[(c * h + y) * w + x];
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[3, gh, gw], out)?)
}

/// Input views with renders below them.
fn save_shot_grid(path: &Path, av: &Avatar, shots: &[pipeline::TrainSample]) -> Result<f64> {
    let id = av.identity()?;
    let mut top = Vec::new();
    let mut bottom = Vec::new();
    let mut total = 0.0;
    for s in shots {
        let img = av.render(&s.params, &s.camera, Some(&id))?.image;
        total += psnr(&img, &s.target.image)?;
        top.push(s.target.image.clone());
        bottom.push(img);
    }
    top.extend(bottom);
    save_png_rgb(path, &grid(&top, shots.len())?)?;
    Ok(total / shots.len() as f64)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let template = HeadTemplate::synthetic(&cfg.template)?;
            let spec = cfg.data.spec(cfg.seed);
            let data = generate_dataset(&template, &spec)?;
            std::fs::create_dir_all(&common.out)?;
            write_dataset(&common.out, &data)?;
            println!(
                "identities={} views={} expressions={} resolution={} bundles={} path={}",
                spec.identities,
                spec.views,
                spec.expressions,
                spec.resolution,
                data.num_bundles(),
                common.out.display()
            );
        }
        Command::TrainPrior { common, data } => {
            let cfg = load_config(&common)?;
            let dataset = open_dataset(&data_dir(&data, &cfg))?;
            prepare_run(&common, &cfg)?;
            let mut w = csv(&common.out.join("prior_loss.csv"))?;
            let (av, report) = {
                let mut log = CsvLog::new(&mut w, cfg.prior.log_every)?;
                train_prior(&dataset, &cfg, Some(&mut log))?
            };
            drop(w);
            let ckpt = common.out.join("prior.ckpt");
            av.save(&ckpt)?;
            let samples = pipeline::dataset_samples(&dataset, 0..cfg.prior.identities, |_| true)?;
            let train_psnr = pipeline::evaluate(&av.net, &samples, |s| Identity::Codebook(s.identity))?;
            let mut tiles = Vec::new();
            for j in 0..cfg.prior.identities.min(4) {
                let s = samples.iter().find(|s| s.identity == j).expect("every identity has samples");
                tiles.push(s.target.image.clone());
                tiles.push(pipeline::render_sample(&av.net, s, &Identity::Codebook(j))?);
            }
            save_png_rgb(&common.out.join("grid_prior.png"), &grid(&tiles, 2)?)?;
            println!(
                "steps={} initial_loss={:.6} final_loss={:.6} train_psnr={:.4} checkpoint={}",
                report.history.len(),
                report.history.first().map_or(f64::NAN, |b| b.total),
                report.history.last().map_or(f64::NAN, |b| b.total),
                train_psnr,
                ckpt.display()
            );
        }
        Command::Invert { common, data, checkpoint } => {
            let cfg = load_config(&common)?;
            let path = checkpoint.unwrap_or_else(|| common.out.join("prior.ckpt"));
            let prior = load_phase(&path, Phase::Prior, "invert")?;
            let dataset = open_dataset(&data_dir(&data, &cfg))?;
            prepare_run(&common, &cfg)?;
            let shots = shot_samples(&dataset, &cfg.personalization)?;
            let mut w = csv(&common.out.join("inversion_loss.csv"))?;
            let (av, report) = {
                let mut log = CsvLog::new(&mut w, cfg.prior.log_every)?;
                invert(&prior, &shots, &cfg.personalization, &cfg.losses, Some(&mut log))?
            };
            drop(w);
            let ckpt = common.out.join("inverted.ckpt");
            av.save(&ckpt)?;
            let p = save_shot_grid(&common.out.join("grid_inverted.png"), &av, &shots)?;
            println!(
                "phase=inverted steps={} final_loss={:.6} input_psnr={p:.4} checkpoint={}",
                report.history.len(),
                report.final_loss(),
                ckpt.display()
            );
        }
        Command::Finetune { common, data, checkpoint } => {
            let cfg = load_config(&common)?;
            let path = checkpoint.unwrap_or_else(|| common.out.join("inverted.ckpt"));
            let inverted = load_phase(&path, Phase::Inverted, "finetune")?;
            let dataset = open_dataset(&data_dir(&data, &cfg))?;
            prepare_run(&common, &cfg)?;
            let shots = shot_samples(&dataset, &cfg.personalization)?;
            let mut w = csv(&common.out.join("finetune_loss.csv"))?;
            let (av, report) = {
                let mut log = CsvLog::new(&mut w, cfg.prior.log_every)?;
                finetune(&inverted, &shots, &cfg.personalization, &cfg.losses, cfg.seed, Some(&mut log))?
            };
            drop(w);
            let ckpt = common.out.join("finetuned.ckpt");
            av.save(&ckpt)?;
            let p = save_shot_grid(&common.out.join("grid_finetuned.png"), &av, &shots)?;
            println!(
                "phase=finetuned steps={} final_loss={:.6} input_psnr={p:.4} reference_drift={:.6} checkpoint={}",
                report.history.len(),
                report.final_loss(),
                reference_drift(&av)?,
                ckpt.display()
            );
        }
        Command::Reenact {
            common,
            data,
            checkpoint,
            view,
        } => {
            let cfg = load_config(&common)?;
            let path = checkpoint.unwrap_or_else(|| common.out.join("finetuned.ckpt"));
            if !path.exists() {
                bail!("phase error: reenact needs a personalized checkpoint, none found at {}", path.display());
            }
            let av = Avatar::load(&path)?;
            let dataset = open_dataset(&data_dir(&data, &cfg))?;
            let pc = &cfg.personalization;
            let subject = dataset
                .identities
                .get(pc.subject)
                .ok_or_else(|| anyhow!("subject {} is not in the dataset", pc.subject))?;
            let v = match view {
                Some(v) => v,
                None => (0..dataset.cameras.len())
                    .find(|v| !pc.shot_views.contains(v))
                    .ok_or_else(|| anyhow!("every view is an input view"))?,
            };
            let cam = dataset.cameras.get(v).ok_or_else(|| anyhow!("view {v} is not in the rig"))?;
            let frames = reenact(&av, &subject.identity.frames, std::slice::from_ref(cam))?;
            let dir = common.out.join("reenact");
            std::fs::create_dir_all(&dir)?;
            let mut total = 0.0;
            let mut tiles = Vec::new();
            for (f, img) in frames.iter().enumerate() {
                save_png_rgb(&dir.join(format!("frame_{f:03}.png")), img)?;
                let gt = &subject.views[f][v].image;
                total += psnr(img, gt)?;
                tiles.push(gt.clone());
                tiles.push(img.clone());
            }
            save_png_rgb(&common.out.join("grid_reenact.png"), &grid(&tiles, 2)?)?;
            println!("phase={} frames={} view={v} psnr={:.4}", av.phase, frames.len(), total / frames.len() as f64);
        }
        Command::Metrics { pred, gt } => {
            let m = metrics(&load_png_rgb(&pred)?, &load_png_rgb(&gt)?)?;
            println!("{}", m.summary());
        }
        Command::RenderGrid {
            common,
            checkpoint,
            identity,
        } => {
            let cfg = load_config(&common)?;
            let av = Avatar::load(&checkpoint)?;
            let (id, params) = match av.phase {
                Phase::Prior => (
                    Identity::Codebook(identity),
                    headgap::headmodel::HeadParams::neutral(&av.net.template),
                ),
                _ => (av.identity()?, av.subject.clone().ok_or_else(|| anyhow!("checkpoint has no subject"))?),
            };
            let cams = reference_cameras(cfg.data.resolution, 16)?;
            let net = Arc::new(av.net);
            let images = cams
                .iter()
                .map(|c| Ok(net.render(&params, c, &id)?.image))
                .collect::<Result<Vec<_>>>()?;
            std::fs::create_dir_all(&common.out)?;
            let out = common.out.join(format!("grid_{}.png", av.phase));
            save_png_rgb(&out, &grid(&images, 4)?)?;
            println!("phase={} views={} path={}", av.phase, images.len(), out.display());
        }
    }
    Ok(())
}
