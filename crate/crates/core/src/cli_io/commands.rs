//! The `rbdm` subcommands.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use super::{adapt_channels, image_seed, list_pngs, translate, Checkpoint, RunConfig};
use crate::denoiser::UNet;
use crate::diffusion::{Direction, SampleTrace};
use crate::haze_synth::{gen_dataset, HazeMode};
use crate::image_io::{load_image, save_png};
use crate::imaging::Image;
use crate::metrics::{psnr, ssim, MetricReport};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::Schedule;
use crate::seeding::rng_for;
use crate::trainer::{train, PairedDataset, TrainState};

/// Marks errors caused by how the program was invoked (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub kappa: Option<f64>,
    #[arg(long, global = true)]
    pub patch: Option<usize>,
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    #[arg(long, global = true)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, visible_alias = "out", global = true)]
    pub output: Option<PathBuf>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        /// homogeneous, non-homogeneous or mixed
        #[arg(long)]
        haze: Option<HazeMode>,
    },
    /// Train on a `clear/` + `hazy/` dataset.
    Train {
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        #[arg(long)]
        patches_per_image: Option<usize>,
        #[arg(long)]
        images_per_batch: Option<usize>,
    },
    /// Remove haze from an image or a directory of images.
    Dehaze,
    /// Add haze to an image or a directory of images.
    Hazify,
    /// Hazify then dehaze, scoring the result against the input.
    Roundtrip,
    /// Score predictions against references with PSNR and SSIM.
    Eval {
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

#[derive(Debug, Parser)]
#[command(name = "rbdm", version, about = "Bidirectional residual diffusion for dehazing and haze generation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            let _ = e.print();
            std::process::exit(0);
        }
        anyhow::Error::from(UsageError(e.to_string()))
    })?;
    run(&cli.common, &cli.command)
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.steps {
        cfg.steps = v;
    }
    if let Some(v) = common.kappa {
        cfg.kappa = v;
    }
    if let Some(v) = common.patch {
        cfg.patch = v;
    }
    if let Some(v) = common.stride {
        cfg.stride = v;
    }
    if let Some(v) = common.threads {
        cfg.threads = v;
    }
    cfg.deterministic |= common.deterministic;
    if cfg.deterministic {
        cfg.threads = 1;
    }
    Ok(cfg)
}

fn init_threads(threads: usize) {
    if threads > 0 {
        // Fails only if a pool already exists, e.g. when called twice in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

pub fn run(common: &Common, command: &Command) -> anyhow::Result<()> {
    let mut cfg = resolve(common)?;
    match command {
        Command::Synth { n, size, haze } => {
            if let Some(v) = n {
                cfg.synth_count = *v;
            }
            if let Some(v) = size {
                cfg.synth_size = *v;
            }
            if let Some(v) = haze {
                cfg.haze_mode = *v;
            }
        }
        Command::Train {
            iterations,
            learning_rate,
            checkpoint_every,
            patches_per_image,
            images_per_batch,
        } => {
            if let Some(v) = iterations {
                cfg.iterations = *v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = *v;
            }
            if let Some(v) = checkpoint_every {
                cfg.checkpoint_every = *v;
            }
            if let Some(v) = patches_per_image {
                cfg.patches_per_image = *v;
            }
            if let Some(v) = images_per_batch {
                cfg.images_per_batch = *v;
            }
        }
        _ => {}
    }
    eprintln!("resolved config: {}", cfg.to_json());
    eprintln!("master seed: {}", cfg.seed);
    init_threads(cfg.threads);
    match command {
        Command::Synth { .. } => synth(common, &cfg),
        Command::Train { .. } => train_cmd(common, &cfg),
        Command::Dehaze => translate_cmd(common, &cfg, Direction::Dehaze),
        Command::Hazify => translate_cmd(common, &cfg, Direction::Hazify),
        Command::Roundtrip => roundtrip(common, &cfg),
        Command::Eval { reference } => eval(common, reference.as_deref()),
    }
}

fn need<'a>(value: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    match value {
        Some(p) => Ok(p),
        None => usage(format!("missing required flag --{flag}")),
    }
}

fn synth(common: &Common, cfg: &RunConfig) -> anyhow::Result<()> {
    let out = need(&common.output, "output")?;
    let records = gen_dataset(cfg.synth_count, cfg.synth_size, cfg.haze_mode, cfg.seed, out)?;
    log::info!("wrote {} pairs to {}", records.len(), out.display());
    Ok(())
}

fn read_loss_log(path: &Path, up_to: u64) -> String {
    let mut kept = String::from("iteration,loss\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let it: u64 = match line.split(',').next().and_then(|v| v.parse().ok()) {
                Some(v) => v,
                None => continue,
            };
            if it <= up_to {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    kept
}

fn train_cmd(common: &Common, cfg: &RunConfig) -> anyhow::Result<()> {
    let data_dir = need(&common.input, "input")?;
    let out = need(&common.output, "output")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let dataset = PairedDataset::load(data_dir)?;
    log::info!("loaded {} pairs from {}", dataset.len(), data_dir.display());

    let mut train_cfg = cfg.train();
    let (schedule, mut state) = match &common.ckpt {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            // Architecture, schedule and seed always come from the checkpoint.
            train_cfg.seed = ckpt.header.seed;
            log::info!("resuming from {} at iteration {}", path.display(), ckpt.header.iteration);
            (ckpt.schedule()?, ckpt.train_state()?)
        }
        None => {
            let schedule = Schedule::from_params(cfg.schedule())?;
            let net: UNet<f32> = UNet::new(&cfg.denoiser(), &mut rng_for(cfg.seed, u64::MAX))?;
            let optimizer = Adam::new(
                AdamConfig {
                    learning_rate: cfg.learning_rate,
                    ..AdamConfig::default()
                },
                net.params().len(),
            );
            (
                schedule,
                TrainState {
                    net,
                    optimizer,
                    iteration: 0,
                },
            )
        }
    };
    state.optimizer.config.learning_rate = train_cfg.learning_rate;
    log::info!(
        "network has {} parameters; training to iteration {}",
        state.net.params().len(),
        train_cfg.iterations
    );

    let loss_path = out.join("loss.csv");
    let loss_log = RefCell::new(read_loss_log(&loss_path, state.iteration));
    let mut last_report = std::time::Instant::now();
    let result = train(
        &dataset,
        &train_cfg,
        &schedule,
        &mut state,
        |iteration, loss| {
            let _ = writeln!(loss_log.borrow_mut(), "{iteration},{loss}");
            if last_report.elapsed().as_secs() >= 10 {
                log::info!("iteration {iteration}: loss {loss:.5}");
                last_report = std::time::Instant::now();
            }
            Ok(())
        },
        |state| {
            let ckpt = Checkpoint::from_train_state(state, &schedule, &train_cfg);
            let path = out.join(format!("ckpt-{:06}.ckpt", state.iteration));
            ckpt.save(&path)?;
            ckpt.save(&out.join("latest.ckpt"))?;
            fs::write(&loss_path, loss_log.borrow().as_bytes()).map_err(|e| crate::Error::io(&loss_path, e))?;
            log::info!("saved {}", path.display());
            Ok(())
        },
    );
    fs::write(&loss_path, loss_log.borrow().as_bytes()).with_context(|| format!("writing {}", loss_path.display()))?;
    result?;
    Ok(())
}

struct Model {
    net: UNet<f32>,
    schedule: Schedule,
}

fn load_model(common: &Common, cfg: &RunConfig) -> anyhow::Result<Model> {
    let path = need(&common.ckpt, "ckpt")?;
    let ckpt = Checkpoint::load(path)?;
    let mut params = ckpt.header.schedule;
    if common.steps.is_some() || common.config.is_some() {
        params.steps = cfg.steps;
    }
    if common.kappa.is_some() || common.config.is_some() {
        params.kappa = cfg.kappa;
    }
    if params != ckpt.header.schedule {
        log::warn!(
            "sampling with steps={} kappa={} but the checkpoint was trained with steps={} kappa={}",
            params.steps,
            params.kappa,
            ckpt.header.schedule.steps,
            ckpt.header.schedule.kappa
        );
    }
    Ok(Model {
        net: ckpt.network()?,
        schedule: Schedule::from_params(params)?,
    })
}

/// Input files and where each result goes. A directory input maps to a
/// directory output with the same file names.
fn plan_io(input: &Path, output: &Path) -> anyhow::Result<Vec<(PathBuf, PathBuf)>> {
    if input.is_dir() {
        fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
        let files = list_pngs(input)?;
        if files.is_empty() {
            bail!("no PNG files in {}", input.display());
        }
        Ok(files
            .into_iter()
            .map(|f| {
                let name = f.file_name().expect("listed file").to_owned();
                (f, output.join(name))
            })
            .collect())
    } else {
        let target = if output.is_dir() {
            output.join(input.file_name().context("input has no file name")?)
        } else {
            if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            output.to_path_buf()
        };
        Ok(vec![(input.to_path_buf(), target)])
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn run_one(
    model: &Model,
    cfg: &RunConfig,
    path: &Path,
    direction: Direction,
    stage: u64,
    image: Option<Image>,
) -> crate::Result<(Image, SampleTrace)> {
    let image = match image {
        Some(i) => i,
        None => adapt_channels(load_image(path)?, model.net.config().image_channels)?,
    };
    let seed = image_seed(cfg.seed, &file_name(path), stage);
    let (out, trace) = translate(
        &model.net,
        &model.schedule,
        &image,
        direction,
        cfg.patch,
        cfg.stride,
        model.net.config().size_multiple(),
        seed,
    )?;
    log::info!(
        "{} ({direction}): {} reverse steps, {} fused denoise rounds",
        file_name(path),
        trace.reverse_steps,
        trace.denoiser_rounds
    );
    Ok((out, trace))
}

/// Runs `job` for every entry, logging failures. Errors only if every job
/// failed.
fn for_each_file<T, F>(jobs: &[(PathBuf, PathBuf)], job: F) -> anyhow::Result<Vec<Option<T>>>
where
    T: Send,
    F: Fn(&Path, &Path) -> crate::Result<T> + Sync,
{
    let results: Vec<crate::Result<T>> = jobs.par_iter().map(|(i, o)| job(i, o)).collect();
    let mut out = Vec::with_capacity(results.len());
    let mut failed = 0;
    for ((input, _), r) in jobs.iter().zip(results) {
        match r {
            Ok(v) => out.push(Some(v)),
            Err(e) => {
                log::warn!("skipping {}: {e}", input.display());
                failed += 1;
                out.push(None);
            }
        }
    }
    if failed == jobs.len() {
        bail!("all {failed} inputs failed");
    }
    Ok(out)
}

fn translate_cmd(common: &Common, cfg: &RunConfig, direction: Direction) -> anyhow::Result<()> {
    let input = need(&common.input, "input")?;
    let output = need(&common.output, "output")?;
    let model = load_model(common, cfg)?;
    let jobs = plan_io(input, output)?;
    let done = for_each_file(&jobs, |i, o| {
        let (img, _) = run_one(&model, cfg, i, direction, 0, None)?;
        save_png(o, &img)
    })?;
    log::info!("{direction}: {} of {} images written", done.iter().flatten().count(), jobs.len());
    Ok(())
}

fn roundtrip(common: &Common, cfg: &RunConfig) -> anyhow::Result<()> {
    let input = need(&common.input, "input")?;
    let output = need(&common.output, "output")?;
    let model = load_model(common, cfg)?;
    let files = if input.is_dir() { list_pngs(input)? } else { vec![input.to_path_buf()] };
    if files.is_empty() {
        bail!("no PNG files in {}", input.display());
    }
    let (hazy_dir, dehazed_dir) = (output.join("hazy"), output.join("dehazed"));
    for d in [&hazy_dir, &dehazed_dir] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let jobs: Vec<(PathBuf, PathBuf)> = files.iter().map(|f| (f.clone(), PathBuf::from(file_name(f)))).collect();
    let rows = for_each_file(&jobs, |path, name| {
        let clear = adapt_channels(load_image(path)?, model.net.config().image_channels)?;
        let (hazy, _) = run_one(&model, cfg, path, Direction::Hazify, 1, Some(clear.clone()))?;
        let (dehazed, _) = run_one(&model, cfg, path, Direction::Dehaze, 2, Some(hazy.clone()))?;
        save_png(hazy_dir.join(name), &hazy)?;
        save_png(dehazed_dir.join(name), &dehazed)?;
        Ok((psnr(&dehazed, &clear)?, ssim(&dehazed, &clear)?))
    })?;
    let mut csv = String::from("filename,hazy,dehazed,psnr,ssim\n");
    let (mut sum_p, mut sum_s, mut n) = (0.0, 0.0, 0usize);
    for ((_, name), row) in jobs.iter().zip(&rows) {
        if let Some((p, s)) = row {
            let name = name.display();
            let _ = writeln!(csv, "{name},hazy/{name},dehazed/{name},{p},{s}");
            sum_p += p;
            sum_s += s;
            n += 1;
        }
    }
    let _ = writeln!(csv, "mean,,,{},{}", sum_p / n as f64, sum_s / n as f64);
    let report = output.join("roundtrip.csv");
    fs::write(&report, csv).with_context(|| format!("writing {}", report.display()))?;
    log::info!("round trip of {n} images: mean psnr {:.3} dB", sum_p / n as f64);
    Ok(())
}

fn eval(common: &Common, reference: Option<&Path>) -> anyhow::Result<()> {
    let pred = need(&common.input, "input")?;
    let Some(reference) = reference else {
        return usage("missing required flag --reference");
    };
    let pairs: Vec<(String, PathBuf, PathBuf)> = if pred.is_dir() {
        let mut pairs = Vec::new();
        for p in list_pngs(pred)? {
            let name = file_name(&p);
            let r = reference.join(&name);
            if r.is_file() {
                pairs.push((name, p, r));
            } else {
                log::warn!("no reference for {name}; excluded");
            }
        }
        for r in list_pngs(reference)? {
            if !pred.join(file_name(&r)).is_file() {
                log::warn!("no prediction for {}; excluded", file_name(&r));
            }
        }
        pairs
    } else {
        vec![(file_name(pred), pred.to_path_buf(), reference.to_path_buf())]
    };
    if pairs.is_empty() {
        bail!("no prediction/reference pairs with matching file names");
    }
    let mut report = MetricReport::default();
    for (name, p, r) in &pairs {
        let (a, b) = (load_image(p)?, load_image(r)?);
        report.push(name.clone(), &a, &b)?;
    }
    let csv = report.to_csv();
    match &common.output {
        Some(path) => fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    log::info!(
        "{} pairs: mean psnr {:.3} dB, mean ssim {:.4}",
        report.rows.len(),
        report.mean_psnr(),
        report.mean_ssim()
    );
    Ok(())
}

/// Process exit code for an error returned by [`run_from_args`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}
