use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sdconet::autograd::Graph;
use sdconet::data::{self, ANNOTATION_FILE};
use sdconet::trainer::{self, TrainOptions};
use sdconet::{metrics, Array, RunConfig, Sample, Trainer};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Core(#[from] sdconet::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{}: not found", .0.display())]
    NotFound(PathBuf),
    #[error("{} is not empty; pass --force to overwrite", .0.display())]
    OutDirNotEmpty(PathBuf),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::NotFound(_) => "not_found",
            CliError::OutDirNotEmpty(_) => "out_dir_not_empty",
            CliError::Usage(_) => "usage",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::NotFound(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "sdconet", version, about = "Joint super-resolution and small-object detection")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run config; missing sections take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base config the file is applied on top of.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Where generated training sets are cached.
    #[arg(long, global = true, env = "SDCONET_CACHE", default_value = ".sdconet-cache")]
    cache_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Smoke,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    SynthData {
        #[arg(long)]
        count: Option<usize>,
        /// Square canvas side in HR pixels.
        #[arg(long)]
        canvas: Option<usize>,
        #[arg(long)]
        tile_size: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Train with the two-stage schedule.
    Train {
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Operation counts for the four filtering regimes.
    Flops {
        /// LR input height; defaults to half the configured canvas.
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Write the saliency map of every pyramid level as PNG.
    VisualizeSaliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Treat the image as HR and downscale it ×2 first.
        #[arg(long)]
        degrade: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = Cli::try_parse()
        .map_err(|e| match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                let _ = e.print();
                std::process::exit(0);
            }
            _ => CliError::Usage(e.to_string().trim().to_string()),
        })
        .and_then(run);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match cli.global.preset {
        Preset::Desk => RunConfig::default(),
        Preset::Smoke => RunConfig::smoke(),
    };
    if let Some(path) = &cli.global.config {
        if !path.exists() {
            return Err(CliError::NotFound(path.clone()));
        }
        let text = fs::read_to_string(path)?;
        cfg = overlay(&cfg, &text)?;
    }
    if let Some(seed) = cli.global.seed {
        cfg.trainer.seed = seed;
        cfg.data.scene.seed = seed;
    }
    let g = &cli.global;
    match cli.command {
        Command::SynthData {
            count,
            canvas,
            tile_size,
            overlap,
        } => {
            if let Some(n) = count {
                cfg.data.count = n;
            }
            if let Some(c) = canvas {
                cfg.data.scene.canvas = (c, c);
            }
            if tile_size.is_some() {
                cfg.data.tile_size = tile_size;
            }
            if let Some(o) = overlap {
                cfg.data.overlap = o;
            }
            check(&cfg)?;
            synth_data(&cfg, &out_dir(g, "data"), g.force)
        }
        Command::Train { data, resume } => {
            check(&cfg)?;
            train(&cfg, g, data, resume)
        }
        Command::Eval { checkpoint, data } => {
            check(&cfg)?;
            eval(&cfg, g, &checkpoint, data)
        }
        Command::Flops { height, width, json } => {
            check(&cfg)?;
            let (ch, cw) = cfg.data.scene.canvas;
            let report = metrics::flops_report(&cfg.model(), height.unwrap_or(ch / 2), width.unwrap_or(cw / 2))?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(dir) = &g.out_dir {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("flops.json"), &text)?;
                fs::write(dir.join("flops.txt"), report.to_table())?;
            }
            if json {
                emit(&format!("{text}\n"));
            } else {
                emit(&report.to_table());
            }
            Ok(())
        }
        Command::VisualizeSaliency {
            checkpoint,
            image,
            degrade,
        } => visualize(&checkpoint, &image, degrade, &out_dir(g, "saliency"), g.force),
    }
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

/// Applies a (possibly partial) config document on top of `base`.
fn overlay(base: &RunConfig, text: &str) -> Result<RunConfig> {
    // validates keys and values of the document itself
    RunConfig::from_json(text)?;
    let mut merged = serde_json::to_value(base)?;
    merge(&mut merged, serde_json::from_str(text)?);
    Ok(serde_json::from_value(merged)?)
}

fn merge(dst: &mut serde_json::Value, src: serde_json::Value) {
    match (dst, src) {
        (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

fn check(cfg: &RunConfig) -> Result<()> {
    let problems = cfg.problems();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(sdconet::Error::Config(problems.join("; ")).into())
    }
}

fn out_dir(g: &Global, default: &str) -> PathBuf {
    g.out_dir.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn is_non_empty(dir: &Path) -> Result<bool> {
    Ok(dir.exists() && fs::read_dir(dir)?.next().is_some())
}

fn synth_data(cfg: &RunConfig, dir: &Path, force: bool) -> Result<()> {
    if is_non_empty(dir)? {
        if !force {
            return Err(CliError::OutDirNotEmpty(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir)?;
    }
    let d = &cfg.data;
    let manifest = data::write_dataset(dir, &d.scene, d.count, d.tile_size, d.overlap)?;
    log::info!("wrote {} images to {}", manifest.images, dir.display());
    emit(&format!("{}\n", serde_json::to_string(&manifest)?));
    Ok(())
}

/// The dataset directory to use: the given one, or a cached generated set.
fn dataset_dir(cfg: &RunConfig, g: &Global, given: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(dir) = given {
        if !dir.join(ANNOTATION_FILE).exists() {
            return Err(CliError::NotFound(dir.join(ANNOTATION_FILE)));
        }
        return Ok(dir);
    }
    let mut h = DefaultHasher::new();
    serde_json::to_string(&cfg.data)?.hash(&mut h);
    let dir = g.cache_dir.join(format!("synthetic-{:016x}", h.finish()));
    if !dir.join(ANNOTATION_FILE).exists() {
        log::info!("generating training set in {}", dir.display());
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let d = &cfg.data;
        data::write_dataset(&dir, &d.scene, d.count, d.tile_size, d.overlap)?;
    }
    Ok(dir)
}

fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    let samples = data::load_dataset(dir)?;
    if samples.is_empty() {
        return Err(sdconet::Error::Contract(format!("{} holds no images", dir.display())).into());
    }
    Ok(samples)
}

fn train(cfg: &RunConfig, g: &Global, data: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let out = out_dir(g, "run");
    let samples = load_samples(&dataset_dir(cfg, g, data)?)?;
    let mut t = match &resume {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::NotFound(path.clone()));
            }
            let t = trainer::load_checkpoint(path)?.trainer()?;
            log::info!("resuming after epoch {}", t.state.epoch);
            t
        }
        None => {
            if is_non_empty(&out)? {
                if !g.force {
                    return Err(CliError::OutDirNotEmpty(out));
                }
                fs::remove_dir_all(&out)?;
            }
            Trainer::new(&cfg.model(), cfg.trainer.clone())?
        }
    };
    fs::create_dir_all(&out)?;
    let m = t.model.config.clone();
    let resolved = RunConfig {
        encoder: m.encoder,
        decoder_sr: m.decoder_sr,
        saliency: m.saliency,
        filter: m.filter,
        detector: m.detector,
        trainer: t.config.clone(),
        ..cfg.clone()
    };
    fs::write(out.join("config.json"), resolved.to_json())?;
    let opts = TrainOptions {
        checkpoint_dir: Some(out.clone()),
        metrics_log: Some(out.join("metrics.ndjson")),
        eval_data: Some(&samples),
    };
    let mut stage = if t.state.epoch == 0 { 1 } else { t.state.stage };
    t.train(&samples, &opts, |rec| {
        if rec.stage != stage {
            emit(&format!("stage {stage} → stage {} at epoch {}\n", rec.stage, rec.epoch));
            stage = rec.stage;
        }
        emit(&format!("{}\n", serde_json::to_string(rec).expect("record serializes")));
    })?;
    let (report, _) = metrics::evaluate(&t.model, &t.store, &samples)?;
    let text = serde_json::to_string(&report)?;
    fs::write(out.join("eval.json"), &text)?;
    emit(&format!("{text}\n"));
    Ok(())
}

fn eval(cfg: &RunConfig, g: &Global, checkpoint: &Path, data: Option<PathBuf>) -> Result<()> {
    if !checkpoint.exists() {
        return Err(CliError::NotFound(checkpoint.to_path_buf()));
    }
    let (model, store) = trainer::load_checkpoint(checkpoint)?.model()?;
    let samples = load_samples(&dataset_dir(cfg, g, data)?)?;
    let (mut report, dets) = metrics::evaluate(&model, &store, &samples)?;
    if cfg.eval.measure_fps {
        let fps = metrics::measure_fps(&model, &store, &samples[0].lr, cfg.eval.fps_warmup, cfg.eval.fps_runs)?;
        report.fps = Some(fps);
    }
    let text = serde_json::to_string(&report)?;
    if let Some(dir) = &g.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.json"), &text)?;
        fs::write(dir.join("detections.json"), serde_json::to_string(&dets)?)?;
    }
    emit(&format!("{text}\n"));
    Ok(())
}

fn visualize(checkpoint: &Path, image: &Path, degrade: bool, out: &Path, force: bool) -> Result<()> {
    for p in [checkpoint, image] {
        if !p.exists() {
            return Err(CliError::NotFound(p.to_path_buf()));
        }
    }
    let (model, store) = trainer::load_checkpoint(checkpoint)?.model()?;
    let mut input = data::load_png(image)?;
    if degrade {
        input = data::degrade(&input)?;
    }
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let mut g = Graph::inference(&store);
    let x = g.constant(input);
    let pyramid = model.encoder.encode(&mut g, x)?;
    let sal = model.saliency.forward(&mut g, &pyramid)?;
    if out.exists() && force {
        fs::remove_dir_all(out)?;
    } else if is_non_empty(out)? {
        return Err(CliError::OutDirNotEmpty(out.to_path_buf()));
    }
    fs::create_dir_all(out)?;
    let patch = model.config.encoder.patch_size;
    let mut levels = Vec::new();
    for (l, &m) in sal.maps.iter().enumerate() {
        let map = g.value(m);
        let (mh, mw) = (map.shape()[0], map.shape()[1]);
        let logits = map.data();
        let probs: Vec<f64> = logits.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let (lo, hi) = probs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        // each cell covers `stride` input pixels; the picture is cropped to the input
        let stride = patch << l;
        let img = Array::from_fn(&[h, w, 1], |i| {
            let (y, x) = (i / w, i % w);
            let (cy, cx) = ((y / stride).min(mh - 1), (x / stride).min(mw - 1));
            (probs[cy * mw + cx] - lo) / span
        });
        let file = format!("saliency_level{}.png", l + 1);
        data::save_png(&out.join(&file), &img)?;
        levels.push(json!({
            "level": l + 1,
            "file": file,
            "grid": [mh, mw],
            "min": lo,
            "max": hi,
        }));
    }
    let sidecar = json!({
        "image": image.display().to_string(),
        "input": [h, w],
        "alpha": g.value(sal.alpha).item(),
        "levels": levels,
    });
    fs::write(out.join("saliency.json"), serde_json::to_string_pretty(&sidecar)?)?;
    emit(&format!("{sidecar}\n"));
    Ok(())
}

