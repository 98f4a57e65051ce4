//! `objprop`: dataset generation, head training, online inference,
//! evaluation, oracle ladders and gradient checking.
//!
//! Exit codes: 0 success, 1 invalid input or failed check, 2 internal or
//! I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use objprop_core::eval::evaluate;
use objprop_core::io::annotations::AnnotationFile;
use objprop_core::io::dataset::{read_annotations, read_dataset, read_detections, write_dataset, Dataset};
use objprop_core::io::params::{load_params, save_params};
use objprop_core::io::write_atomic;
use objprop_core::report::{render, render_eval_text, MetricRow, ReportFormat};
use objprop_core::{
    generate_suite, oracle_substitute, run_gradcheck, run_video, train, Error, FillContext,
    GradcheckConfig, OracleFlags, Result, RunConfig, TrainingSet, TrainingVideo,
};

#[derive(Parser)]
#[command(name = "objprop", version, about = "Inter-frame attention mask propagation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => ReportFormat::Text,
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        miss_rate: Option<f64>,
        /// Detector mask erosion, in pixels.
        #[arg(long)]
        erosion: Option<usize>,
    },
    /// Train the mask head on a dataset's ground truth.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output parameter file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Loss curve CSV; defaults to the parameter path with `.csv`.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Run online tracking with empty-instance filling.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Detections file; defaults to the dataset's own.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Output annotation file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable propagation filling.
        #[arg(long)]
        no_fill: bool,
    },
    /// Score predicted tracks against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cumulative ground-truth substitution ladder.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated subset of box,class,mask,track.
        #[arg(long, default_value = "box,class,mask,track")]
        flags: String,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic head gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fixtures: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Input(format!("--{name} is required (or set it under [paths])")))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_generate(
    common: Common,
    out: Option<PathBuf>,
    videos: Option<usize>,
    miss_rate: Option<f64>,
    erosion: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(v) = videos {
        cfg.scene.videos = v;
    }
    if let Some(m) = miss_rate {
        cfg.detector.miss_rate = m;
    }
    if let Some(e) = erosion {
        cfg.detector.mask_erosion = e;
    }
    cfg.validate()?;
    let out = required(out, &cfg.paths.dataset, "out")?;
    let suite = generate_suite(cfg.seed, &cfg.scene, &cfg.detector)?;
    let instances = suite.instance_count();
    let data = Dataset::from_suite(suite);
    write_dataset(&out, &data)?;
    println!(
        "generated {} videos, {instances} instances, seed {} -> {}",
        data.videos.len(),
        cfg.seed,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    common: Common,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    steps: Option<usize>,
    losses: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let dataset = required(dataset, &cfg.paths.dataset, "dataset")?;
    let out = required(out, &cfg.paths.params, "out")?;
    let losses = losses.unwrap_or_else(|| out.with_extension("csv"));

    let data = read_dataset(&dataset)?;
    let videos = data
        .frames
        .iter()
        .zip(&data.gt)
        .map(|(frames, gt)| TrainingVideo::new(frames, gt, &cfg.encoder))
        .collect::<Result<Vec<_>>>()?;
    let tc = cfg.train_config();
    let result = train(&TrainingSet { videos }, &tc, &cfg.propagation, cfg.head.hidden_width)?;

    let mut csv = String::from("step,lr,mask_loss,attention_loss,total\n");
    for (i, r) in result.losses.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{},{}\n",
            tc.lr_at(i),
            r.mask_loss,
            r.attention_loss,
            r.total
        ));
    }
    save_params(&result.params, &out)?;
    write_atomic(&losses, csv.as_bytes())?;
    let window = result.losses.len().min(100);
    let mean = |s: &[objprop_core::LossReport]| {
        s.iter().map(|r| r.total).sum::<f64>() / s.len().max(1) as f64
    };
    println!(
        "trained {} steps, seed {}: first-{window} mean loss {:.4}, last-{window} mean loss {:.4} -> {}",
        tc.steps,
        tc.seed,
        mean(&result.losses[..window]),
        mean(&result.losses[result.losses.len() - window..]),
        out.display()
    );
    Ok(())
}

fn cmd_infer(
    common: Common,
    dataset: Option<PathBuf>,
    params: Option<PathBuf>,
    detections: Option<PathBuf>,
    out: Option<PathBuf>,
    no_fill: bool,
) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if no_fill {
        cfg.pipeline.fill = false;
    }
    cfg.validate()?;
    let dataset = required(dataset, &cfg.paths.dataset, "dataset")?;
    let params = required(params, &cfg.paths.params, "params")?;
    let out = required(out, &cfg.paths.output, "out")?;

    let mut data = read_dataset(&dataset)?;
    if let Some(path) = detections {
        let file = read_detections(&path)?;
        if file.videos != data.videos {
            return Err(Error::Input("detections file videos disagree with the dataset".into()));
        }
        data.detections = file.to_frames()?;
    }
    let head = load_params(&params)?;
    let channels = objprop_core::encoder::FEATURE_CHANNELS;
    if head.input_channels() != channels {
        return Err(Error::ParamShape(format!(
            "head expects {} input channels, encoder produces {channels}",
            head.input_channels()
        )));
    }
    let mut tracks = Vec::with_capacity(data.videos.len());
    for ((info, frames), dets) in data.videos.iter().zip(&data.frames).zip(&data.detections) {
        let ctx = FillContext {
            encoder: &cfg.encoder,
            propagation: &cfg.propagation,
            head: &head,
            image_width: info.width,
            image_height: info.height,
        };
        tracks.push(run_video(frames, dets, &ctx, &cfg.pipeline)?);
    }
    let file = AnnotationFile::from_tracks(data.videos.clone(), data.categories.clone(), &tracks, true)?;
    write_atomic(&out, file.to_json()?.as_bytes())?;
    let filled: usize = tracks
        .iter()
        .flatten()
        .flat_map(|t| t.entries.values())
        .filter(|d| d.source == objprop_core::Source::Propagated)
        .count();
    println!(
        "{} tracks, {filled} filled entries, fill {} -> {}",
        tracks.iter().map(Vec::len).sum::<usize>(),
        if cfg.pipeline.fill { "on" } else { "off" },
        out.display()
    );
    Ok(())
}

fn load_pair(pred: &Path, gt: &Path) -> Result<(AnnotationFile, AnnotationFile)> {
    let p = read_annotations(pred)?;
    let g = read_annotations(gt)?;
    if p.videos != g.videos {
        return Err(Error::Input("prediction and ground-truth videos differ".into()));
    }
    Ok((p, g))
}

fn cmd_eval(common: Common, pred: PathBuf, gt: PathBuf, format: Format, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(&common)?;
    let (p, g) = load_pair(&pred, &gt)?;
    let cats: Vec<u32> = g.categories.iter().map(|c| c.id).collect();
    let report = evaluate(&p.to_tracks()?, &g.to_tracks()?, &cats, &cfg.eval)?;
    let text = match format {
        Format::Text => render_eval_text(&report),
        f => render(&[MetricRow::from_report("all", &report)], f.into()),
    };
    emit(&text, out.as_deref())
}

fn cmd_oracle(
    common: Common,
    pred: PathBuf,
    gt: PathBuf,
    flags: String,
    format: Format,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(&common)?;
    let requested: OracleFlags = flags.parse()?;
    let (p, g) = load_pair(&pred, &gt)?;
    let cats: Vec<u32> = g.categories.iter().map(|c| c.id).collect();
    let preds = p.to_tracks()?;
    let gts = g.to_tracks()?;

    // one row per requested flag, added in ladder order
    let mut rows = Vec::new();
    let mut active = OracleFlags::default();
    let mut ladder = vec![("none", active)];
    for (label, on) in [
        ("+box", requested.bbox),
        ("+class", requested.class),
        ("+mask", requested.mask),
        ("+track", requested.track),
    ] {
        if on {
            match label {
                "+box" => active.bbox = true,
                "+class" => active.class = true,
                "+mask" => active.mask = true,
                _ => active.track = true,
            }
            ladder.push((label, active));
        }
    }
    for (label, f) in ladder {
        let substituted = preds
            .iter()
            .zip(&gts)
            .map(|(p, g)| oracle_substitute(p, g, f))
            .collect::<Result<Vec<_>>>()?;
        let report = evaluate(&substituted, &gts, &cats, &cfg.eval)?;
        rows.push(MetricRow::from_report(label, &report));
    }
    emit(&render(&rows, format.into()), out.as_deref())
}

fn cmd_gradcheck(common: Common, fixtures: Option<usize>) -> Result<bool> {
    let cfg = load_config(&common)?;
    let mut gc = GradcheckConfig {
        seed: cfg.seed,
        ..GradcheckConfig::default()
    };
    if let Some(n) = fixtures {
        gc.fixtures = n;
    }
    let report = run_gradcheck(&gc)?;
    println!(
        "gradcheck: {} fixtures, {} parameters, max relative error {:.3e}, {} refined steps, {} failures: {}",
        report.fixtures,
        report.params_checked,
        report.max_rel_error,
        report.refined_steps,
        report.failures,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate {
            common,
            out,
            videos,
            miss_rate,
            erosion,
        } => cmd_generate(common, out, videos, miss_rate, erosion).map(|_| true),
        Command::Train {
            common,
            dataset,
            out,
            steps,
            losses,
        } => cmd_train(common, dataset, out, steps, losses).map(|_| true),
        Command::Infer {
            common,
            dataset,
            params,
            detections,
            out,
            no_fill,
        } => cmd_infer(common, dataset, params, detections, out, no_fill).map(|_| true),
        Command::Eval {
            common,
            pred,
            gt,
            format,
            out,
        } => cmd_eval(common, pred, gt, format, out).map(|_| true),
        Command::Oracle {
            common,
            pred,
            gt,
            flags,
            format,
            out,
        } => cmd_oracle(common, pred, gt, flags, format, out).map(|_| true),
        Command::Gradcheck { common, fixtures } => cmd_gradcheck(common, fixtures),
    }
}

fn main() -> ExitCode {
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
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
