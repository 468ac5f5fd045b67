//! Batch tool: synthesize scans, fuse, train, infer, evaluate and export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sis3d::eval::{group_by_scene, mean_average_precision, metrics_csv, read_records, write_records, Detection, IouKind, MapReport, Record};
use sis3d::io::{
    detections_ply, load_annotations, load_scan, load_scene, load_tsdf, read_file, save_fused, save_scan, scene_dirs,
    scene_id, tsdf_ply, write_file, RunManifest, GT_FILE, TSDF_FILE,
};
use sis3d::model::init_model;
use sis3d::nn::{read_checkpoint, write_checkpoint};
use sis3d::pipeline::{
    infer_scene, prepare, scene_chunks, scene_seed, select_views_unlabeled, timed, train, PipelineConfig, Sample, TrainState,
    LOSS_CSV_HEADER,
};
use sis3d::synth::{fuse_tsdf, generate_scene, ground_truth, scan_scene, CameraView};
use sis3d::Error;

#[derive(Parser)]
#[command(name = "sis3d", version, about = "Joint color-geometry 3D instance segmentation on voxel scans")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON pipeline config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single-threaded, and manifests omit wall-clock timings.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes and render their RGB-D views.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        scenes: usize,
    },
    /// Fuse each scene's views into a TSDF and derive ground truth.
    Fuse {
        #[arg(long)]
        data: PathBuf,
    },
    /// Staged training on every fused scene under `--data`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-stage step counts, e.g. `200,100,100`.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        /// Loss log; defaults to the checkpoint path with a `.csv` suffix.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Detect and segment every scene under `--data`.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Prediction records file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Box and mask mAP of a predictions file against the scenes' ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output folder for `metrics.csv` and `report.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5])]
        iou: Vec<f64>,
        /// Average classes without ground truth as AP 0 instead of leaving them out.
        #[arg(long)]
        include_empty: bool,
    },
    /// Write PLY views of one scene, or a metrics CSV from a saved report.
    Export {
        #[arg(long)]
        out: PathBuf,
        /// Scene folder: surface mesh plus boxes and masks.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Predictions to draw instead of the ground truth.
        #[arg(long, requires = "scene")]
        pred: Option<PathBuf>,
        /// `report.json` from `eval`, rewritten as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    cfg: PipelineConfig,
    seed: u64,
    deterministic: bool,
}

impl Ctx {
    fn manifest(&self, command: &str) -> Result<RunManifest, Error> {
        RunManifest::new(command, &self.cfg, self.seed)
    }

    fn finish(&self, mut m: RunManifest, dir: &Path) -> Outcome {
        if self.deterministic {
            for (stage, secs) in m.timings.drain(..) {
                eprintln!("{stage}: {secs:.2}s");
            }
        }
        m.save(&dir.join(format!("{}.manifest.json", m.command)))?;
        Ok(())
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn synth_cmd(ctx: &Ctx, out: &Path, scenes: usize) -> Outcome {
    let mut m = ctx.manifest("synth")?;
    let (res, secs) = timed(|| -> Result<(), Error> {
        for i in 0..scenes {
            let seed = scene_seed(ctx.seed, i);
            let spec = generate_scene(&ctx.cfg.scene, seed)?;
            let views = scan_scene(&spec, &ctx.cfg.trajectory, seed)?;
            let dir = out.join(format!("scene_{i:04}"));
            save_scan(&dir, &spec, &views)?;
            m.outputs.push(show(&dir));
        }
        Ok(())
    });
    res?;
    m.timings.push(("synth".into(), secs));
    ctx.finish(m, out)
}

fn fuse_cmd(ctx: &Ctx, data: &Path) -> Outcome {
    let mut m = ctx.manifest("fuse")?;
    let (res, secs) = timed(|| -> Result<(), Error> {
        for dir in scene_dirs(data)? {
            let (spec, views) = load_scan(&dir)?;
            let meta = spec.grid_meta(ctx.cfg.scene.voxel_size as f32)?;
            let tsdf = fuse_tsdf(&views, meta, ctx.cfg.truncation)?;
            let gt = ground_truth(&spec, &meta, &tsdf)?;
            save_fused(&dir, &tsdf, &gt)?;
            m.inputs.push(show(&dir));
            m.outputs.extend([show(&dir.join(TSDF_FILE)), show(&dir.join(GT_FILE))]);
        }
        Ok(())
    });
    res?;
    m.timings.push(("fuse".into(), secs));
    ctx.finish(m, data)
}

fn train_cmd(ctx: &Ctx, data: &Path, out: &Path, log: Option<&Path>) -> Outcome {
    let cfg = &ctx.cfg;
    let mut m = ctx.manifest("train")?;
    let (prepared, prep_secs) = timed(|| -> Result<_, Error> {
        let mut samples: Vec<Sample> = Vec::new();
        let mut inputs = Vec::new();
        for dir in scene_dirs(data)? {
            let scene = load_scene(&dir)?;
            for c in scene_chunks(cfg, &scene)? {
                samples.push(prepare(&c, cfg)?);
            }
            inputs.push(show(&dir));
        }
        Ok((samples, inputs))
    });
    let (samples, inputs) = prepared?;
    m.inputs = inputs;
    eprintln!("{} training chunks, schedule {:?}", samples.len(), cfg.schedule.steps);
    let mut state = TrainState::new(init_model(&cfg.model, ctx.seed)?, ctx.seed);
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    let (res, train_secs) = timed(|| {
        train(&mut state, cfg, &samples, |r| {
            csv.push_str(&r.csv_row());
            csv.push('\n');
            if r.step % 100 == 0 {
                eprintln!("step {} {} loss {:.4}", r.step, r.stage.map_or("-", |s| s.name()), r.total);
            }
        })
    });
    let log = log.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("csv"));
    write_file(&log, csv.as_bytes())?;
    m.outputs.push(show(&log));
    res?;
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &state.params)?;
    write_file(out, &buf)?;
    m.outputs.push(show(out));
    m.timings.extend([("prepare".to_string(), prep_secs), ("train".to_string(), train_secs)]);
    ctx.finish(m, &parent_dir(out))
}

fn infer_cmd(ctx: &Ctx, model: &Path, data: &Path, out: &Path) -> Outcome {
    let cfg = &ctx.cfg;
    let mut m = ctx.manifest("infer")?;
    let params = read_checkpoint(&mut read_file(model)?.as_slice())?;
    m.inputs.push(show(model));
    let (res, secs) = timed(|| -> Result<Vec<Record>, Error> {
        let mut recs = Vec::new();
        for dir in scene_dirs(data)? {
            let (_, views) = load_scan(&dir)?;
            let tsdf = load_tsdf(&dir.join(TSDF_FILE))?;
            let pick = select_views_unlabeled(&tsdf, &views, cfg.views_per_chunk)?;
            let chosen: Vec<CameraView> = pick.into_iter().map(|i| views[i].clone()).collect();
            let id = scene_id(&dir);
            for d in infer_scene(&params, cfg, &tsdf, &chosen)? {
                recs.push(Record {
                    scene: id.clone(),
                    detection: d,
                });
            }
            m.inputs.push(show(&dir));
        }
        Ok(recs)
    });
    write_file(out, write_records(&res?).as_bytes())?;
    m.outputs.push(show(out));
    m.timings.push(("infer".into(), secs));
    ctx.finish(m, &parent_dir(out))
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("class{c}")).collect()
}

fn eval_cmd(ctx: &Ctx, pred: &Path, data: &Path, out: &Path, iou: &[f64], include_empty: bool) -> Outcome {
    if iou.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Failure::Usage(format!("--iou: thresholds must lie in [0, 1], got {iou:?}")));
    }
    let mut m = ctx.manifest("eval")?;
    let text = String::from_utf8_lossy(&read_file(pred)?).into_owned();
    let records = read_records(&text)?;
    let mut ids = Vec::new();
    let mut gts: Vec<Vec<Detection>> = Vec::new();
    for dir in scene_dirs(data)? {
        ids.push(scene_id(&dir));
        gts.push(load_annotations(&dir.join(GT_FILE))?.iter().map(Detection::from).collect());
        m.inputs.push(show(&dir));
    }
    let known = ids.len();
    let mut preds = group_by_scene(&records, &mut ids);
    if ids.len() > known {
        return Err(Failure::Data(Error::Format(format!("predictions name unknown scene {:?}", ids[known]))));
    }
    preds.resize(known, Vec::new());
    let nc = ctx.cfg.model.num_classes;
    let names = class_names(nc);
    let boxes = mean_average_precision(&preds, &gts, iou, nc, IouKind::Box, !include_empty);
    let masks = mean_average_precision(&preds, &gts, iou, nc, IouKind::Mask, !include_empty);
    let csv = metrics_csv(&boxes, "box", &names) + metrics_csv(&masks, "mask", &names).split_once('\n').map_or("", |s| s.1);
    write_file(&out.join("metrics.csv"), csv.as_bytes())?;
    let report = serde_json::json!({ "box": boxes, "mask": masks });
    write_file(&out.join("report.json"), serde_json::to_string_pretty(&report).map_err(Error::from)?.as_bytes())?;
    print!("{csv}");
    m.inputs.insert(0, show(pred));
    m.outputs.extend([show(&out.join("metrics.csv")), show(&out.join("report.json"))]);
    ctx.finish(m, out)
}

fn export_cmd(ctx: &Ctx, out: &Path, scene: Option<&Path>, pred: Option<&Path>, report: Option<&Path>) -> Outcome {
    if scene.is_none() && report.is_none() {
        return Err(Failure::Usage("--scene or --report: nothing to export".into()));
    }
    let mut m = ctx.manifest("export")?;
    let mut emit = |name: &str, body: &str| -> Result<(), Error> {
        let p = out.join(name);
        write_file(&p, body.as_bytes())?;
        m.outputs.push(show(&p));
        Ok(())
    };
    if let Some(dir) = scene {
        let tsdf = load_tsdf(&dir.join(TSDF_FILE))?;
        emit("surface.ply", &tsdf_ply(&tsdf))?;
        let dets: Vec<Detection> = match pred {
            Some(p) => {
                let text = String::from_utf8_lossy(&read_file(p)?).into_owned();
                let id = scene_id(dir);
                read_records(&text)?.into_iter().filter(|r| r.scene == id).map(|r| r.detection).collect()
            }
            None => load_annotations(&dir.join(GT_FILE))?.iter().map(Detection::from).collect(),
        };
        let (b, k) = detections_ply(&dets, &tsdf.meta);
        emit("boxes.ply", &b)?;
        emit("masks.ply", &k)?;
    }
    if let Some(r) = report {
        let v: serde_json::Value = serde_json::from_slice(&read_file(r)?).map_err(Error::from)?;
        let mut csv = String::new();
        for kind in ["box", "mask"] {
            let rep: MapReport = serde_json::from_value(v[kind].clone()).map_err(Error::from)?;
            let names = class_names(rep.per_class.first().map_or(0, Vec::len));
            let t = metrics_csv(&rep, kind, &names);
            let _ = write!(csv, "{}", if csv.is_empty() { &t } else { t.split_once('\n').map_or("", |s| s.1) });
        }
        emit("metrics.csv", &csv)?;
    }
    ctx.finish(m, out)
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let cfg = match path {
        Some(p) => serde_json::from_slice(&read_file(p)?).map_err(|e| Failure::Usage(format!("--config {}: {e}", p.display())))?,
        None => PipelineConfig::default(),
    };
    cfg.validate().map_err(|e| Failure::Usage(format!("--config: {e}")))?;
    Ok(cfg)
}

/// Worker count from `SIS_THREADS`; 0 and deterministic mode mean one thread.
fn setup_threads(deterministic: bool) -> Result<(), Failure> {
    let n = match std::env::var("SIS_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| Failure::Usage(format!("SIS_THREADS: not a count: {v:?}")))?),
        Err(_) => None,
    };
    let n = if deterministic { Some(1) } else { n.map(|n| n.max(1)) };
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    setup_threads(cli.deterministic)?;
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Command::Train { steps: Some(s), .. } = &cli.command {
        cfg.schedule.steps = s
            .as_slice()
            .try_into()
            .map_err(|_| Failure::Usage(format!("--steps: expected three stage lengths, got {}", s.len())))?;
    }
    let ctx = Ctx {
        cfg,
        seed: cli.seed,
        deterministic: cli.deterministic,
    };
    match &cli.command {
        Command::Synth { out, scenes } => synth_cmd(&ctx, out, *scenes),
        Command::Fuse { data } => fuse_cmd(&ctx, data),
        Command::Train { data, out, log, .. } => train_cmd(&ctx, data, out, log.as_deref()),
        Command::Infer { model, data, out } => infer_cmd(&ctx, model, data, out),
        Command::Eval {
            pred,
            data,
            out,
            iou,
            include_empty,
        } => eval_cmd(&ctx, pred, data, out, iou, *include_empty),
        Command::Export { out, scene, pred, report } => export_cmd(&ctx, out, scene.as_deref(), pred.as_deref(), report.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("usage error"));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::DivergenceDetected { .. }) { 3 } else { 2 })
        }
    }
}
