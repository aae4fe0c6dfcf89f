//! Command-line pipeline: generate, train, track, eval, viz.
//!
//! Every command reads one [`RunConfig`], writes its outputs into `--out`,
//! and finishes by atomically writing `manifest.json` there.

pub mod viz;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, render_jsonl, render_table, EvalReport};
use crate::model::Model;
use crate::tracker::{read_tracks, track_outputs, track_sequence, write_tracks, TrackRecord};
use crate::trainer::{load_checkpoint, save_checkpoint, train, write_metrics_log};
use crate::walk::Grid;
use crate::worldgen::{dataset_manifest, generate_many, read_dataset, write_dataset, SceneSequence};

pub const MANIFEST: &str = "manifest.json";
pub const DATASET: &str = "dataset.bin";
pub const DATASET_MANIFEST: &str = "dataset_manifest.txt";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const TRACKS_DIR: &str = "tracks";
pub const REPORT: &str = "report.txt";
pub const REPORT_JSONL: &str = "report.jsonl";
pub const VIZ_DIR: &str = "viz";

#[derive(Parser, Debug)]
#[command(name = "ramwalk", version, about = "Track objects through occlusion with a random walk on spatial memory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the generation, initialization and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for per-sequence work.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset of procedural sequences.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Overrides `generate.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Track every sequence of a dataset.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score track files against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `track`.
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Export frames with walker beliefs and boxes as PPM images.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub code_version: String,
    pub wall_time: f64,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("run manifest: {e}")))
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

/// Loads the config named by `common` and applies flag overrides.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

pub fn track_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("seq_{index:04}.txt"))
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let seqs = generate_many(&cfg.world, cfg.generate.seed, cfg.generate.count)?;
    let data = out.join(DATASET);
    let side = out.join(DATASET_MANIFEST);
    write_dataset(&data, &seqs)?;
    crate::io::write_atomic(&side, dataset_manifest(&seqs).as_bytes())?;
    log::info!("wrote {} sequences to {}", seqs.len(), data.display());
    Ok(vec![data, side])
}

pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let seqs = read_dataset(dataset)?;
    let outcome = train(&seqs, &cfg.model, &cfg.train)?;
    let ckpt = out.join(CHECKPOINT);
    let log = out.join(METRICS_LOG);
    let resolved = out.join(RESOLVED_CONFIG);
    save_checkpoint(&ckpt, &outcome.model)?;
    write_metrics_log(&log, &outcome.log)?;
    crate::io::write_atomic(&resolved, cfg.to_toml().as_bytes())?;
    Ok(vec![ckpt, log, resolved])
}

fn load_pair(cfg: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<(Model, Vec<SceneSequence>)> {
    Ok((load_checkpoint(checkpoint, &cfg.model)?, read_dataset(dataset)?))
}

pub fn cmd_track(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, seqs) = load_pair(cfg, checkpoint, dataset)?;
    let dir = out.join(TRACKS_DIR);
    std::fs::create_dir_all(&dir)?;
    let tracks = seqs
        .par_iter()
        .map(|s| track_sequence(&model, s, &cfg.tracker).map(|o| o.records))
        .collect::<Result<Vec<_>>>()?;
    let mut written = Vec::with_capacity(tracks.len());
    for (i, recs) in tracks.iter().enumerate() {
        let p = track_file(&dir, i);
        write_tracks(&p, recs)?;
        written.push(p);
    }
    Ok(written)
}

pub fn cmd_eval(tracks: &Path, dataset: &Path, out: &Path) -> Result<(EvalReport, Vec<PathBuf>)> {
    std::fs::create_dir_all(out)?;
    let seqs = read_dataset(dataset)?;
    let preds = (0..seqs.len())
        .map(|i| read_tracks(&track_file(tracks, i)))
        .collect::<Result<Vec<Vec<TrackRecord>>>>()?;
    let report = evaluate_dataset(&preds, &seqs)?;
    let table = out.join(REPORT);
    let jsonl = out.join(REPORT_JSONL);
    crate::io::write_atomic(&table, render_table(&report).as_bytes())?;
    crate::io::write_atomic(&jsonl, render_jsonl(&report).as_bytes())?;
    print!("{}", render_table(&report));
    Ok((report, vec![table, jsonl]))
}

pub fn cmd_viz(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, seqs) = load_pair(cfg, checkpoint, dataset)?;
    if let Some(s) = seqs.first() {
        if s.frames.first().map(|f| f.shape()[0]) != Some(model.config().in_channels) {
            return Err(Error::invalid("viz", "dataset channels do not match the model".to_string()));
        }
    }
    let dir = out.join(VIZ_DIR);
    std::fs::create_dir_all(&dir)?;
    let n = cfg.viz.limit.map_or(seqs.len(), |l| l.min(seqs.len()));
    let images = seqs[..n]
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let outputs = model.infer(&seq.frames)?;
            let tracked = track_outputs(model.config(), seq.frame_size(), &outputs, &cfg.tracker)?;
            let (h, w) = seq.frame_size();
            let (gh, gw) = model.config().node_grid(h, w);
            let mut imgs = Vec::with_capacity(seq.len());
            for (t, frame) in seq.frames.iter().enumerate() {
                let walkers: Vec<_> = tracked.walkers.iter().filter(|k| k.frame == t).collect();
                let predicted: Vec<_> = tracked.records.iter().filter(|r| r.frame == t).collect();
                let gt: Vec<_> = seq
                    .tracks
                    .iter()
                    .filter_map(|tr| tr.entries.get(t).and_then(|e| e.as_ref()).map(|e| e.bbox))
                    .collect();
                let overlay = viz::Overlay {
                    walkers: &walkers,
                    grid: Grid::new(gh, gw),
                    node_scale: model.config().node_scale(),
                    threshold: cfg.viz.threshold,
                    gt: &gt,
                    predicted: &predicted,
                };
                let img = viz::render_frame(frame, &overlay, cfg.viz.scale)?;
                imgs.push((dir.join(format!("seq_{i:04}_frame_{t:04}.ppm")), img));
            }
            Ok(imgs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut written = Vec::new();
    for (p, img) in images.into_iter().flatten() {
        img.write_ppm(&p)?;
        written.push(p);
    }
    Ok(written)
}

fn finish(out: &Path, command: &str, common: &Common, inputs: &[&Path], outputs: &[PathBuf], start: Instant) -> Result<()> {
    let m = RunManifest {
        command: command.to_string(),
        config_path: common.config.as_deref().map(show),
        seed: common.seed,
        inputs: inputs.iter().map(|p| show(p)).collect(),
        outputs: outputs.iter().map(|p| show(p)).collect(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    crate::io::write_atomic(&out.join(MANIFEST), text.as_bytes())
}

pub fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let (name, common) = match &cli.command {
        Command::Generate { common, .. } => ("generate", common),
        Command::Train { common, .. } => ("train", common),
        Command::Track { common, .. } => ("track", common),
        Command::Eval { common, .. } => ("eval", common),
        Command::Viz { common, .. } => ("viz", common),
    };
    let mut cfg = resolve_config(common)?;
    let out = common.out.as_path();
    std::fs::create_dir_all(out)?;
    let pool = pool(common.workers)?;
    pool.install(|| {
        let (inputs, outputs): (Vec<&Path>, Vec<PathBuf>) = match &cli.command {
            Command::Generate { count, .. } => {
                if let Some(c) = count {
                    cfg.generate.count = *c;
                }
                (vec![], cmd_generate(&cfg, out)?)
            }
            Command::Train { dataset, .. } => (vec![dataset.as_path()], cmd_train(&cfg, dataset, out)?),
            Command::Track { checkpoint, dataset, .. } => (
                vec![checkpoint.as_path(), dataset.as_path()],
                cmd_track(&cfg, checkpoint, dataset, out)?,
            ),
            Command::Eval { tracks, dataset, .. } => {
                (vec![tracks.as_path(), dataset.as_path()], cmd_eval(tracks, dataset, out)?.1)
            }
            Command::Viz { checkpoint, dataset, .. } => (
                vec![checkpoint.as_path(), dataset.as_path()],
                cmd_viz(&cfg, checkpoint, dataset, out)?,
            ),
        };
        finish(out, name, common, &inputs, &outputs, start)
    })
}

/// Initializes logging from `RAMWALK_LOG` (default `info`).
pub fn init_logging() {
    let env = env_logger::Env::default().filter_or("RAMWALK_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}
