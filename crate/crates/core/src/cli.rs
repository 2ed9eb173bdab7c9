//! Command-line entry point: `generate`, `train`, `eval`, `inspect-graph`,
//! `losses-report`.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 `eval --min-miou` gate not met.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::data::{Branch, Corpus};
use crate::error::{Error, Result};
use crate::eval::compute_metrics;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::model::{self, Objectives, VideoInput};
use crate::proposals::write_predictions;
use crate::synth::{generate, SynthConfig};
use crate::tape::Tape;
use crate::trainer::{corpus_inputs, predict, train, Checkpoint, TrainArtifacts, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_GATE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sdgan", version, about = "Dual-stream graph alignment for temporal video grounding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stream {
    Dyn,
    Sta,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with planted query–moment signal.
    Generate {
        #[arg(long)]
        videos: usize,
        #[arg(long, default_value_t = 3)]
        queries_per_video: usize,
        #[arg(long, default_value_t = 16)]
        clips: usize,
        #[arg(long, default_value_t = 32)]
        raw_dim: usize,
        #[arg(long, default_value_t = 5.0)]
        signal: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on a corpus directory; writes losses.csv, last.ckpt, best.ckpt.
    Train {
        /// Flat TOML config; keys left out take the preset's values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base hyperparameters: synthetic, activitynet, charades, tacos.
        #[arg(long, default_value = "synthetic")]
        preset: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank proposals with a checkpoint and score them against the corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Prediction JSONL to write.
        #[arg(long)]
        pred: PathBuf,
        /// Metric CSV; defaults to the prediction path with `.metrics.csv`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        top_h: Option<usize>,
        /// Fail with exit code 3 when mIoU falls below this percentage.
        #[arg(long)]
        min_miou: Option<f64>,
    },
    /// Dump the temporal graph edges built for one video.
    InspectGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long, value_enum, default_value = "dyn")]
        stream: Stream,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a training loss log per branch.
    LossesReport {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_INVALID
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs `body` between manifest start and finish writes.
fn with_manifest<F>(path: &Path, mut manifest: RunManifest, body: F) -> Result<i32>
where
    F: FnOnce(&mut RunManifest) -> Result<i32>,
{
    manifest.write(path)?;
    let result = body(&mut manifest);
    manifest.finish(matches!(result, Ok(EXIT_OK)));
    manifest.write(path)?;
    result
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Generate {
            videos,
            queries_per_video,
            clips,
            raw_dim,
            signal,
            noise,
            seed,
            out_dir,
        } => {
            let cfg = SynthConfig {
                num_clips: clips,
                raw_dim,
                signal_strength: signal,
                noise_std: noise,
                seed,
                ..SynthConfig::default()
            };
            cfg.validate()?;
            if videos == 0 || queries_per_video == 0 {
                return Err(Error::Config("--videos and --queries-per-video must be positive".into()));
            }
            create_dir(&out_dir)?;
            let snapshot = serde_json::json!({
                "synth": cfg,
                "videos": videos,
                "queries_per_video": queries_per_video,
            });
            let manifest = RunManifest::start("generate", Some(seed), snapshot);
            with_manifest(&out_dir.join(MANIFEST_FILE), manifest, |m| {
                let synth = generate(&cfg, videos, queries_per_video)?;
                synth.corpus.write(&out_dir)?;
                m.artifact("corpus", &out_dir);
                info!("wrote {} videos to {}", videos, out_dir.display());
                Ok(EXIT_OK)
            })
        }
        Command::Train {
            config,
            preset,
            data,
            out,
        } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    let base = TrainConfig::preset(&preset)?;
                    merge_config(&base, &text)?
                }
                None => TrainConfig::preset(&preset)?,
            };
            cfg.apply_env()?;
            cfg.validate()?;
            let corpus = Corpus::load(&data)?;
            create_dir(&out)?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            let snapshot = serde_json::to_value(&cfg)?;
            let manifest = RunManifest::start("train", Some(cfg.seed), snapshot);
            with_manifest(&out.join(MANIFEST_FILE), manifest, |m| {
                let arts = TrainArtifacts::in_dir(&out);
                m.artifact("config", out.join("config.toml"));
                m.artifact("loss_log", &arts.loss_log);
                m.artifact("last_checkpoint", &arts.last_checkpoint);
                m.artifact("best_checkpoint", &arts.best_checkpoint);
                let outcome = train(&corpus, &cfg, Some(&out))?;
                if let Some(r) = outcome.final_report() {
                    print!("{}", r.to_table());
                }
                Ok(EXIT_OK)
            })
        }
        Command::Eval {
            checkpoint,
            data,
            pred,
            report,
            top_h,
            min_miou,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let corpus = Corpus::load(&data)?;
            let train_cfg = &ckpt.manifest.train;
            let top_h = top_h.unwrap_or(train_cfg.top_h);
            if top_h == 0 {
                return Err(Error::Config("--top-h must be positive".into()));
            }
            let report_path = report.unwrap_or_else(|| sidecar(&pred, ".metrics.csv"));
            let snapshot = serde_json::json!({
                "checkpoint": checkpoint,
                "data": data,
                "top_h": top_h,
                "nms_iou": train_cfg.nms_iou,
                "min_miou": min_miou,
                "train": train_cfg,
            });
            let manifest = RunManifest::start("eval", Some(train_cfg.seed), snapshot);
            with_manifest(&sidecar(&pred, ".manifest.json"), manifest, |m| {
                let inputs = corpus_inputs(&corpus)?;
                let ratio = train_cfg.loss_weights().dynamic_ratio();
                let preds = predict(
                    &ckpt.params,
                    &ckpt.manifest.model,
                    &corpus,
                    &inputs,
                    ratio,
                    top_h,
                    train_cfg.nms_iou,
                )?;
                write_predictions(&pred, &preds)?;
                m.artifact("predictions", &pred);
                let r = compute_metrics(&preds, &corpus.dataset)?;
                r.write_csv(&report_path)?;
                m.artifact("report", &report_path);
                print!("{}", r.to_table());
                match min_miou {
                    Some(gate) if r.miou < gate => {
                        eprintln!("mIoU {:.2} below the required {gate:.2}", r.miou);
                        Ok(EXIT_GATE)
                    }
                    _ => Ok(EXIT_OK),
                }
            })
        }
        Command::InspectGraph {
            checkpoint,
            data,
            video,
            stream,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let corpus = Corpus::load(&data)?;
            let vi = corpus
                .dataset
                .videos
                .iter()
                .position(|v| v.video_id == video)
                .ok_or_else(|| Error::Input(format!("no video {video} in {}", data.display())))?;
            let snapshot = serde_json::json!({
                "checkpoint": checkpoint,
                "data": data,
                "video": video,
                "stream": format!("{stream:?}").to_lowercase(),
            });
            let manifest = RunManifest::start("inspect-graph", None, snapshot);
            with_manifest(&sidecar(&out, ".manifest.json"), manifest, |m| {
                let csv = graph_csv(&ckpt, &corpus, vi, stream)?;
                write_text(&out, &csv)?;
                m.artifact("edges", &out);
                Ok(EXIT_OK)
            })
        }
        Command::LossesReport { log, out } => {
            let text = fs::read_to_string(&log).map_err(|e| Error::io(&log, e))?;
            let report = losses_report(&text, &log)?;
            match out {
                Some(out) => {
                    let snapshot = serde_json::json!({ "log": log });
                    let manifest = RunManifest::start("losses-report", None, snapshot);
                    with_manifest(&sidecar(&out, ".manifest.json"), manifest, |m| {
                        write_text(&out, &report)?;
                        m.artifact("report", &out);
                        Ok(EXIT_OK)
                    })
                }
                None => {
                    print!("{report}");
                    Ok(EXIT_OK)
                }
            }
        }
    }
}

/// Overlays the keys present in `text` onto `base`.
fn merge_config(base: &TrainConfig, text: &str) -> Result<TrainConfig> {
    let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut merged: toml::Table =
        toml::from_str(&base.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
    merged.extend(overlay);
    let text = toml::to_string(&merged).map_err(|e| Error::Config(e.to_string()))?;
    TrainConfig::from_toml(&text)
}

/// Edge list `layer,src,dst,cosine,phi` with 1-based clip indices.
pub fn graph_csv(ckpt: &Checkpoint, corpus: &Corpus, video: usize, stream: Stream) -> Result<String> {
    let v = &corpus.dataset.videos[video];
    let input = VideoInput::new(v, &corpus.dynamic[video], &corpus.static_[video], &corpus.embeddings)?;
    let mut tape = Tape::new();
    let p = ckpt.params.bind_frozen(&mut tape);
    let fwd = model::forward(&mut tape, &p, &ckpt.manifest.model, &input, Branch::Fine, &Objectives::none())?;
    let graphs = match stream {
        Stream::Dyn => &fwd.graphs_dyn,
        Stream::Sta => &fwd.graphs_sta,
    };
    let mut s = String::from("layer,src,dst,cosine,phi\n");
    for (layer, g) in graphs.iter().enumerate() {
        for e in &g.edges {
            let _ = writeln!(s, "{},{},{},{:.8},{:.8}", layer + 1, e.src + 1, e.dst + 1, e.cosine, e.weight);
        }
    }
    Ok(s)
}

/// Per-branch means and first/last totals of a loss log.
pub fn losses_report(text: &str, path: &Path) -> Result<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Input(format!("{} is empty", path.display())))?
        .split(',')
        .collect();
    if header.len() < 3 || header[0] != "epoch" || header[1] != "branch" {
        return Err(Error::Input(format!("{} is not a loss log", path.display())));
    }
    let cols = header.len() - 2;
    // per branch: sums and counts per column, epoch count
    let mut acc: Vec<(String, Vec<f64>, Vec<usize>, usize)> = Vec::new();
    let mut totals: Vec<(usize, f64)> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg,
        };
        if fields.len() != header.len() {
            return Err(parse_err(format!("expected {} fields", header.len())));
        }
        let epoch: usize = fields[0].parse().map_err(|_| parse_err("bad epoch".into()))?;
        let branch = fields[1].to_string();
        let slot = match acc.iter().position(|a| a.0 == branch) {
            Some(k) => k,
            None => {
                acc.push((branch, vec![0.0; cols], vec![0; cols], 0));
                acc.len() - 1
            }
        };
        acc[slot].3 += 1;
        for (c, f) in fields[2..].iter().enumerate() {
            if f.is_empty() {
                continue;
            }
            let v: f64 = f.parse().map_err(|_| parse_err(format!("bad value {f}")))?;
            acc[slot].1[c] += v;
            acc[slot].2[c] += 1;
        }
        let total: f64 = fields[fields.len() - 1]
            .parse()
            .map_err(|_| parse_err("bad total".into()))?;
        totals.push((epoch, total));
    }
    let mut s = String::new();
    let _ = write!(s, "{:<8}{:>7}", "branch", "epochs");
    for h in &header[2..] {
        let _ = write!(s, "{h:>14}");
    }
    s.push('\n');
    for (branch, sums, counts, epochs) in &acc {
        let _ = write!(s, "{branch:<8}{epochs:>7}");
        for (sum, n) in sums.iter().zip(counts) {
            if *n == 0 {
                let _ = write!(s, "{:>14}", "-");
            } else {
                let _ = write!(s, "{:>14.6}", sum / *n as f64);
            }
        }
        s.push('\n');
    }
    if let (Some(first), Some(last)) = (totals.first(), totals.last()) {
        let _ = writeln!(s, "total: epoch {} {:.6} -> epoch {} {:.6}", first.0, first.1, last.0, last.1);
    }
    Ok(s)
}
