//! Annotation schema, moment arithmetic, and the on-disk formats.
//!
//! Clip indices are 1-based throughout the library (`ClipSpan(1, T)` is the
//! whole video). Files that carry clip indices store them 0-based.
//!
//! Clip `i` of a video with duration `d` and `T` clips covers
//! `[(i - 1) * d / T, i * d / T)`.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Tolerance used when comparing times against clip boundaries.
const BOUNDARY_EPS: f64 = 1e-9;

/// A time interval in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub start: f64,
    pub end: f64,
}

impl Moment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::Input(format!("non-finite moment ({start}, {end})")));
        }
        if start < 0.0 || start > end {
            return Err(Error::Input(format!("malformed moment ({start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Inclusive 1-based clip range `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClipSpan {
    pub start: usize,
    pub end: usize,
}

impl ClipSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start == 0 || start > end {
            return Err(Error::Input(format!("invalid clip span ({start}, {end})")));
        }
        Ok(Self { start, end })
    }

    /// Number of clips covered.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, clip: usize) -> bool {
        (self.start..=self.end).contains(&clip)
    }

    /// The time interval this span covers.
    pub fn to_moment(&self, duration: f64, num_clips: usize) -> Moment {
        let w = duration / num_clips as f64;
        Moment {
            start: (self.start - 1) as f64 * w,
            end: self.end as f64 * w,
        }
    }
}

/// Intersection over union on temporal intervals.
pub trait TemporalIou {
    fn iou(&self, other: &Self) -> f64;
}

impl TemporalIou for Moment {
    fn iou(&self, other: &Self) -> f64 {
        let inter = (self.end.min(other.end) - self.start.max(other.start)).max(0.0);
        let union = self.end.max(other.end) - self.start.min(other.start);
        if union <= 0.0 {
            // both zero-length at the same instant
            return if self.start == other.start { 1.0 } else { 0.0 };
        }
        if self.length() == 0.0 && other.length() == 0.0 {
            return 0.0;
        }
        inter / union
    }
}

impl TemporalIou for ClipSpan {
    fn iou(&self, other: &Self) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        let inter = if hi >= lo { hi - lo + 1 } else { 0 };
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

pub fn iou<T: TemporalIou>(a: &T, b: &T) -> f64 {
    a.iou(b)
}

/// Smallest clip span whose time extent covers `m`.
///
/// A zero-length moment maps to the single clip containing that instant.
pub fn moment_to_clip_span(m: &Moment, duration: f64, num_clips: usize) -> Result<ClipSpan> {
    if num_clips == 0 || !(duration > 0.0) {
        return Err(Error::Input(format!(
            "cannot discretise with duration {duration} and {num_clips} clips"
        )));
    }
    if m.start < -BOUNDARY_EPS || m.end > duration * (1.0 + BOUNDARY_EPS) || m.start > m.end {
        return Err(Error::Input(format!(
            "moment ({}, {}) outside [0, {duration}]",
            m.start, m.end
        )));
    }
    let w = duration / num_clips as f64;
    let clip_of = |t: f64| ((t / w + BOUNDARY_EPS).floor() as usize + 1).clamp(1, num_clips);
    let start = clip_of(m.start);
    if m.length() <= 0.0 {
        return Ok(ClipSpan { start, end: start });
    }
    let end = ((m.end / w - BOUNDARY_EPS).ceil() as usize).clamp(start, num_clips);
    Ok(ClipSpan { start, end })
}

/// Largest clip span lying entirely inside `m`, if any clip fits.
pub fn contained_clip_span(m: &Moment, duration: f64, num_clips: usize) -> Option<ClipSpan> {
    let w = duration / num_clips as f64;
    let first = (m.start / w - BOUNDARY_EPS).ceil().max(0.0) as usize + 1;
    let last = ((m.end / w + BOUNDARY_EPS).floor() as usize).min(num_clips);
    (first <= last).then_some(ClipSpan {
        start: first,
        end: last,
    })
}

/// Fine/coarse clip counts; `coarse * window == fine` exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularityConfig {
    fine: usize,
    window: usize,
}

impl GranularityConfig {
    pub fn new(fine: usize, window: usize) -> Result<Self> {
        if fine == 0 || window == 0 {
            return Err(Error::Config("clip counts and window must be positive".into()));
        }
        if fine % window != 0 {
            return Err(Error::Config(format!(
                "fine clip count {fine} is not divisible by window {window}"
            )));
        }
        Ok(Self { fine, window })
    }

    pub fn fine(&self) -> usize {
        self.fine
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn coarse(&self) -> usize {
        self.fine / self.window
    }
}

/// Which proposal granularity a forward pass supervises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Coarse,
    Fine,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Coarse => "coarse",
            Branch::Fine => "fine",
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps a fine-granularity span to the coarse grid: `ceil(i / n)` per endpoint.
pub fn fine_to_coarse(span: ClipSpan, cfg: &GranularityConfig) -> ClipSpan {
    let n = cfg.window();
    ClipSpan {
        start: span.start.div_ceil(n),
        end: span.end.div_ceil(n),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub tokens: Vec<u32>,
    pub moment: Moment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub duration: f64,
    pub num_clips: usize,
    pub queries: Vec<QueryRecord>,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::Validation {
            locator: format!("video {}", self.video_id),
            msg,
        };
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(fail(format!("duration {} must be positive", self.duration)));
        }
        if self.num_clips < 2 {
            return Err(fail(format!("num_clips {} must be at least 2", self.num_clips)));
        }
        for q in &self.queries {
            let qfail = |msg: String| Error::Validation {
                locator: format!("video {} query {}", self.video_id, q.query_id),
                msg,
            };
            let m = q.moment;
            if !m.start.is_finite() || !m.end.is_finite() {
                return Err(qfail("non-finite timestamps".into()));
            }
            if m.end < m.start {
                return Err(qfail(format!("end {} precedes start {}", m.end, m.start)));
            }
            if m.start < 0.0 || m.end > self.duration {
                return Err(qfail(format!(
                    "moment ({}, {}) outside [0, {}]",
                    m.start, m.end, self.duration
                )));
            }
            if q.tokens.is_empty() {
                return Err(qfail("empty token list".into()));
            }
        }
        Ok(())
    }

    pub fn clip_span(&self, q: &QueryRecord) -> Result<ClipSpan> {
        moment_to_clip_span(&q.moment, self.duration, self.num_clips)
    }

    pub fn clip_seconds(&self) -> f64 {
        self.duration / self.num_clips as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundingDataset {
    pub videos: Vec<VideoRecord>,
}

impl GroundingDataset {
    pub fn num_queries(&self) -> usize {
        self.videos.iter().map(|v| v.queries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct QueryLine {
    query_id: String,
    tokens: Vec<u32>,
    start: f64,
    end: f64,
}

#[derive(Serialize, Deserialize)]
struct VideoLine {
    video_id: String,
    duration: f64,
    num_clips: usize,
    queries: Vec<QueryLine>,
}

/// Reads a JSON-lines annotation file and validates every record.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<GroundingDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut videos = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VideoLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let video = VideoRecord {
            video_id: rec.video_id,
            duration: rec.duration,
            num_clips: rec.num_clips,
            queries: rec
                .queries
                .into_iter()
                .map(|q| QueryRecord {
                    query_id: q.query_id,
                    tokens: q.tokens,
                    moment: Moment {
                        start: q.start,
                        end: q.end,
                    },
                })
                .collect(),
        };
        video.validate().map_err(|e| match e {
            Error::Validation { locator, msg } => Error::Validation {
                locator: format!("{}:{}: {locator}", path.display(), i + 1),
                msg,
            },
            other => other,
        })?;
        if !seen.insert(video.video_id.clone()) {
            return Err(Error::Validation {
                locator: format!("{}:{}", path.display(), i + 1),
                msg: format!("duplicate video_id {}", video.video_id),
            });
        }
        videos.push(video);
    }
    Ok(GroundingDataset { videos })
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &GroundingDataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in &ds.videos {
        let line = VideoLine {
            video_id: v.video_id.clone(),
            duration: v.duration,
            num_clips: v.num_clips,
            queries: v
                .queries
                .iter()
                .map(|q| QueryLine {
                    query_id: q.query_id.clone(),
                    tokens: q.tokens.clone(),
                    start: q.moment.start,
                    end: q.moment.end,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const BLOB_MAGIC: &[u8; 4] = b"SDGF";
pub const BLOB_VERSION: u32 = 1;

/// Writes a matrix as a feature blob: `"SDGF"`, version, rows, cols (all
/// little-endian `u32`), then row-major `f32` values.
pub fn write_blob(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_blob(m)).map_err(|e| Error::io(path, e))
}

pub fn encode_blob(m: &Mat) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * m.len());
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn read_blob(path: impl AsRef<Path>) -> Result<Mat> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_blob(&bytes).map_err(|msg| Error::Blob {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn decode_blob(bytes: &[u8]) -> Result<Mat, String> {
    if bytes.len() < 16 {
        return Err("truncated header".into());
    }
    if &bytes[0..4] != BLOB_MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != BLOB_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != rows * cols * 4 {
        return Err(format!(
            "expected {} payload bytes for {rows}x{cols}, found {}",
            rows * cols * 4,
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Mat::from_vec(rows, cols, data))
}

/// Mean-pools `frames` rows into `num_clips` equal groups, dropping trailing
/// rows that do not fill a whole group.
pub fn pool_to_clips(frames: &Mat, num_clips: usize) -> Result<Mat> {
    let rows = frames.rows();
    if num_clips == 0 || rows < num_clips {
        return Err(Error::Input(format!(
            "{rows} feature rows cannot form {num_clips} clips"
        )));
    }
    if rows == num_clips {
        return Ok(frames.clone());
    }
    let per = rows / num_clips;
    let mut out = Mat::zeros(num_clips, frames.cols());
    for c in 0..num_clips {
        let dst = out.row_mut(c);
        for r in c * per..(c + 1) * per {
            for (d, v) in dst.iter_mut().zip(frames.row(r)) {
                *d += v / per as f64;
            }
        }
    }
    Ok(out)
}

/// Dataset directory layout shared by the generator, trainer, and CLI.
#[derive(Clone, Debug)]
pub struct CorpusLayout {
    root: PathBuf,
}

impl CorpusLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn annotations(&self) -> PathBuf {
        self.root.join("annotations.jsonl")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.sdgf")
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn dynamic_features(&self, video_id: &str) -> PathBuf {
        self.features_dir().join(format!("{video_id}.dyn.sdgf"))
    }

    pub fn static_features(&self, video_id: &str) -> PathBuf {
        self.features_dir().join(format!("{video_id}.sta.sdgf"))
    }
}

/// Annotations plus per-video clip features and the frozen token table.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dataset: GroundingDataset,
    /// `T x D_raw` per video, aligned with `dataset.videos`.
    pub dynamic: Vec<Mat>,
    pub static_: Vec<Mat>,
    /// `vocab x E`
    pub embeddings: Mat,
}

impl Corpus {
    pub fn raw_dims(&self) -> (usize, usize, usize) {
        let d = self.dynamic.first().map_or(0, Mat::cols);
        let s = self.static_.first().map_or(0, Mat::cols);
        (d, s, self.embeddings.cols())
    }

    /// First `n` videos and the rest, sharing the token table.
    pub fn split_at(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.dataset.videos.len());
        let part = |r: std::ops::Range<usize>| Corpus {
            dataset: GroundingDataset {
                videos: self.dataset.videos[r.clone()].to_vec(),
            },
            dynamic: self.dynamic[r.clone()].to_vec(),
            static_: self.static_[r].to_vec(),
            embeddings: self.embeddings.clone(),
        };
        (part(0..n), part(n..self.dataset.videos.len()))
    }

    pub fn write(&self, root: impl AsRef<Path>) -> Result<()> {
        let layout = CorpusLayout::new(root.as_ref());
        fs::create_dir_all(layout.features_dir()).map_err(|e| Error::io(layout.features_dir(), e))?;
        write_dataset(layout.annotations(), &self.dataset)?;
        write_blob(layout.embeddings(), &self.embeddings)?;
        for (i, v) in self.dataset.videos.iter().enumerate() {
            write_blob(layout.dynamic_features(&v.video_id), &self.dynamic[i])?;
            write_blob(layout.static_features(&v.video_id), &self.static_[i])?;
        }
        Ok(())
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let layout = CorpusLayout::new(root.as_ref());
        let dataset = load_dataset(layout.annotations())?;
        let embeddings = read_blob(layout.embeddings())?;
        let mut dynamic = Vec::with_capacity(dataset.videos.len());
        let mut static_ = Vec::with_capacity(dataset.videos.len());
        for v in &dataset.videos {
            dynamic.push(pool_to_clips(&read_blob(layout.dynamic_features(&v.video_id))?, v.num_clips)?);
            static_.push(pool_to_clips(&read_blob(layout.static_features(&v.video_id))?, v.num_clips)?);
            for q in &v.queries {
                if let Some(&bad) = q.tokens.iter().find(|&&t| t as usize >= embeddings.rows()) {
                    return Err(Error::Validation {
                        locator: format!("video {} query {}", v.video_id, q.query_id),
                        msg: format!("token {bad} outside vocabulary of {}", embeddings.rows()),
                    });
                }
            }
        }
        let corpus = Self {
            dataset,
            dynamic,
            static_,
            embeddings,
        };
        let (d, s, _) = corpus.raw_dims();
        if corpus.dynamic.iter().any(|m| m.cols() != d) || corpus.static_.iter().any(|m| m.cols() != s) {
            return Err(Error::Shape("feature widths differ across videos".into()));
        }
        Ok(corpus)
    }
}
