//! Multi-granularity 2-D temporal proposal maps and query scoring.
//!
//! A map of side `L` is stored as an `(L*L) x D` matrix; cell `(i, j)`
//! (0-based, `i <= j`) is the proposal spanning clips `i+1 ..= j+1`.
//! Score maps keep only the `L(L+1)/2` valid cells, in row-major order.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{iou, ClipSpan};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

/// Valid cells of an upper-triangular `side x side` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProposalGrid {
    side: usize,
    /// Grid row (`i * side + j`) of each valid cell.
    rows: Vec<usize>,
}

impl ProposalGrid {
    pub fn new(side: usize) -> Self {
        let mut rows = Vec::with_capacity(side * (side + 1) / 2);
        for i in 0..side {
            for j in i..side {
                rows.push(i * side + j);
            }
        }
        Self { side, rows }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_cells(&self) -> usize {
        self.rows.len()
    }

    pub fn grid_rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn span(&self, cell: usize) -> ClipSpan {
        let r = self.rows[cell];
        ClipSpan {
            start: r / self.side + 1,
            end: r % self.side + 1,
        }
    }

    pub fn cell_of(&self, span: ClipSpan) -> Option<usize> {
        if span.start == 0 || span.start > span.end || span.end > self.side {
            return None;
        }
        let (i, j) = (span.start - 1, span.end - 1);
        // row i starts after sum_{r<i} (side - r) cells
        let row_start = i * self.side - i * i.saturating_sub(1) / 2;
        Some(row_start + (j - i))
    }

    /// `L x L` validity mask.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        (0..self.side)
            .map(|i| (0..self.side).map(|j| i <= j).collect())
            .collect()
    }
}

/// Element-wise max over non-overlapping windows of `n` clips.
pub fn aggregate_coarse(tape: &mut Tape, x: Var, n: usize) -> Result<Var> {
    let t = tape.value(x).rows();
    if n == 0 || t % n != 0 {
        return Err(Error::Config(format!("window {n} does not divide {t} clips")));
    }
    Ok(tape.window_max(x, n))
}

pub const STREAMS: [&str; 2] = ["dyn", "sta"];
pub const BRANCHES: [&str; 2] = ["fine", "coarse"];

pub fn map_prefix(stream: &str, branch: &str) -> String {
    format!("map.{stream}.{branch}")
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, rng: &mut R) {
    for stream in STREAMS {
        for branch in BRANCHES {
            let prefix = map_prefix(stream, branch);
            for layer in 1..=2 {
                store.init_glorot(
                    &format!("{prefix}.w{layer}"),
                    9 * hidden,
                    hidden,
                    9 * hidden,
                    hidden,
                    rng,
                );
                store.insert(format!("{prefix}.b{layer}"), Mat::zeros(1, hidden));
            }
        }
    }
}

/// Pre-convolution map: `max(f_i..=f_j) + f_i + f_j` on valid cells.
pub fn initial_map(tape: &mut Tape, x: Var) -> Var {
    tape.proposal_init(x)
}

/// Initial map followed by two masked 3x3 convolutions with a ReLU between.
pub fn build_map(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let side = tape.value(x).rows();
    if side == 0 {
        return Err(Error::Input("cannot build a proposal map from zero clips".into()));
    }
    let init = initial_map(tape, x);
    conv_stack(tape, p, prefix, init, side)
}

/// The two-layer masked convolution stack on an existing grid.
pub fn conv_stack(tape: &mut Tape, p: &Bound, prefix: &str, grid: Var, side: usize) -> Result<Var> {
    let c1 = tape.conv2d_masked(grid, p.var(&format!("{prefix}.w1"))?, p.var(&format!("{prefix}.b1"))?, side);
    let a1 = tape.relu(c1);
    Ok(tape.conv2d_masked(a1, p.var(&format!("{prefix}.w2"))?, p.var(&format!("{prefix}.b2"))?, side))
}

/// Cosine similarity of every valid proposal with every query, `N x V`.
pub fn score_map(tape: &mut Tape, map: Var, queries: Var, grid: &ProposalGrid) -> Result<Var> {
    let (rows, d) = tape.value(map).shape();
    if rows != grid.side() * grid.side() {
        return Err(Error::Shape(format!(
            "map has {rows} cells, grid expects {}",
            grid.side() * grid.side()
        )));
    }
    if tape.value(queries).cols() != d {
        return Err(Error::Shape("query width differs from proposal width".into()));
    }
    let cells = tape.gather_rows(map, grid.grid_rows());
    let cells = tape.row_normalize(cells);
    let q = tape.row_normalize(queries);
    Ok(tape.matmul_nt(q, cells))
}

/// Query–proposal relevance for one video at one granularity.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub grid: ProposalGrid,
    /// `N x V`
    pub scores: Mat,
}

impl ScoreMap {
    pub fn new(grid: ProposalGrid, scores: Mat) -> Result<Self> {
        if scores.cols() != grid.num_cells() {
            return Err(Error::Shape(format!(
                "{} score columns for {} cells",
                scores.cols(),
                grid.num_cells()
            )));
        }
        Ok(Self { grid, scores })
    }

    pub fn num_queries(&self) -> usize {
        self.scores.rows()
    }

    pub fn get(&self, query: usize, span: ClipSpan) -> Option<f64> {
        self.grid.cell_of(span).map(|c| self.scores.get(query, c))
    }

    /// `L x L` scores for one query; invalid cells are 0.
    pub fn dense(&self, query: usize) -> Mat {
        let side = self.grid.side();
        let mut out = Mat::zeros(side, side);
        for c in 0..self.grid.num_cells() {
            let s = self.grid.span(c);
            out.set(s.start - 1, s.end - 1, self.scores.get(query, c));
        }
        out
    }

    /// Convex combination of two maps over the same grid.
    pub fn blend(a: &ScoreMap, wa: f64, b: &ScoreMap, wb: f64) -> Result<ScoreMap> {
        if a.grid != b.grid || a.scores.shape() != b.scores.shape() {
            return Err(Error::Shape("cannot blend score maps of different shapes".into()));
        }
        Ok(ScoreMap {
            grid: a.grid.clone(),
            scores: a.scores.zip_map(&b.scores, |x, y| wa * x + wb * y),
        })
    }
}

/// Ranking order: higher score, then earlier start, then shorter span.
fn rank_order(a: &(ClipSpan, f64), b: &(ClipSpan, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then(a.0.start.cmp(&b.0.start))
        .then(a.0.len().cmp(&b.0.len()))
}

/// Greedy non-maximum suppression over one query's score map.
pub fn rank_proposals(map: &ScoreMap, query: usize, top_h: usize, nms_iou: f64) -> Result<Vec<(ClipSpan, f64)>> {
    if top_h == 0 {
        return Err(Error::Input("top_h must be at least 1".into()));
    }
    if query >= map.num_queries() {
        return Err(Error::Input(format!("query {query} out of range")));
    }
    let mut cands: Vec<(ClipSpan, f64)> = (0..map.grid.num_cells())
        .map(|c| (map.grid.span(c), map.scores.get(query, c)))
        .collect();
    cands.sort_by(rank_order);
    let mut kept: Vec<(ClipSpan, f64)> = Vec::with_capacity(top_h);
    for cand in cands {
        if kept.iter().all(|k| iou(&k.0, &cand.0) <= nms_iou) {
            kept.push(cand);
            if kept.len() == top_h {
                break;
            }
        }
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredMoment {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub query_id: String,
    pub proposals: Vec<ScoredMoment>,
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[QueryPrediction]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<QueryPrediction>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
