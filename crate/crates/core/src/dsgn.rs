//! Dual-stream temporal graphs: query–clip contrastive loss and adaptive
//! top-K graph message passing.
//!
//! Graph nodes are the rows of a `T x D` clip sequence and are indexed
//! from 0 here. Edges always point forward in time (`src < dst`).

use log::warn;
use rand::Rng;

use crate::data::{contained_clip_span, moment_to_clip_span, ClipSpan, Moment};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{cosine, Mat};

/// Gaussian radial basis weight for a temporal distance.
pub fn rbf(distance: f64, sigma: f64) -> f64 {
    (-(distance * distance) / (2.0 * sigma * sigma)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub cosine: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    pub num_nodes: usize,
    pub sigma: f64,
    /// Ranked by retention order (highest cosine first).
    pub edges: Vec<Edge>,
}

impl TemporalGraph {
    /// Dense propagation matrix: `A[i][i] = Φ(0) = 1`, `A[dst][src] = Φ(dst - src)`.
    pub fn propagation_matrix(&self) -> Mat {
        let mut a = Mat::identity(self.num_nodes);
        for e in &self.edges {
            a.set(e.dst, e.src, e.weight);
        }
        a
    }

    /// Sources of edges ending at `node`.
    pub fn in_neighbors(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.dst == node)
    }
}

/// Keeps the `k_edges` forward pairs with the highest cosine similarity.
/// Ties go to the shorter temporal distance, then the smaller source.
pub fn build_graph(features: &Mat, k_edges: usize, sigma: f64) -> Result<TemporalGraph> {
    let t = features.rows();
    if t < 2 {
        return Err(Error::Input(format!("graph needs at least 2 nodes, got {t}")));
    }
    if k_edges == 0 {
        return Err(Error::Config("k_edges must be at least 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("rbf sigma must be positive, got {sigma}")));
    }
    let mut candidates = Vec::with_capacity(t * (t - 1) / 2);
    for i in 0..t {
        for j in i + 1..t {
            candidates.push((cosine(features.row(i), features.row(j)), i, j));
        }
    }
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then((a.2 - a.1).cmp(&(b.2 - b.1)))
            .then(a.1.cmp(&b.1))
    });
    candidates.truncate(k_edges);
    let edges = candidates
        .into_iter()
        .map(|(c, src, dst)| Edge {
            src,
            dst,
            cosine: c,
            weight: rbf((dst - src) as f64, sigma),
        })
        .collect();
    Ok(TemporalGraph {
        num_nodes: t,
        sigma,
        edges,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphConfig {
    pub k_edges: usize,
    pub layers: usize,
    pub sigma: f64,
    /// Rebuild edges from the current features before every layer;
    /// otherwise build once from the input.
    pub adaptive: bool,
}

impl GraphConfig {
    /// Default RBF width for `t` nodes.
    pub fn default_sigma(t: usize) -> f64 {
        t as f64 / 8.0
    }
}

/// One propagation step with a fixed graph: `relu(A · F)`.
pub fn propagate(tape: &mut Tape, x: Var, graph: &TemporalGraph) -> Var {
    let a = tape.constant(graph.propagation_matrix());
    let mixed = tape.matmul(a, x);
    tape.relu(mixed)
}

/// Runs `cfg.layers` rounds of message passing. Returns the final features
/// and the graph used at each layer.
pub fn graph_forward(tape: &mut Tape, x: Var, cfg: &GraphConfig) -> Result<(Var, Vec<TemporalGraph>)> {
    let mut cur = x;
    let mut graphs = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let g = if cfg.adaptive || layer == 0 {
            build_graph(tape.value(cur), cfg.k_edges, cfg.sigma)?
        } else {
            graphs.last().cloned().expect("layer 0 built a graph")
        };
        cur = propagate(tape, cur, &g);
        graphs.push(g);
    }
    Ok((cur, graphs))
}

/// Message passing over a given per-layer edge set.
pub fn graph_forward_frozen(tape: &mut Tape, x: Var, graphs: &[TemporalGraph]) -> Var {
    graphs.iter().fold(x, |cur, g| propagate(tape, cur, g))
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, rng: &mut R) {
    store.init_glorot("qccl.w", hidden, hidden, hidden, hidden, rng);
}

/// Positive clips for a query: the clips lying entirely inside the moment,
/// or the covering span when no clip fits inside it.
pub fn positive_span(m: &Moment, duration: f64, num_clips: usize) -> Result<ClipSpan> {
    match contained_clip_span(m, duration, num_clips) {
        Some(s) => Ok(s),
        None => moment_to_clip_span(m, duration, num_clips),
    }
}

/// Query–clip contrastive loss with a bilinear discriminator
/// `C(q, f) = qᵀ W f`:
///
/// `(1/N) Σ_i [ mean_{f∈P_i} sp(-C(q_i,f)) + mean_{f∈N_i} sp(C(q_i,f)) ]`
///
/// `positives` is `N` rows of `T` flags. A query without negatives
/// contributes only its positive term.
pub fn qccl_loss(tape: &mut Tape, queries: Var, clips: Var, w: Var, positives: &[Vec<bool>]) -> Result<Var> {
    let (n, d) = tape.value(queries).shape();
    let (t, dc) = tape.value(clips).shape();
    if dc != d || tape.value(w).shape() != (d, d) {
        return Err(Error::Shape("qccl: widths disagree".into()));
    }
    if positives.len() != n || positives.iter().any(|p| p.len() != t) {
        return Err(Error::Shape("qccl: positive mask must be N x T".into()));
    }
    if n == 0 {
        return Ok(tape.constant(Mat::scalar(0.0)));
    }
    let mut wp = Mat::zeros(n, t);
    let mut wn = Mat::zeros(n, t);
    for (i, row) in positives.iter().enumerate() {
        let n_pos = row.iter().filter(|&&b| b).count();
        let n_neg = t - n_pos;
        if n_pos == 0 {
            return Err(Error::Input(format!("qccl: query {i} has no positive clip")));
        }
        if n_neg == 0 {
            warn!("qccl: query {i} spans the whole video; negative term skipped");
        }
        for (j, &pos) in row.iter().enumerate() {
            if pos {
                wp.set(i, j, 1.0 / (n * n_pos) as f64);
            } else {
                wn.set(i, j, 1.0 / (n * n_neg) as f64);
            }
        }
    }
    let qw = tape.matmul(queries, w);
    let scores = tape.matmul_nt(qw, clips);
    let neg_scores = tape.scale(scores, -1.0);
    let sp_neg = tape.softplus(neg_scores);
    let sp_pos = tape.softplus(scores);
    let pos_term = tape.weighted_sum(sp_neg, wp);
    let neg_term = tape.weighted_sum(sp_pos, wn);
    Ok(tape.add(pos_term, neg_term))
}

/// `N x T` positive flags from 1-based spans.
pub fn positive_mask(spans: &[ClipSpan], num_clips: usize) -> Vec<Vec<bool>> {
    spans
        .iter()
        .map(|s| (1..=num_clips).map(|c| s.contains(c)).collect())
        .collect()
}
