//! Brute-force reference implementations and the comparisons against the
//! library. Each check covers at least 100 random instances.

use rand::seq::SliceRandom;
use rand::Rng;
use sdgan::data::{GroundingDataset, Moment, QueryRecord, VideoRecord};
use sdgan::dsgn::{build_graph, qccl_loss};
use sdgan::eval::compute_metrics;
use sdgan::losses::{contra_loss, iou_loss, pna_loss, PROB_EPS};
use sdgan::proposals::{QueryPrediction, ScoredMoment};
use sdgan::tape::Tape;
use sdgan::tensor::Mat;

use super::{close, for_seeds, randn, rng};

pub const INSTANCES: u64 = 120;
pub const TOL: f64 = 1e-6;
pub const SUM_TOL: f64 = 1e-8;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row[k] - m - z.ln()
}

/// `(src, dst, weight)` of the retained edges, in retention order.
pub fn graph_oracle(f: &Mat, k: usize, sigma: f64) -> Vec<(usize, usize, f64)> {
    let t = f.rows();
    let mut pairs = Vec::new();
    for i in 0..t {
        for j in i + 1..t {
            pairs.push((i, j, cos(f.row(i), f.row(j))));
        }
    }
    pairs.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then((a.1 - a.0).cmp(&(b.1 - b.0)))
            .then(a.0.cmp(&b.0))
    });
    pairs
        .into_iter()
        .take(k)
        .map(|(i, j, _)| {
            let d = (j - i) as f64;
            (i, j, (-d * d / (2.0 * sigma * sigma)).exp())
        })
        .collect()
}

pub fn graph_construction() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed);
        let t = r.gen_range(2..=10);
        let d = r.gen_range(1..=5);
        let mut f = randn(t, d, &mut r);
        // force exact ties on some instances
        if seed % 3 == 0 && t >= 3 {
            let src = f.row(0).to_vec();
            f.row_mut(t - 1).copy_from_slice(&src);
            f.row_mut(1).copy_from_slice(&src);
        }
        let cands = t * (t - 1) / 2;
        let k = r.gen_range(1..=cands + 2);
        let sigma = r.gen_range(0.5..4.0);
        let g = build_graph(&f, k, sigma).map_err(|e| e.to_string())?;
        let want = graph_oracle(&f, k, sigma);
        if g.edges.len() != want.len() {
            return Err(format!("{} edges, oracle {}", g.edges.len(), want.len()));
        }
        for (e, w) in g.edges.iter().zip(&want) {
            if (e.src, e.dst) != (w.0, w.1) {
                return Err(format!("edge ({}, {}) vs oracle ({}, {})", e.src, e.dst, w.0, w.1));
            }
            close(e.weight, w.2, TOL, "edge weight")?;
        }
        Ok(())
    })
}

/// Pre-convolution map `max(f_i..=f_j) + f_i + f_j`, zero below the diagonal.
pub fn map_oracle(f: &Mat) -> Mat {
    let (l, d) = f.shape();
    let mut out = Mat::zeros(l * l, d);
    for i in 0..l {
        for j in i..l {
            for c in 0..d {
                let mut m = f64::NEG_INFINITY;
                for k in i..=j {
                    m = m.max(f.get(k, c));
                }
                out.set(i * l + j, c, m + f.get(i, c) + f.get(j, c));
            }
        }
    }
    out
}

pub fn proposal_map_init() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 1000);
        let l = r.gen_range(1..=8);
        let d = r.gen_range(1..=4);
        let f = randn(l, d, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(f.clone());
        let m = tape.proposal_init(x);
        let diff = tape.value(m).max_abs_diff(&map_oracle(&f));
        close(diff, 0.0, SUM_TOL, "map cell")
    })
}

pub fn qccl_oracle(q: &Mat, f: &Mat, w: &Mat, pos: &[Vec<bool>]) -> f64 {
    let n = q.rows();
    let mut total = 0.0;
    for i in 0..n {
        let (mut sp, mut np, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
        for t in 0..f.rows() {
            let mut c = 0.0;
            for a in 0..q.cols() {
                for b in 0..q.cols() {
                    c += q.get(i, a) * w.get(a, b) * f.get(t, b);
                }
            }
            if pos[i][t] {
                sp += softplus(-c);
                np += 1;
            } else {
                sn += softplus(c);
                nn += 1;
            }
        }
        total += sp / np as f64;
        if nn > 0 {
            total += sn / nn as f64;
        }
    }
    total / n as f64
}

pub fn qccl() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 2000);
        let (n, t, d) = (r.gen_range(1..=3), r.gen_range(2..=6), r.gen_range(1..=4));
        let (q, f, w) = (randn(n, d, &mut r), randn(t, d, &mut r), randn(d, d, &mut r));
        let pos: Vec<Vec<bool>> = (0..n)
            .map(|_| {
                let s = r.gen_range(0..t);
                let e = r.gen_range(s..t);
                (0..t).map(|c| (s..=e).contains(&c)).collect()
            })
            .collect();
        let mut tape = Tape::new();
        let (qv, fv, wv) = (tape.constant(q.clone()), tape.constant(f.clone()), tape.constant(w.clone()));
        let l = qccl_loss(&mut tape, qv, fv, wv, &pos).map_err(|e| e.to_string())?;
        close(tape.scalar(l), qccl_oracle(&q, &f, &w, &pos), TOL, "qccl")
    })
}

pub fn pna_oracle(a: &Mat, b: &Mat, tau: f64) -> f64 {
    let t = a.rows();
    let mut total = 0.0;
    for i in 0..t {
        let row: Vec<f64> = (0..t).map(|j| cos(a.row(i), b.row(j)) / tau).collect();
        total -= log_softmax_at(&row, i);
    }
    total / t as f64
}

pub fn pna() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 3000);
        let (t, d) = (r.gen_range(1..=6), r.gen_range(1..=5));
        let tau = r.gen_range(0.05..2.0);
        let (a, b) = (randn(t, d, &mut r), randn(t, d, &mut r));
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let l = pna_loss(&mut tape, av, bv, tau).map_err(|e| e.to_string())?;
        close(tape.scalar(l), pna_oracle(&a, &b, tau), TOL, "pna")
    })
}

pub fn iou_oracle(s: &Mat, targets: &Mat) -> f64 {
    let m = s.len();
    let mut total = 0.0;
    for k in 0..m {
        let y = ((s.as_slice()[k] + 1.0) / 2.0).clamp(PROB_EPS, 1.0 - PROB_EPS);
        let t = targets.as_slice()[k];
        total += t * y.ln() + (1.0 - t) * (1.0 - y).ln();
    }
    -total / m as f64
}

pub fn iou() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 4000);
        let (n, v) = (r.gen_range(1..=3), r.gen_range(1..=10));
        let s = Mat::from_fn(n, v, |_, _| r.gen_range(-1.0..=1.0));
        let t = Mat::from_fn(n, v, |_, _| if r.gen_bool(0.2) { 0.0 } else { r.gen::<f64>() });
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let l = iou_loss(&mut tape, sv, &t).map_err(|e| e.to_string())?;
        close(tape.scalar(l), iou_oracle(&s, &t), TOL, "iou")
    })
}

pub fn contra_oracle(s: &Mat, cells: &[usize], tau: f64) -> f64 {
    let n = s.rows();
    let mut total = 0.0;
    for q in 0..n {
        let row: Vec<f64> = s.row(q).iter().map(|v| v / tau).collect();
        total -= log_softmax_at(&row, cells[q]);
    }
    for m in 0..n {
        let col: Vec<f64> = (0..n).map(|q| s.get(q, cells[m]) / tau).collect();
        total -= log_softmax_at(&col, m);
    }
    total
}

pub fn contra() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 5000);
        let n = r.gen_range(1..=3);
        let l = r.gen_range(1..=4);
        let v = l * (l + 1) / 2;
        let tau = r.gen_range(0.05..2.0);
        let s = Mat::from_fn(n, v, |_, _| r.gen_range(-1.0..=1.0));
        let cells: Vec<usize> = (0..n).map(|_| r.gen_range(0..v)).collect();
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let got = contra_loss(&mut tape, sv, &cells, tau).map_err(|e| e.to_string())?;
        close(tape.scalar(got), contra_oracle(&s, &cells, tau), TOL, "contra")
    })
}

fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    inter / union
}

/// Random dataset of `n` queries on integer-second grids (so exact IoU
/// ties at the thresholds occur) and ranked predictions, some missing.
pub fn random_eval_case(seed: u64, n: usize) -> (GroundingDataset, Vec<QueryPrediction>) {
    let mut r = rng(seed);
    let mut videos = Vec::new();
    let mut preds = Vec::new();
    let span = |r: &mut rand_chacha::ChaCha8Rng| {
        let s = r.gen_range(0..10) as f64;
        let e = r.gen_range(s as usize + 1..=10) as f64;
        (s, e)
    };
    for qi in 0..n {
        if qi % 4 == 0 {
            videos.push(VideoRecord {
                video_id: format!("v{}", qi / 4),
                duration: 10.0,
                num_clips: 10,
                queries: Vec::new(),
            });
        }
        let (s, e) = span(&mut r);
        let id = format!("q{qi}");
        videos.last_mut().unwrap().queries.push(QueryRecord {
            query_id: id.clone(),
            tokens: vec![0],
            moment: Moment { start: s, end: e },
        });
        if r.gen_bool(0.9) {
            let k = r.gen_range(0..=7);
            preds.push(QueryPrediction {
                query_id: id,
                proposals: (0..k)
                    .map(|_| {
                        let (start, end) = span(&mut r);
                        ScoredMoment { start, end, score: 0.0 }
                    })
                    .collect(),
            });
        }
    }
    preds.shuffle(&mut r);
    (GroundingDataset { videos }, preds)
}

/// `(recall[h][u], mIoU)` by direct recount.
pub fn metrics_oracle(ds: &GroundingDataset, preds: &[QueryPrediction]) -> ([[f64; 3]; 2], f64) {
    let ranks = [1usize, 5];
    let thresholds = [0.3, 0.5, 0.7];
    let mut hits = [[0usize; 3]; 2];
    let mut iou_sum = 0.0;
    let mut n = 0usize;
    for v in &ds.videos {
        for q in &v.queries {
            n += 1;
            let gt = (q.moment.start, q.moment.end);
            let mut found = None;
            for p in preds {
                if p.query_id == q.query_id {
                    found = Some(p);
                }
            }
            let Some(p) = found else { continue };
            if let Some(first) = p.proposals.first() {
                iou_sum += interval_iou((first.start, first.end), gt);
            }
            for (hi, &h) in ranks.iter().enumerate() {
                for (ui, &u) in thresholds.iter().enumerate() {
                    let mut hit = false;
                    for m in p.proposals.iter().take(h) {
                        if interval_iou((m.start, m.end), gt) >= u {
                            hit = true;
                        }
                    }
                    if hit {
                        hits[hi][ui] += 1;
                    }
                }
            }
        }
    }
    let recall = hits.map(|row| row.map(|c| 100.0 * c as f64 / n as f64));
    (recall, 100.0 * iou_sum / n as f64)
}

pub fn metrics() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let (ds, preds) = random_eval_case(seed + 6000, 50);
        let r = compute_metrics(&preds, &ds).map_err(|e| e.to_string())?;
        let (recall, miou) = metrics_oracle(&ds, &preds);
        if r.recall != recall {
            return Err(format!("recall {:?} vs oracle {:?}", r.recall, recall));
        }
        close(r.miou, miou, SUM_TOL, "mIoU")
    })
}

/// Every criterion-1 comparison, by name.
pub fn all() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("graph construction", graph_construction),
        ("pre-conv proposal map", proposal_map_init),
        ("qccl loss", qccl),
        ("pna loss", pna),
        ("iou loss", iou),
        ("contrastive loss", contra),
        ("metrics", metrics),
    ]
}
