//! Training objectives: position-wise node alignment, IoU regression,
//! query–proposal contrast, and their weighted composite.

use serde::{Deserialize, Serialize};

use crate::data::{iou, Branch, ClipSpan};
use crate::error::{Error, Result};
use crate::proposals::ProposalGrid;
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_q: f64,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub tau_pna: f64,
    pub tau_contra: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_q: 1.0,
            lambda_c: 1.0,
            lambda_f: 0.0,
            lambda_d: 0.6,
            lambda_s: 0.4,
            tau_pna: 0.1,
            tau_contra: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_q, self.lambda_c, self.lambda_f, self.lambda_d, self.lambda_s];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau_pna > 0.0 && self.tau_contra > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }

    /// Share of the dynamic stream, `λ_D / (λ_D + λ_S)`; 0.5 when both are 0.
    pub fn dynamic_ratio(&self) -> f64 {
        let s = self.lambda_d + self.lambda_s;
        if s > 0.0 {
            self.lambda_d / s
        } else {
            0.5
        }
    }
}

/// Optional linear rescale of IoU targets: values below `min` map to 0,
/// above `max` to 1, linear in between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouRescale {
    pub min: f64,
    pub max: f64,
}

/// IoU of every valid cell with each query's ground-truth span, `N x V`.
pub fn iou_targets(grid: &ProposalGrid, gt: &[ClipSpan], rescale: Option<IouRescale>) -> Mat {
    Mat::from_fn(gt.len(), grid.num_cells(), |q, c| {
        let raw = iou(&grid.span(c), &gt[q]);
        match rescale {
            Some(r) => ((raw - r.min) / (r.max - r.min)).clamp(0.0, 1.0),
            None => raw,
        }
    })
}

/// InfoNCE aligning row `t` of `a` with row `t` of `b` against all rows of `b`:
/// `-(1/T) Σ_t log softmax_{t'}(cos(a_t, b_t') / τ)[t]`.
pub fn pna_loss(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    let (t, d) = tape.value(a).shape();
    if tape.value(b).shape() != (t, d) {
        return Err(Error::Shape("pna: streams must have equal shape".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("pna: temperature must be positive".into()));
    }
    if t <= 1 {
        return Ok(tape.constant(Mat::scalar(0.0)));
    }
    let an = tape.row_normalize(a);
    let bn = tape.row_normalize(b);
    let cos = tape.matmul_nt(an, bn);
    let logits = tape.scale(cos, 1.0 / tau);
    let lsm = tape.log_softmax_rows(logits);
    let pick = Mat::from_fn(t, t, |i, j| if i == j { -1.0 / t as f64 } else { 0.0 });
    Ok(tape.weighted_sum(lsm, pick))
}

/// Soft-target binary cross-entropy on probabilities `y`:
/// `-(1/M) Σ [IoU log y + (1 - IoU) log(1 - y)]`, `y` clamped away from 0 and 1.
pub fn soft_bce(tape: &mut Tape, y: Var, targets: &Mat) -> Result<Var> {
    if tape.value(y).shape() != targets.shape() {
        return Err(Error::Shape("iou loss: predictions and targets differ in shape".into()));
    }
    if let Some(bad) = targets.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("iou target {bad} outside [0, 1]")));
    }
    let m = targets.len();
    if m == 0 {
        return Ok(tape.constant(Mat::scalar(0.0)));
    }
    let y = tape.clamp(y, PROB_EPS, 1.0 - PROB_EPS);
    let log_y = tape.ln(y);
    let neg = tape.scale(y, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_1my = tape.ln(one_minus);
    let scale = -1.0 / m as f64;
    let pos = tape.weighted_sum(log_y, targets.map(|t| t * scale));
    let negw = tape.weighted_sum(log_1my, targets.map(|t| (1.0 - t) * scale));
    Ok(tape.add(pos, negw))
}

/// IoU regression on cosine scores, mapped to probabilities by `(s + 1) / 2`.
pub fn iou_loss(tape: &mut Tape, scores: Var, targets: &Mat) -> Result<Var> {
    let half = tape.scale(scores, 0.5);
    let y = tape.add_scalar(half, 0.5);
    soft_bce(tape, y, targets)
}

/// Two-sided contrast between the queries of one video and their
/// ground-truth proposals:
/// `-(Σ_q log p(m_q | q) + Σ_m log p(q_m | m))`, both softmaxes over `s / τ`.
pub fn contra_loss(tape: &mut Tape, scores: Var, gt_cells: &[usize], tau: f64) -> Result<Var> {
    let (n, v) = tape.value(scores).shape();
    if gt_cells.len() != n {
        return Err(Error::Shape(format!("contra: {} ground-truth cells for {n} queries", gt_cells.len())));
    }
    if let Some(&bad) = gt_cells.iter().find(|&&c| c >= v) {
        return Err(Error::Input(format!("contra: ground-truth cell {bad} out of {v}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("contra: temperature must be positive".into()));
    }
    if n == 0 {
        return Ok(tape.constant(Mat::scalar(0.0)));
    }
    let logits = tape.scale(scores, 1.0 / tau);
    // p(m_q | q): softmax over the proposals of each query
    let by_query = tape.log_softmax_rows(logits);
    let pick_q = Mat::from_fn(n, v, |q, c| if c == gt_cells[q] { -1.0 } else { 0.0 });
    let term_q = tape.weighted_sum(by_query, pick_q);
    // p(q_m | m): softmax over the queries for each ground-truth proposal
    let per_cell = tape.transpose(logits);
    let gathered = tape.gather_rows(per_cell, gt_cells);
    let by_cell = tape.log_softmax_rows(gathered);
    let pick_m = Mat::from_fn(n, n, |m, q| if m == q { -1.0 } else { 0.0 });
    let term_m = tape.weighted_sum(by_cell, pick_m);
    Ok(tape.add(term_q, term_m))
}

/// Individual objectives of one forward pass. Terms that were not computed
/// (inactive branch, disabled module) are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub branch: Branch,
    pub qccl: Option<T>,
    pub pna_coarse: Option<T>,
    pub pna_fine: Option<T>,
    pub iou_dyn: Option<T>,
    pub iou_sta: Option<T>,
    pub contra_dyn: Option<T>,
    pub contra_sta: Option<T>,
}

impl<T> LossTerms<T> {
    pub fn empty(branch: Branch) -> Self {
        Self {
            branch,
            qccl: None,
            pna_coarse: None,
            pna_fine: None,
            iou_dyn: None,
            iou_sta: None,
            contra_dyn: None,
            contra_sta: None,
        }
    }

    /// `(weight, term)` pairs of the composite objective.
    fn weighted(&self, w: &LossWeights) -> [(f64, Option<&T>); 7] {
        [
            (w.lambda_q, self.qccl.as_ref()),
            (w.lambda_c, self.pna_coarse.as_ref()),
            (w.lambda_f, self.pna_fine.as_ref()),
            (w.lambda_d, self.iou_dyn.as_ref()),
            (w.lambda_d, self.contra_dyn.as_ref()),
            (w.lambda_s, self.iou_sta.as_ref()),
            (w.lambda_s, self.contra_sta.as_ref()),
        ]
    }
}

impl LossTerms<Var> {
    pub fn values(&self, tape: &Tape) -> LossTerms<f64> {
        let v = |x: Option<Var>| x.map(|x| tape.scalar(x));
        LossTerms {
            branch: self.branch,
            qccl: v(self.qccl),
            pna_coarse: v(self.pna_coarse),
            pna_fine: v(self.pna_fine),
            iou_dyn: v(self.iou_dyn),
            iou_sta: v(self.iou_sta),
            contra_dyn: v(self.contra_dyn),
            contra_sta: v(self.contra_sta),
        }
    }
}

/// `λ_Q L_QCCL + λ_C L_PNA,c + λ_F L_PNA,f + λ_D (L_IoU,dyn + L_Con,dyn) + λ_S (L_IoU,sta + L_Con,sta)`
pub fn total_loss(tape: &mut Tape, terms: &LossTerms<Var>, w: &LossWeights) -> Var {
    let parts: Vec<(f64, Var)> = terms
        .weighted(w)
        .into_iter()
        .filter_map(|(c, t)| t.map(|&t| (c, t)))
        .filter(|(c, _)| *c != 0.0)
        .collect();
    tape.linear_combination(&parts)
}

impl LossTerms<f64> {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.weighted(w)
            .into_iter()
            .filter_map(|(c, t)| t.map(|&t| (c, t)))
            .filter(|(c, _)| *c != 0.0)
            .map(|(c, t)| c * t)
            .sum()
    }

    /// Element-wise mean over several passes; a term is present when it is
    /// present in every input.
    pub fn mean(items: &[LossTerms<f64>], branch: Branch) -> LossTerms<f64> {
        let avg = |f: fn(&LossTerms<f64>) -> Option<f64>| -> Option<f64> {
            if items.is_empty() {
                return None;
            }
            let vals: Option<Vec<f64>> = items.iter().map(f).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        LossTerms {
            branch,
            qccl: avg(|t| t.qccl),
            pna_coarse: avg(|t| t.pna_coarse),
            pna_fine: avg(|t| t.pna_fine),
            iou_dyn: avg(|t| t.iou_dyn),
            iou_sta: avg(|t| t.iou_sta),
            contra_dyn: avg(|t| t.contra_dyn),
            contra_sta: avg(|t| t.contra_sta),
        }
    }
}

pub const LOSS_CSV_HEADER: &str =
    "epoch,branch,L_QCCL,L_PNA_coarse,L_PNA_fine,L_IoU_dyn,L_IoU_sta,L_Contra_dyn,L_Contra_sta,total";

/// One CSV row; absent terms are left empty.
pub fn loss_csv_row(epoch: usize, terms: &LossTerms<f64>, w: &LossWeights) -> String {
    let f = |x: Option<f64>| x.map(|v| format!("{v:.10e}")).unwrap_or_default();
    format!(
        "{epoch},{},{},{},{},{},{},{},{},{:.10e}",
        terms.branch,
        f(terms.qccl),
        f(terms.pna_coarse),
        f(terms.pna_fine),
        f(terms.iou_dyn),
        f(terms.iou_sta),
        f(terms.contra_dyn),
        f(terms.contra_sta),
        terms.total(w)
    )
}
