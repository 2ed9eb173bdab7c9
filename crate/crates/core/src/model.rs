//! The full forward pass: encoders, fusion, dual-stream graphs, proposal
//! maps, and the per-branch loss terms. Training and inference share
//! [`forward`]; inference is the fine branch with QCCL switched off.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{fine_to_coarse, Branch, ClipSpan, GranularityConfig, VideoRecord};
use crate::dsgn::{self, GraphConfig, TemporalGraph};
use crate::encoders::{self, EncoderDims};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::losses::{self, IouRescale, LossTerms, LossWeights};
use crate::params::{Bound, ParamStore};
use crate::proposals::{self, ProposalGrid, ScoreMap};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

/// Architecture hyperparameters stored alongside every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub raw_dynamic: usize,
    pub raw_static: usize,
    pub embed: usize,
    pub hidden: usize,
    pub fine_clips: usize,
    pub window: usize,
    pub k_edges: usize,
    pub graph_layers: usize,
    pub rbf_sigma: f64,
    pub adaptive_graph: bool,
    pub ema_decay: f64,
    pub literal_eq2: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        GranularityConfig::new(self.fine_clips, self.window)?;
        if self.hidden == 0 || self.raw_dynamic == 0 || self.raw_static == 0 || self.embed == 0 {
            return Err(Error::Config("all widths must be positive".into()));
        }
        if self.fine_clips < encoders::KERNEL_WIDTH {
            return Err(Error::Config(format!(
                "fine_clips must be at least {}",
                encoders::KERNEL_WIDTH
            )));
        }
        if self.k_edges == 0 {
            return Err(Error::Config("k_edges must be positive".into()));
        }
        if !(self.rbf_sigma > 0.0 && self.rbf_sigma.is_finite()) {
            return Err(Error::Config("rbf_sigma must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn granularity(&self) -> GranularityConfig {
        GranularityConfig::new(self.fine_clips, self.window).expect("validated")
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            k_edges: self.k_edges,
            layers: self.graph_layers,
            sigma: self.rbf_sigma,
            adaptive: self.adaptive_graph,
        }
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            raw_dynamic: self.raw_dynamic,
            raw_static: self.raw_static,
            embed: self.embed,
            hidden: self.hidden,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            literal_eq2: self.literal_eq2,
        }
    }
}

/// Fresh parameters for every block of the model.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    encoders::init_params(&mut store, cfg.encoder_dims(), rng);
    fusion::init_params(&mut store, cfg.hidden, rng);
    dsgn::init_params(&mut store, cfg.hidden, rng);
    proposals::init_params(&mut store, cfg.hidden, rng);
    store
}

/// Which optional objectives a forward pass computes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    /// IoU regression and contrastive terms on the branch's scores.
    pub supervise: bool,
    pub qccl: bool,
    pub pna: bool,
    pub weights: LossWeights,
    pub iou_rescale: Option<IouRescale>,
}

impl Objectives {
    /// Inference: nothing beyond the score maps.
    pub fn none() -> Self {
        Self {
            supervise: false,
            qccl: false,
            pna: false,
            weights: LossWeights::default(),
            iou_rescale: None,
        }
    }
}

/// One video ready for the model.
#[derive(Clone, Debug)]
pub struct VideoInput {
    /// `T x D_raw`
    pub dynamic: Mat,
    pub static_: Mat,
    /// Mean-pooled token embeddings, `N x E`.
    pub queries: Mat,
    /// Covering fine-grid span per query.
    pub gt_spans: Vec<ClipSpan>,
    /// Fine clips lying inside each query's moment.
    pub positive_spans: Vec<ClipSpan>,
}

impl VideoInput {
    pub fn new(video: &VideoRecord, dynamic: &Mat, static_: &Mat, embeddings: &Mat) -> Result<Self> {
        let tokens: Vec<Vec<u32>> = video.queries.iter().map(|q| q.tokens.clone()).collect();
        let queries = encoders::mean_pool_tokens(&tokens, embeddings)?;
        let mut gt_spans = Vec::with_capacity(video.queries.len());
        let mut positive_spans = Vec::with_capacity(video.queries.len());
        for q in &video.queries {
            gt_spans.push(video.clip_span(q)?);
            positive_spans.push(dsgn::positive_span(&q.moment, video.duration, video.num_clips)?);
        }
        Ok(Self {
            dynamic: dynamic.clone(),
            static_: static_.clone(),
            queries,
            gt_spans,
            positive_spans,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.queries.rows()
    }
}

/// Tape handles and graphs produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub branch: Branch,
    pub grid: ProposalGrid,
    /// Graph-refined features, `T x D`.
    pub nodes_dyn: Var,
    pub nodes_sta: Var,
    /// Fused query features, `N x D`.
    pub queries: Var,
    /// `N x V` cosine scores per stream on the branch's grid.
    pub scores_dyn: Var,
    pub scores_sta: Var,
    pub graphs_dyn: Vec<TemporalGraph>,
    pub graphs_sta: Vec<TemporalGraph>,
    pub terms: LossTerms<Var>,
}

impl Forward {
    pub fn score_maps(&self, tape: &Tape) -> (ScoreMap, ScoreMap) {
        let mk = |v: Var| ScoreMap {
            grid: self.grid.clone(),
            scores: tape.value(v).clone(),
        };
        (mk(self.scores_dyn), mk(self.scores_sta))
    }
}

/// Runs the model on one video, placing the loss terms enabled by `obj` on
/// the tape.
pub fn forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    input: &VideoInput,
    branch: Branch,
    obj: &Objectives,
) -> Result<Forward> {
    let t = input.dynamic.rows();
    if t != cfg.fine_clips || input.static_.rows() != cfg.fine_clips {
        return Err(Error::Shape(format!(
            "video has {t} clips, model expects {}",
            cfg.fine_clips
        )));
    }
    if input.dynamic.cols() != cfg.raw_dynamic || input.static_.cols() != cfg.raw_static {
        return Err(Error::Shape("raw feature widths differ from the model".into()));
    }
    if input.queries.cols() != cfg.embed {
        return Err(Error::Shape("token embedding width differs from the model".into()));
    }
    let n = input.num_queries();
    if input.gt_spans.len() != n || input.positive_spans.len() != n {
        return Err(Error::Shape("one ground-truth span per query required".into()));
    }

    let raw_dyn = tape.constant(input.dynamic.clone());
    let raw_sta = tape.constant(input.static_.clone());
    let pooled = tape.constant(input.queries.clone());
    let enc_dyn = encoders::encode_dynamic(tape, p, raw_dyn)?;
    let enc_sta = encoders::encode_static(tape, p, raw_sta, cfg.ema_decay)?;
    let enc_qry = encoders::encode_queries(tape, p, pooled)?;
    let fused = fusion::fuse(tape, p, enc_dyn, enc_sta, enc_qry, cfg.fusion())?;

    let mut terms = LossTerms::empty(branch);
    if obj.qccl && n > 0 {
        let mask = dsgn::positive_mask(&input.positive_spans, t);
        let w = p.var("qccl.w")?;
        let a = dsgn::qccl_loss(tape, fused.queries, fused.dynamic, w, &mask)?;
        let b = dsgn::qccl_loss(tape, fused.queries, fused.static_, w, &mask)?;
        terms.qccl = Some(tape.linear_combination(&[(0.5, a), (0.5, b)]));
    }

    let graph_cfg = cfg.graph();
    let (nodes_dyn, graphs_dyn) = dsgn::graph_forward(tape, fused.dynamic, &graph_cfg)?;
    let (nodes_sta, graphs_sta) = dsgn::graph_forward(tape, fused.static_, &graph_cfg)?;

    let gran = cfg.granularity();
    let coarse = if obj.pna || branch == Branch::Coarse {
        Some((
            proposals::aggregate_coarse(tape, nodes_dyn, gran.window())?,
            proposals::aggregate_coarse(tape, nodes_sta, gran.window())?,
        ))
    } else {
        None
    };
    if obj.pna {
        let (cd, cs) = coarse.expect("built above");
        terms.pna_coarse = Some(losses::pna_loss(tape, cd, cs, obj.weights.tau_pna)?);
        if obj.weights.lambda_f != 0.0 {
            terms.pna_fine = Some(losses::pna_loss(tape, nodes_dyn, nodes_sta, obj.weights.tau_pna)?);
        }
    }

    let (feat_dyn, feat_sta, side, gt) = match branch {
        Branch::Fine => (nodes_dyn, nodes_sta, gran.fine(), input.gt_spans.clone()),
        Branch::Coarse => {
            let (cd, cs) = coarse.expect("built for the coarse branch");
            let gt = input.gt_spans.iter().map(|&s| fine_to_coarse(s, &gran)).collect();
            (cd, cs, gran.coarse(), gt)
        }
    };
    let grid = ProposalGrid::new(side);
    let map_dyn = proposals::build_map(tape, p, &proposals::map_prefix("dyn", branch.as_str()), feat_dyn)?;
    let map_sta = proposals::build_map(tape, p, &proposals::map_prefix("sta", branch.as_str()), feat_sta)?;
    let scores_dyn = proposals::score_map(tape, map_dyn, fused.queries, &grid)?;
    let scores_sta = proposals::score_map(tape, map_sta, fused.queries, &grid)?;

    if obj.supervise && n > 0 {
        let targets = losses::iou_targets(&grid, &gt, obj.iou_rescale);
        let cells: Vec<usize> = gt
            .iter()
            .map(|&s| grid.cell_of(s).ok_or_else(|| Error::Input(format!("span {s:?} off the grid"))))
            .collect::<Result<_>>()?;
        let tau = obj.weights.tau_contra;
        terms.iou_dyn = Some(losses::iou_loss(tape, scores_dyn, &targets)?);
        terms.iou_sta = Some(losses::iou_loss(tape, scores_sta, &targets)?);
        terms.contra_dyn = Some(losses::contra_loss(tape, scores_dyn, &cells, tau)?);
        terms.contra_sta = Some(losses::contra_loss(tape, scores_sta, &cells, tau)?);
    }

    Ok(Forward {
        branch,
        grid,
        nodes_dyn,
        nodes_sta,
        queries: fused.queries,
        scores_dyn,
        scores_sta,
        graphs_dyn,
        graphs_sta,
        terms,
    })
}
