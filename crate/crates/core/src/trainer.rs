//! Optimization with the alternating coarse/fine schedule, checkpoints, and
//! the inference path.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{decode_blob, encode_blob, Branch, Corpus};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, MetricReport};
use crate::losses::{loss_csv_row, total_loss, IouRescale, LossTerms, LossWeights, LOSS_CSV_HEADER};
use crate::model::{self, ModelConfig, Objectives, VideoInput};
use crate::params::ParamStore;
use crate::proposals::{rank_proposals, QueryPrediction, ScoreMap, ScoredMoment};
use crate::tape::Tape;
use crate::tensor::Mat;

pub const SEED_ENV: &str = "SDGAN_SEED";

/// Alternates the supervised branch every `period` epochs, starting with
/// `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PehtSchedule {
    pub period: usize,
    pub start: Branch,
    pub total_epochs: usize,
}

impl PehtSchedule {
    pub fn branch(&self, epoch: usize) -> Branch {
        let other = match self.start {
            Branch::Coarse => Branch::Fine,
            Branch::Fine => Branch::Coarse,
        };
        if (epoch / self.period.max(1)) % 2 == 0 {
            self.start
        } else {
            other
        }
    }

    pub fn branches(&self) -> impl Iterator<Item = Branch> + '_ {
        (0..self.total_epochs).map(|e| self.branch(e))
    }
}

/// Every hyperparameter of a training run. Serialized as a flat TOML table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,

    pub hidden: usize,
    pub fine_clips: usize,
    pub window: usize,
    pub k_edges: usize,
    pub graph_layers: usize,
    pub rbf_sigma: f64,
    pub adaptive_graph: bool,
    pub ema_decay: f64,
    pub literal_eq2: bool,

    pub lambda_q: f64,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub tau_pna: f64,
    pub tau_contra: f64,
    pub iou_rescale_min: Option<f64>,
    pub iou_rescale_max: Option<f64>,

    pub peht_period: usize,
    pub peht_start: Branch,
    pub qccl_enabled: bool,
    pub pna_enabled: bool,

    pub top_h: usize,
    pub nms_iou: f64,
    /// Evaluate on the training corpus every this many epochs (and at the
    /// last epoch) to pick the best checkpoint.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 60,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            hidden: 32,
            fine_clips: 16,
            window: 2,
            k_edges: 48,
            graph_layers: 2,
            rbf_sigma: 2.0,
            adaptive_graph: true,
            ema_decay: 0.5,
            literal_eq2: true,
            lambda_q: w.lambda_q,
            lambda_c: w.lambda_c,
            lambda_f: w.lambda_f,
            lambda_d: w.lambda_d,
            lambda_s: w.lambda_s,
            tau_pna: w.tau_pna,
            tau_contra: w.tau_contra,
            iou_rescale_min: None,
            iou_rescale_max: None,
            peht_period: 10,
            peht_start: Branch::Coarse,
            qccl_enabled: true,
            pna_enabled: true,
            top_h: 5,
            nms_iou: 0.5,
            eval_every: 5,
        }
    }
}

impl TrainConfig {
    /// Named hyperparameter sets: `activitynet`, `charades`, `tacos`, and
    /// `synthetic` (the defaults, sized for generated corpora).
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let table = |lr, batch, epochs, fine, edges| Self {
            learning_rate: lr,
            batch_size: batch,
            epochs,
            hidden: 256,
            fine_clips: fine,
            window: 2,
            k_edges: edges,
            rbf_sigma: fine as f64 / 8.0,
            ..base.clone()
        };
        match name {
            "activitynet" => Ok(table(8e-4, 32, 32, 64, 1104)),
            "charades" => Ok(table(1e-3, 16, 20, 128, 1104)),
            "tacos" => Ok(table(15e-4, 4, 140, 128, 2548)),
            "synthetic" => Ok(base),
            other => Err(Error::Config(format!("unknown preset {other}"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Replaces the seed with `SDGAN_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.peht_period == 0 {
            return Err(Error::Config("epochs, batch_size and peht_period must be at least 1".into()));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if self.top_h == 0 || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("top_h must be positive and nms_iou in [0, 1]".into()));
        }
        if self.iou_rescale_min.is_some() != self.iou_rescale_max.is_some() {
            return Err(Error::Config("iou_rescale_min and iou_rescale_max go together".into()));
        }
        if let Some(r) = self.iou_rescale() {
            if !(0.0 <= r.min && r.min < r.max && r.max <= 1.0) {
                return Err(Error::Config("iou rescale needs 0 <= min < max <= 1".into()));
            }
        }
        self.loss_weights().validate()?;
        self.model_config(1, 1, 1).validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_q: self.lambda_q,
            lambda_c: self.lambda_c,
            lambda_f: self.lambda_f,
            lambda_d: self.lambda_d,
            lambda_s: self.lambda_s,
            tau_pna: self.tau_pna,
            tau_contra: self.tau_contra,
        }
    }

    pub fn iou_rescale(&self) -> Option<IouRescale> {
        match (self.iou_rescale_min, self.iou_rescale_max) {
            (Some(min), Some(max)) => Some(IouRescale { min, max }),
            _ => None,
        }
    }

    pub fn schedule(&self) -> PehtSchedule {
        PehtSchedule {
            period: self.peht_period,
            start: self.peht_start,
            total_epochs: self.epochs,
        }
    }

    pub fn model_config(&self, raw_dynamic: usize, raw_static: usize, embed: usize) -> ModelConfig {
        ModelConfig {
            raw_dynamic,
            raw_static,
            embed,
            hidden: self.hidden,
            fine_clips: self.fine_clips,
            window: self.window,
            k_edges: self.k_edges,
            graph_layers: self.graph_layers,
            rbf_sigma: self.rbf_sigma,
            adaptive_graph: self.adaptive_graph,
            ema_decay: self.ema_decay,
            literal_eq2: self.literal_eq2,
        }
    }

    pub fn objectives(&self) -> Objectives {
        Objectives {
            supervise: true,
            qccl: self.qccl_enabled,
            pna: self.pna_enabled,
            weights: self.loss_weights(),
            iou_rescale: self.iou_rescale(),
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Mat>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(p.rows(), p.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(p.rows(), p.cols()));
            let (pd, md, vd) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice());
            for (i, &gi) in g.as_slice().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        }
    }
}

const CKPT_MAGIC: &[u8; 4] = b"SDGC";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub epoch: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub blocks: Vec<BlockInfo>,
}

/// Model parameters with the configuration needed to rebuild the forward pass.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(epoch: usize, model: ModelConfig, train: TrainConfig, params: ParamStore) -> Self {
        let blocks = params
            .iter()
            .map(|(name, m)| BlockInfo {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        Self {
            manifest: CheckpointManifest {
                epoch,
                model,
                train,
                blocks,
            },
            params,
        }
    }

    /// Layout: `"SDGC"`, version `u32`, manifest length `u64`, JSON manifest,
    /// then one feature blob per block in manifest order. Parameters are
    /// stored as `f32`, so [`Checkpoint::rounded`] gives the values a reload
    /// will see.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for b in &self.manifest.blocks {
            let m = self.params.get(&b.name).expect("manifest built from params");
            out.extend_from_slice(&encode_blob(m));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: CheckpointManifest = serde_json::from_slice(body)?;
        let mut params = ParamStore::new();
        let mut at = 16 + len;
        for b in &manifest.blocks {
            let size = 16 + 4 * b.rows * b.cols;
            let chunk = bytes
                .get(at..at + size)
                .ok_or_else(|| bad(&format!("truncated block {}", b.name)))?;
            let m = decode_blob(chunk).map_err(|e| bad(&format!("block {}: {e}", b.name)))?;
            if m.shape() != (b.rows, b.cols) {
                return Err(bad(&format!("block {} has the wrong shape", b.name)));
            }
            params.insert(b.name.clone(), m);
            at += size;
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        manifest.model.validate()?;
        Ok(Self { manifest, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The checkpoint as it reads back from disk.
    pub fn rounded(&self) -> Self {
        let mut c = self.clone();
        for (_, m) in c.params.iter_mut() {
            for v in m.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
        c
    }
}

/// Writes via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Model inputs for every video of a corpus, in corpus order.
pub fn corpus_inputs(corpus: &Corpus) -> Result<Vec<VideoInput>> {
    corpus
        .dataset
        .videos
        .iter()
        .enumerate()
        .map(|(i, v)| VideoInput::new(v, &corpus.dynamic[i], &corpus.static_[i], &corpus.embeddings))
        .collect()
}

/// Per-stream fine score maps for one video with frozen parameters.
pub fn infer_scores(params: &ParamStore, cfg: &ModelConfig, input: &VideoInput) -> Result<(ScoreMap, ScoreMap)> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let fwd = model::forward(&mut tape, &p, cfg, input, Branch::Fine, &Objectives::none())?;
    Ok(fwd.score_maps(&tape))
}

/// Fused per-query score map `r·S_dyn + (1 − r)·S_sta`.
pub fn infer(params: &ParamStore, cfg: &ModelConfig, input: &VideoInput, dynamic_ratio: f64) -> Result<ScoreMap> {
    let (d, s) = infer_scores(params, cfg, input)?;
    ScoreMap::blend(&d, dynamic_ratio, &s, 1.0 - dynamic_ratio)
}

/// Ranked time-domain proposals for every query of the corpus.
pub fn predict(
    params: &ParamStore,
    cfg: &ModelConfig,
    corpus: &Corpus,
    inputs: &[VideoInput],
    dynamic_ratio: f64,
    top_h: usize,
    nms_iou: f64,
) -> Result<Vec<QueryPrediction>> {
    let mut out = Vec::with_capacity(corpus.dataset.num_queries());
    for (video, input) in corpus.dataset.videos.iter().zip(inputs) {
        let map = infer(params, cfg, input, dynamic_ratio)?;
        for (qi, q) in video.queries.iter().enumerate() {
            let ranked = rank_proposals(&map, qi, top_h, nms_iou)?;
            let proposals = ranked
                .into_iter()
                .map(|(span, score)| {
                    let m = span.to_moment(video.duration, video.num_clips);
                    ScoredMoment {
                        start: m.start,
                        end: m.end,
                        score,
                    }
                })
                .collect();
            out.push(QueryPrediction {
                query_id: q.query_id.clone(),
                proposals,
            });
        }
    }
    Ok(out)
}

/// Loss terms and parameter gradients of one training forward.
pub fn training_step(
    params: &ParamStore,
    cfg: &ModelConfig,
    input: &VideoInput,
    branch: Branch,
    obj: &Objectives,
) -> Result<(LossTerms<f64>, BTreeMap<String, Mat>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let fwd = model::forward(&mut tape, &p, cfg, input, branch, obj)?;
    let total = total_loss(&mut tape, &fwd.terms, &obj.weights);
    let terms = fwd.terms.values(&tape);
    let mut grads = tape.backward(total);
    Ok((terms, p.gradients(&mut grads, params)))
}

/// Files a training run writes under its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainArtifacts {
    pub loss_log: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

impl TrainArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            loss_log: dir.join("losses.csv"),
            last_checkpoint: dir.join("last.ckpt"),
            best_checkpoint: dir.join("best.ckpt"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    pub params: ParamStore,
    /// Mean loss terms per epoch.
    pub log: Vec<LossTerms<f64>>,
    /// `(epoch, report)` for every evaluated epoch.
    pub evaluations: Vec<(usize, MetricReport)>,
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn loss_csv(&self, w: &LossWeights) -> String {
        let mut s = format!("{LOSS_CSV_HEADER}\n");
        for (e, t) in self.log.iter().enumerate() {
            s.push_str(&loss_csv_row(e, t, w));
            s.push('\n');
        }
        s
    }

    pub fn final_report(&self) -> Option<&MetricReport> {
        self.evaluations.last().map(|(_, r)| r)
    }
}

fn divergence_detail(terms: &LossTerms<f64>, w: &LossWeights) -> String {
    format!("{LOSS_CSV_HEADER}\n{}", loss_csv_row(0, terms, w))
}

/// Trains on `corpus`. When `out_dir` is given, the loss log is appended each
/// epoch, `last.ckpt` is rewritten each epoch and `best.ckpt` whenever the
/// training-set mIoU improves.
pub fn train(corpus: &Corpus, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.dataset.is_empty() || corpus.dataset.num_queries() == 0 {
        return Err(Error::Input("training corpus has no queries".into()));
    }
    let (rd, rs, re) = corpus.raw_dims();
    let mcfg = cfg.model_config(rd, rs, re);
    mcfg.validate()?;
    let inputs = corpus_inputs(corpus)?;
    let obj = cfg.objectives();
    let weights = obj.weights;
    let schedule = cfg.schedule();

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model::init_params(&mcfg, &mut init_rng);
    let mut opt = AdamW::new(cfg);

    let artifacts = out_dir.map(TrainArtifacts::in_dir);
    let mut log_file = match &artifacts {
        Some(a) => {
            let mut f = fs::File::create(&a.loss_log).map_err(|e| Error::io(&a.loss_log, e))?;
            writeln!(f, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&a.loss_log, e))?;
            Some(f)
        }
        None => None,
    };

    let mut outcome = TrainOutcome {
        model: mcfg.clone(),
        params: ParamStore::new(),
        log: Vec::with_capacity(cfg.epochs),
        evaluations: Vec::new(),
        best_epoch: None,
    };
    let mut best_miou = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..inputs.len()).collect();

    for epoch in 0..cfg.epochs {
        let branch = schedule.branch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 + 1));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut epoch_terms = Vec::with_capacity(inputs.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<BTreeMap<String, Mat>> = None;
            for &vi in batch {
                let (terms, grads) = training_step(&params, &mcfg, &inputs[vi], branch, &obj)?;
                let total = terms.total(&weights);
                if !total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!(
                            "video {}\n{}",
                            corpus.dataset.videos[vi].video_id,
                            divergence_detail(&terms, &weights)
                        ),
                    });
                }
                epoch_terms.push(terms);
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (k, g) in grads {
                            a.get_mut(&k).expect("same blocks").add_assign(&g);
                        }
                    }
                }
            }
            let mut grads = acc.expect("batch is non-empty");
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                g.scale_assign(scale);
            }
            opt.step(&mut params, &grads);
            if !params.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "parameters became non-finite".into(),
                });
            }
        }

        let mean = LossTerms::mean(&epoch_terms, branch);
        info!("epoch {epoch} [{branch}] total {:.6}", mean.total(&weights));
        if let (Some(f), Some(a)) = (log_file.as_mut(), artifacts.as_ref()) {
            writeln!(f, "{}", loss_csv_row(epoch, &mean, &weights)).map_err(|e| Error::io(&a.loss_log, e))?;
        }
        outcome.log.push(mean);

        let last = epoch + 1 == cfg.epochs;
        let ckpt = Checkpoint::new(epoch, mcfg.clone(), cfg.clone(), params.clone());
        if let Some(a) = &artifacts {
            ckpt.save(&a.last_checkpoint)?;
        }
        if last || (epoch + 1) % cfg.eval_every.max(1) == 0 {
            let preds = predict(&params, &mcfg, corpus, &inputs, weights.dynamic_ratio(), cfg.top_h, cfg.nms_iou)?;
            let report = compute_metrics(&preds, &corpus.dataset)?;
            info!("epoch {epoch} mIoU {:.2}", report.miou);
            if report.miou > best_miou {
                best_miou = report.miou;
                outcome.best_epoch = Some(epoch);
                if let Some(a) = &artifacts {
                    ckpt.save(&a.best_checkpoint)?;
                }
            }
            outcome.evaluations.push((epoch, report));
        }
    }
    if outcome.best_epoch.is_none() {
        warn!("no evaluation ran; best checkpoint not written");
    }
    outcome.params = params;
    Ok(outcome)
}
