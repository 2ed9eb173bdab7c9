//! Synthetic clip features with a planted, recoverable query signal.
//!
//! Each query is a bag of token ids. Its pattern is the normalised mean of
//! the token embeddings. Clips inside the query's ground-truth span receive
//! `signal_strength * P_m · pattern` on top of Gaussian noise, where `P_dyn`
//! and `P_sta` are two fixed random projections. The static stream is only
//! refreshed every few clips and holds its last sample in between.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClipSpan, Corpus, GroundingDataset, QueryRecord, VideoRecord};
use crate::error::{Error, Result};
use crate::tensor::{norm, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_clips: usize,
    pub raw_dim: usize,
    pub vocab: usize,
    pub signal_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// The static stream takes a fresh sample every `static_refresh` clips.
    pub static_refresh: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Number of distinct query texts shared by all videos; 0 draws fresh
    /// tokens for every query.
    pub query_pool: usize,
    /// Clip length in seconds is drawn per video from this range.
    pub clip_seconds: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_clips: 16,
            raw_dim: 32,
            vocab: 200,
            signal_strength: 5.0,
            noise_std: 0.1,
            seed: 7,
            static_refresh: 4,
            min_tokens: 2,
            max_tokens: 5,
            query_pool: 0,
            clip_seconds: (1.0, 3.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_clips < 2 {
            return bad("num_clips must be at least 2");
        }
        if self.raw_dim == 0 || self.vocab == 0 {
            return bad("raw_dim and vocab must be positive");
        }
        if !(self.signal_strength >= 0.0) || !(self.noise_std >= 0.0) {
            return bad("signal_strength and noise_std must be non-negative");
        }
        if self.static_refresh == 0 {
            return bad("static_refresh must be positive");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token count range is empty");
        }
        let (lo, hi) = self.clip_seconds;
        if !(lo > 0.0 && hi >= lo) {
            return bad("clip_seconds range must be positive");
        }
        Ok(())
    }
}

/// Generator output: the corpus plus the hidden quantities a test can use
/// to check recoverability.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub dynamic_projection: Mat,
    pub static_projection: Mat,
    /// Ground-truth spans, aligned with `corpus.dataset.videos[v].queries`.
    pub spans: Vec<Vec<ClipSpan>>,
    /// Unit-norm query patterns, aligned like `spans`.
    pub patterns: Vec<Vec<Vec<f64>>>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_tokens<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<u32> {
    let n = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
    (0..n).map(|_| rng.gen_range(0..cfg.vocab) as u32).collect()
}

/// Generates `num_videos` videos with `queries_per_video` distinct
/// ground-truth spans each. Deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig, num_videos: usize, queries_per_video: usize) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    if num_videos == 0 {
        return Err(Error::Config("num_videos must be at least 1".into()));
    }
    let t = cfg.num_clips;
    let cells = t * (t + 1) / 2;
    if queries_per_video > cells {
        return Err(Error::Config(format!(
            "{queries_per_video} queries per video exceed the {cells} distinct spans of {t} clips"
        )));
    }
    if cfg.query_pool > 0 && queries_per_video > cfg.query_pool {
        return Err(Error::Config(format!(
            "{queries_per_video} queries per video need distinct texts but the pool holds {}",
            cfg.query_pool
        )));
    }
    let d = cfg.raw_dim;

    let mut global = rng_for(cfg.seed, 0);
    let embeddings = Mat::randn(cfg.vocab, d, 1.0 / (d as f64).sqrt(), &mut global);
    let proj_std = 1.0 / (d as f64).sqrt();
    let dynamic_projection = Mat::randn(d, d, proj_std, &mut global);
    let static_projection = Mat::randn(d, d, proj_std, &mut global);
    let pool: Vec<Vec<u32>> = (0..cfg.query_pool)
        .map(|_| draw_tokens(cfg, &mut global))
        .collect();

    let all_spans: Vec<ClipSpan> = (1..=t)
        .flat_map(|s| (s..=t).map(move |e| ClipSpan { start: s, end: e }))
        .collect();

    let mut videos = Vec::with_capacity(num_videos);
    let mut dynamic = Vec::with_capacity(num_videos);
    let mut static_ = Vec::with_capacity(num_videos);
    let mut spans = Vec::with_capacity(num_videos);
    let mut patterns = Vec::with_capacity(num_videos);

    for v in 0..num_videos {
        let mut rng = rng_for(cfg.seed, v as u64 + 1);
        let clip_len = rng.gen_range(cfg.clip_seconds.0..=cfg.clip_seconds.1);
        let duration = clip_len * t as f64;
        let chosen: Vec<ClipSpan> = all_spans
            .choose_multiple(&mut rng, queries_per_video)
            .copied()
            .collect();

        let texts: Vec<usize> = if pool.is_empty() {
            Vec::new()
        } else {
            rand::seq::index::sample(&mut rng, pool.len(), queries_per_video).into_vec()
        };
        let mut queries = Vec::with_capacity(queries_per_video);
        let mut video_patterns = Vec::with_capacity(queries_per_video);
        for (qi, span) in chosen.iter().enumerate() {
            let tokens = if pool.is_empty() {
                draw_tokens(cfg, &mut rng)
            } else {
                pool[texts[qi]].clone()
            };
            let mut pattern = vec![0.0; d];
            for &tok in &tokens {
                for (p, e) in pattern.iter_mut().zip(embeddings.row(tok as usize)) {
                    *p += e;
                }
            }
            let n = norm(&pattern);
            if n > 0.0 {
                pattern.iter_mut().for_each(|p| *p /= n);
            }
            queries.push(QueryRecord {
                query_id: format!("v{v:04}_q{qi}"),
                tokens,
                moment: span.to_moment(duration, t),
            });
            video_patterns.push(pattern);
        }

        let mut dyn_feat = Mat::randn(t, d, cfg.noise_std, &mut rng);
        let mut sta_sample = Mat::randn(t, d, cfg.noise_std, &mut rng);
        for (span, pattern) in chosen.iter().zip(&video_patterns) {
            let pat = Mat::from_vec(1, d, pattern.clone());
            let dyn_sig = pat.matmul_nt(&dynamic_projection);
            let sta_sig = pat.matmul_nt(&static_projection);
            for clip in span.start..=span.end {
                let r = clip - 1;
                for (x, s) in dyn_feat.row_mut(r).iter_mut().zip(dyn_sig.row(0)) {
                    *x += cfg.signal_strength * s;
                }
                for (x, s) in sta_sample.row_mut(r).iter_mut().zip(sta_sig.row(0)) {
                    *x += cfg.signal_strength * s;
                }
            }
        }
        let refresh = cfg.static_refresh;
        let sta_feat = Mat::from_fn(t, d, |r, c| sta_sample.get(refresh * (r / refresh), c));

        videos.push(VideoRecord {
            video_id: format!("v{v:04}"),
            duration,
            num_clips: t,
            queries,
        });
        dynamic.push(dyn_feat);
        static_.push(sta_feat);
        spans.push(chosen);
        patterns.push(video_patterns);
    }

    Ok(SyntheticCorpus {
        corpus: Corpus {
            dataset: GroundingDataset { videos },
            dynamic,
            static_,
            embeddings,
        },
        dynamic_projection,
        static_projection,
        spans,
        patterns,
    })
}
