//! Generates a synthetic corpus, writes it in the on-disk layout, reloads it
//! and reports how recoverable the planted signal is.
//!
//! cargo run --release --example generate_corpus -- [out_dir] [signal]

use sdgan::data::Corpus;
use sdgan::synth::{generate, SynthConfig};
use sdgan::tensor::Mat;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b)).max(1e-12)
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "target/example_corpus".into());
    let signal = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5.0);

    let cfg = SynthConfig {
        signal_strength: signal,
        ..SynthConfig::default()
    };
    let synth = generate(&cfg, 8, 3)?;
    synth.corpus.write(&out)?;
    let back = Corpus::load(&out)?;
    assert_eq!(back.dataset.num_queries(), synth.corpus.dataset.num_queries());

    let (rd, rs, re) = back.raw_dims();
    println!("{} videos, {} queries -> {out}", back.dataset.videos.len(), back.dataset.num_queries());
    println!("raw dims: dynamic {rd}, static {rs}, token embedding {re}");

    // mean |cos| to the planted pattern, inside vs outside the moment
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (v, video) in back.dataset.videos.iter().enumerate() {
        let feats = &back.dynamic[v];
        for (q, span) in synth.spans[v].iter().enumerate() {
            let pattern = &synth.patterns[v][q];
            let projected = Mat::from_vec(1, pattern.len(), pattern.clone()).matmul_nt(&synth.dynamic_projection);
            for clip in 0..video.num_clips {
                let c = cos(feats.row(clip), projected.row(0)).abs();
                if span.contains(clip + 1) {
                    inside.push(c)
                } else {
                    outside.push(c)
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("signal {signal}: |cos| inside {:.3}, outside {:.3}", mean(&inside), mean(&outside));

    let v0 = &back.dataset.videos[0];
    for q in &v0.queries {
        println!(
            "{} {:>6.2}-{:>6.2}s  clips {}-{}  tokens {:?}",
            q.query_id,
            q.moment.start,
            q.moment.end,
            v0.clip_span(q)?.start,
            v0.clip_span(q)?.end,
            q.tokens
        );
    }
    Ok(())
}
