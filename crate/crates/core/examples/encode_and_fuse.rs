//! Runs the three encoders and the cross-modal fusion block on one
//! generated video, for both residual layouts of the fusion block.
//!
//! cargo run --release --example encode_and_fuse

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdgan::encoders;
use sdgan::fusion::{self, FusionConfig};
use sdgan::model;
use sdgan::synth::{generate, SynthConfig};
use sdgan::tape::Tape;
use sdgan::tensor::Mat;
use sdgan::trainer::{corpus_inputs, TrainConfig};

fn row_stats(m: &Mat) -> (f64, f64) {
    // mean over rows of each row's (mean, std)
    let (r, c) = m.shape();
    let (mut mu, mut sd) = (0.0, 0.0);
    for i in 0..r {
        let row = m.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
        mu += mean;
        sd += var.sqrt();
    }
    (mu / r as f64, sd / r as f64)
}

fn main() -> anyhow::Result<()> {
    let synth = generate(&SynthConfig::default(), 1, 3)?;
    let input = &corpus_inputs(&synth.corpus)?[0];
    let (rd, rs, re) = synth.corpus.raw_dims();

    for literal in [true, false] {
        let cfg = TrainConfig {
            literal_eq2: literal,
            ..TrainConfig::default()
        }
        .model_config(rd, rs, re);
        let params = model::init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3));

        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let raw_dyn = tape.constant(input.dynamic.clone());
        let raw_sta = tape.constant(input.static_.clone());
        let pooled = tape.constant(input.queries.clone());
        let d = encoders::encode_dynamic(&mut tape, &p, raw_dyn)?;
        let s = encoders::encode_static(&mut tape, &p, raw_sta, cfg.ema_decay)?;
        let q = encoders::encode_queries(&mut tape, &p, pooled)?;
        println!(
            "encoded: dynamic {:?}  static {:?}  queries {:?}",
            tape.value(d).shape(),
            tape.value(s).shape(),
            tape.value(q).shape()
        );

        let f = fusion::fuse(&mut tape, &p, d, s, q, FusionConfig { literal_eq2: literal })?;
        let layout = if literal { "literal" } else { "pre-norm" };
        for (name, v) in [("dynamic", f.dynamic), ("static", f.static_), ("queries", f.queries)] {
            let (mu, sd) = row_stats(tape.value(v));
            println!("{layout:>8} fused {name:<8} row mean {mu:+.4}  row std {sd:.4}");
        }
    }
    Ok(())
}
