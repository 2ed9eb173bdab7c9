//! Trains on a generated corpus with the alternating coarse/fine schedule
//! and prints the per-epoch loss breakdown and final metrics.
//!
//! cargo run --release --example peht_training -- [epochs] [seed]

use sdgan::synth::{generate, SynthConfig};
use sdgan::trainer::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(60);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);

    let synth = generate(&SynthConfig { seed, ..SynthConfig::default() }, 20, 3)?;
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::preset("synthetic")?
    };
    let start = std::time::Instant::now();
    let out = train(&synth.corpus, &cfg, None)?;
    print!("{}", out.loss_csv(&cfg.loss_weights()));
    for (epoch, r) in &out.evaluations {
        println!("epoch {epoch:>3}  R@1,IoU@0.7 {:>6.2}  mIoU {:>6.2}", r.recall[0][2], r.miou);
    }
    if let Some(r) = out.final_report() {
        print!("{}", r.to_table());
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
