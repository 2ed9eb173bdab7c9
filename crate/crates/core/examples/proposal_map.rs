//! Trains briefly, then prints one query's fine score map next to its
//! ground truth and the top proposals after non-maximum suppression.
//!
//! cargo run --release --example proposal_map -- [epochs] [nms_iou]

use sdgan::proposals::{rank_proposals, ScoreMap};
use sdgan::synth::{generate, SynthConfig};
use sdgan::trainer::{corpus_inputs, infer_scores, train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    let nms: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.5);

    let synth = generate(&SynthConfig::default(), 20, 3)?;
    let cfg = TrainConfig {
        epochs,
        eval_every: epochs,
        ..TrainConfig::default()
    };
    let out = train(&synth.corpus, &cfg, None)?;
    let input = &corpus_inputs(&synth.corpus)?[0];
    let (dyn_map, sta_map) = infer_scores(&out.params, &out.model, input)?;
    let r = cfg.loss_weights().dynamic_ratio();
    let fused = ScoreMap::blend(&dyn_map, r, &sta_map, 1.0 - r)?;

    let query = 0;
    let gt = input.gt_spans[query];
    println!("query {query}: ground truth clips {}-{} (marked *)", gt.start, gt.end);
    let dense = fused.dense(query);
    for i in 0..dense.rows() {
        let cells: Vec<String> = (0..dense.cols())
            .map(|j| {
                if j < i {
                    "     ".into()
                } else {
                    let mark = if (i + 1, j + 1) == (gt.start, gt.end) { '*' } else { ' ' };
                    format!("{:+.1}{mark}", dense.get(i, j))
                }
            })
            .collect();
        println!("  {}", cells.join(""));
    }

    for (label, iou) in [("no suppression", 1.0), ("with NMS", nms)] {
        println!("top 5, {label}:");
        for (span, score) in rank_proposals(&fused, query, 5, iou)? {
            println!("  clips {:>2}-{:<2} score {score:+.4}", span.start, span.end);
        }
    }
    Ok(())
}
