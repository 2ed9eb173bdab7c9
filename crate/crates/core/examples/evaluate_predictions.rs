//! Scores a hand-written prediction file against a tiny annotation set and
//! prints the recall table.
//!
//! cargo run --release --example evaluate_predictions

use sdgan::data::{GroundingDataset, Moment, QueryRecord, VideoRecord};
use sdgan::eval::compute_metrics;
use sdgan::proposals::{read_predictions, write_predictions, QueryPrediction, ScoredMoment};

fn query(id: &str, start: f64, end: f64) -> QueryRecord {
    QueryRecord {
        query_id: id.into(),
        tokens: vec![1, 2, 3],
        moment: Moment { start, end },
    }
}

fn pred(id: &str, ranked: &[(f64, f64)]) -> QueryPrediction {
    QueryPrediction {
        query_id: id.into(),
        proposals: ranked
            .iter()
            .enumerate()
            .map(|(i, &(start, end))| ScoredMoment {
                start,
                end,
                score: 1.0 - 0.1 * i as f64,
            })
            .collect(),
    }
}

fn main() -> anyhow::Result<()> {
    let dataset = GroundingDataset {
        videos: vec![VideoRecord {
            video_id: "v0".into(),
            duration: 60.0,
            num_clips: 16,
            queries: vec![query("a", 10.0, 20.0), query("b", 30.0, 50.0), query("c", 0.0, 5.0)],
        }],
    };
    for v in &dataset.videos {
        v.validate()?;
    }

    let preds = vec![
        // exact hit at rank 1
        pred("a", &[(10.0, 20.0), (0.0, 60.0)]),
        // IoU 0.6 at rank 1, exact hit at rank 2
        pred("b", &[(30.0, 42.0), (30.0, 50.0)]),
        // only a loose hit at rank 3
        pred("c", &[(40.0, 50.0), (20.0, 30.0), (0.0, 8.0)]),
    ];
    let path = std::env::temp_dir().join("sdgan_example_preds.jsonl");
    write_predictions(&path, &preds)?;
    let back = read_predictions(&path)?;

    let report = compute_metrics(&back, &dataset)?;
    print!("{}", report.to_table());
    for (name, value) in report.entries() {
        println!("{name:<16} {value:6.2}");
    }
    Ok(())
}
