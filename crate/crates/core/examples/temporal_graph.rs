//! Builds the sparse forward-in-time clip graph over one video's features
//! and propagates messages through it.
//!
//! cargo run --release --example temporal_graph -- [k_edges] [sigma]

use sdgan::dsgn::{build_graph, graph_forward, GraphConfig};
use sdgan::synth::{generate, SynthConfig};
use sdgan::tape::Tape;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let k = args.next().map(|s| s.parse()).transpose()?.unwrap_or(12);
    let sigma = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2.0);

    let synth = generate(
        &SynthConfig {
            num_clips: 12,
            ..SynthConfig::default()
        },
        1,
        2,
    )?;
    let feats = &synth.corpus.dynamic[0];
    for span in &synth.spans[0] {
        println!("planted moment: nodes {}-{}", span.start - 1, span.end - 1);
    }

    let graph = build_graph(feats, k, sigma)?;
    println!("{} nodes, {} edges kept", graph.num_nodes, graph.edges.len());
    for e in &graph.edges {
        println!("  {:>2} -> {:>2}  cos {:+.3}  weight {:.3}", e.src, e.dst, e.cosine, e.weight);
    }

    let a = graph.propagation_matrix();
    println!("propagation matrix (row = receiver):");
    for i in 0..a.rows() {
        let row: Vec<String> = a.row(i).iter().map(|w| if *w == 0.0 { "  .  ".into() } else { format!("{w:.2} ") }).collect();
        println!("  {}", row.join(""));
    }

    let mut tape = Tape::new();
    let x = tape.constant(feats.clone());
    let cfg = GraphConfig {
        k_edges: k,
        layers: 2,
        sigma,
        adaptive: true,
    };
    let (out, graphs) = graph_forward(&mut tape, x, &cfg)?;
    let pairs = |i: usize| graphs[i].edges.iter().map(|e| (e.src, e.dst)).collect::<Vec<_>>();
    println!(
        "2 adaptive layers -> {:?}, second layer rewired: {}",
        tape.value(out).shape(),
        pairs(0) != pairs(1)
    );
    Ok(())
}
