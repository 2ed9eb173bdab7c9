//! Prints every term of the composite objective for both branches of one
//! video, before and after a short training run.
//!
//! cargo run --release --example loss_breakdown

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdgan::data::Branch;
use sdgan::losses::LossTerms;
use sdgan::model::{self, ModelConfig};
use sdgan::params::ParamStore;
use sdgan::synth::{generate, SynthConfig};
use sdgan::tape::Tape;
use sdgan::trainer::{corpus_inputs, train, TrainConfig};

fn show(label: &str, params: &ParamStore, mcfg: &ModelConfig, cfg: &TrainConfig, input: &model::VideoInput) -> anyhow::Result<()> {
    let w = cfg.loss_weights();
    for branch in [Branch::Coarse, Branch::Fine] {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let fwd = model::forward(&mut tape, &p, mcfg, input, branch, &cfg.objectives())?;
        let t: LossTerms<f64> = fwd.terms.values(&tape);
        let f = |v: Option<f64>| v.map_or("     -".to_string(), |v| format!("{v:6.3}"));
        println!(
            "{label:<8} {:<6} qccl {} pna_c {} pna_f {} iou_d {} iou_s {} con_d {} con_s {} | total {:.3}",
            branch.as_str(),
            f(t.qccl),
            f(t.pna_coarse),
            f(t.pna_fine),
            f(t.iou_dyn),
            f(t.iou_sta),
            f(t.contra_dyn),
            f(t.contra_sta),
            t.total(&w)
        );
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let synth = generate(&SynthConfig::default(), 20, 3)?;
    let input = &corpus_inputs(&synth.corpus)?[0];
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let (rd, rs, re) = synth.corpus.raw_dims();
    let mcfg = cfg.model_config(rd, rs, re);
    let w = cfg.loss_weights();
    println!(
        "weights: qccl {} pna_c {} pna_f {} dynamic {} static {}",
        w.lambda_q, w.lambda_c, w.lambda_f, w.lambda_d, w.lambda_s
    );

    let init = model::init_params(&mcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    show("init", &init, &mcfg, &cfg, input)?;
    let out = train(&synth.corpus, &cfg, None)?;
    show("trained", &out.params, &out.model, &cfg, input)?;
    Ok(())
}
