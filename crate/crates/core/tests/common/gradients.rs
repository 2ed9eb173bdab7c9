//! Finite-difference checks of every differentiable stage.

use rand::Rng;
use sdgan::data::{Branch, ClipSpan};
use sdgan::dsgn::{graph_forward, graph_forward_frozen, qccl_loss, GraphConfig};
use sdgan::encoders::{self, EncoderDims};
use sdgan::error::Result as SdResult;
use sdgan::fusion::{self, FusionConfig};
use sdgan::losses::{contra_loss, iou_loss, pna_loss, soft_bce, total_loss, LossWeights};
use sdgan::model::{self, ModelConfig, Objectives, VideoInput};
use sdgan::params::{Bound, ParamStore};
use sdgan::proposals::{self, aggregate_coarse, build_map, score_map, ProposalGrid};
use sdgan::tape::{Tape, Var};
use sdgan::tensor::Mat;

use super::{for_seeds, gradcheck, probe, randn, rng, FD_STEP, GRAD_TOL};

pub const INSTANCES: u64 = 20;

/// `Σ probe ⊙ out`, a generic scalar readout.
fn readout(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let w = tape.constant(probe(tape.value(out).shape(), seed));
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

/// Replaces every block with fresh Gaussian values so biases and norms
/// are exercised away from their initial constants.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed ^ 0x51ed);
    for (_, m) in store.iter_mut() {
        *m = Mat::randn(m.rows(), m.cols(), 0.5, &mut r);
    }
}

fn check_errors(errs: &[(String, f64)]) -> Result<(), String> {
    match errs.iter().find(|(_, e)| !(*e <= GRAD_TOL)) {
        Some((name, e)) => Err(format!("{name}: relative error {e:e}")),
        None => Ok(()),
    }
}

fn rel_err(a: &Mat, n: &Mat) -> f64 {
    let diff = a.zip_map(n, |x, y| (x - y) * (x - y)).sum().sqrt();
    let na = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Gradient check over a parameter store plus free input blocks.
pub fn store_gradcheck<F>(store: &ParamStore, inputs: &[Mat], f: F) -> Result<(), String>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> SdResult<Var>,
{
    let run = |s: &ParamStore, ins: &[Mat]| -> Result<f64, String> {
        let mut t = Tape::new();
        let p = s.bind_frozen(&mut t);
        let vs: Vec<Var> = ins.iter().map(|m| t.constant(m.clone())).collect();
        let o = f(&mut t, &p, &vs).map_err(|e| e.to_string())?;
        Ok(t.scalar(o))
    };

    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &p, &vars).map_err(|e| e.to_string())?;
    let mut grads = tape.backward(out);
    let input_grads: Vec<Mat> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, m)| grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(m.rows(), m.cols())))
        .collect();
    let param_grads = p.gradients(&mut grads, store);

    let mut errs = Vec::new();
    let mut work = store.clone();
    for (name, analytic) in &param_grads {
        let base = store.get(name).expect("bound block").clone();
        let mut numeric = Mat::zeros(base.rows(), base.cols());
        for k in 0..base.len() {
            let orig = base.as_slice()[k];
            work.get_mut(name).unwrap().as_mut_slice()[k] = orig + FD_STEP;
            let up = run(&work, inputs)?;
            work.get_mut(name).unwrap().as_mut_slice()[k] = orig - FD_STEP;
            let down = run(&work, inputs)?;
            work.get_mut(name).unwrap().as_mut_slice()[k] = orig;
            numeric.as_mut_slice()[k] = (up - down) / (2.0 * FD_STEP);
        }
        errs.push((name.clone(), rel_err(analytic, &numeric)));
    }
    let mut ins: Vec<Mat> = inputs.to_vec();
    for (bi, analytic) in input_grads.iter().enumerate() {
        let mut numeric = Mat::zeros(analytic.rows(), analytic.cols());
        for k in 0..numeric.len() {
            let orig = inputs[bi].as_slice()[k];
            ins[bi].as_mut_slice()[k] = orig + FD_STEP;
            let up = run(store, &ins)?;
            ins[bi].as_mut_slice()[k] = orig - FD_STEP;
            let down = run(store, &ins)?;
            ins[bi].as_mut_slice()[k] = orig;
            numeric.as_mut_slice()[k] = (up - down) / (2.0 * FD_STEP);
        }
        errs.push((format!("input {bi}"), rel_err(analytic, &numeric)));
    }
    check_errors(&errs)
}

fn blocks_check(blocks: &[Mat], f: impl Fn(&mut Tape, &[Var]) -> Var) -> Result<(), String> {
    let errs: Vec<(String, f64)> = gradcheck(blocks, f)
        .into_iter()
        .enumerate()
        .map(|(i, e)| (format!("block {i}"), e))
        .collect();
    check_errors(&errs)
}

fn encoder_store(seed: u64, raw_d: usize, raw_s: usize, embed: usize, hidden: usize) -> ParamStore {
    let mut store = ParamStore::new();
    encoders::init_params(
        &mut store,
        EncoderDims {
            raw_dynamic: raw_d,
            raw_static: raw_s,
            embed,
            hidden,
        },
        &mut rng(seed),
    );
    jitter(&mut store, seed);
    store
}

pub fn dynamic_encoder() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 100);
        let (t, raw, h) = (r.gen_range(3..=6), r.gen_range(1..=3), r.gen_range(1..=3));
        let store = encoder_store(seed, raw, 1, 1, h);
        store_gradcheck(&store, &[randn(t, raw, &mut r)], |tape, p, v| {
            let o = encoders::encode_dynamic(tape, p, v[0])?;
            Ok(readout(tape, o, seed))
        })
    })
}

pub fn static_encoder() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 200);
        let (t, raw, h) = (r.gen_range(3..=6), r.gen_range(1..=3), r.gen_range(1..=3));
        let decay = r.gen_range(0.0..0.95);
        let store = encoder_store(seed, 1, raw, 1, h);
        store_gradcheck(&store, &[randn(t, raw, &mut r)], |tape, p, v| {
            let o = encoders::encode_static(tape, p, v[0], decay)?;
            Ok(readout(tape, o, seed))
        })
    })
}

pub fn text_encoder() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 300);
        let (n, e, h) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=3));
        let store = encoder_store(seed, 1, 1, e, h);
        store_gradcheck(&store, &[randn(n, e, &mut r)], |tape, p, v| {
            let o = encoders::encode_queries(tape, p, v[0])?;
            Ok(readout(tape, o, seed))
        })
    })
}

fn fusion_check(literal: bool, offset: u64) -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + offset);
        // width 2 collapses layer norm to a near-constant sign pattern
        let (t, n, d) = (r.gen_range(1..=3), r.gen_range(1..=2), r.gen_range(3..=4));
        let mut store = ParamStore::new();
        fusion::init_params(&mut store, d, &mut rng(seed));
        jitter(&mut store, seed);
        let inputs = [randn(t, d, &mut r), randn(t, d, &mut r), randn(n, d, &mut r)];
        store_gradcheck(&store, &inputs, |tape, p, v| {
            let f = fusion::fuse(tape, p, v[0], v[1], v[2], FusionConfig { literal_eq2: literal })?;
            let all = tape.concat_rows(&[f.dynamic, f.static_, f.queries]);
            Ok(readout(tape, all, seed))
        })
    })
}

pub fn fusion_literal() -> Result<(), String> {
    fusion_check(true, 400)
}

pub fn fusion_pre_norm() -> Result<(), String> {
    fusion_check(false, 500)
}

pub fn graph_propagation() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 600);
        let (t, d) = (r.gen_range(2..=7), r.gen_range(1..=3));
        let x = randn(t, d, &mut r);
        let cfg = GraphConfig {
            k_edges: r.gen_range(1..=t * (t - 1) / 2),
            layers: r.gen_range(1..=3),
            sigma: r.gen_range(0.5..3.0),
            adaptive: r.gen_bool(0.5),
        };
        let mut scratch = Tape::new();
        let xv = scratch.constant(x.clone());
        let (_, graphs) = graph_forward(&mut scratch, xv, &cfg).map_err(|e| e.to_string())?;
        blocks_check(&[x], |tape, v| {
            let o = graph_forward_frozen(tape, v[0], &graphs);
            readout(tape, o, seed)
        })
    })
}

pub fn coarse_aggregation() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 700);
        let n = r.gen_range(1..=3);
        let (t, d) = (n * r.gen_range(1..=3), r.gen_range(1..=3));
        blocks_check(&[randn(t, d, &mut r)], |tape, v| {
            let o = aggregate_coarse(tape, v[0], n).expect("window divides");
            readout(tape, o, seed)
        })
    })
}

pub fn proposal_scores() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 800);
        let (l, n, d) = (r.gen_range(1..=4), r.gen_range(1..=2), r.gen_range(1..=2));
        let mut store = ParamStore::new();
        proposals::init_params(&mut store, d, &mut rng(seed));
        jitter(&mut store, seed);
        let prefix = proposals::map_prefix("dyn", "fine");
        let store = {
            let mut only = ParamStore::new();
            for (k, m) in store.iter().filter(|(k, _)| k.starts_with(&prefix)) {
                only.insert(k.clone(), m.clone());
            }
            only
        };
        let grid = ProposalGrid::new(l);
        let inputs = [randn(l, d, &mut r), randn(n, d, &mut r)];
        store_gradcheck(&store, &inputs, |tape, p, v| {
            let map = build_map(tape, p, &prefix, v[0])?;
            let s = score_map(tape, map, v[1], &grid)?;
            Ok(readout(tape, s, seed))
        })
    })
}

pub fn qccl() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 900);
        let (n, t, d) = (r.gen_range(1..=3), r.gen_range(2..=6), r.gen_range(1..=3));
        let pos: Vec<Vec<bool>> = (0..n)
            .map(|_| {
                let s = r.gen_range(0..t);
                let e = r.gen_range(s..t);
                (0..t).map(|c| (s..=e).contains(&c)).collect()
            })
            .collect();
        let blocks = [randn(n, d, &mut r), randn(t, d, &mut r), randn(d, d, &mut r)];
        blocks_check(&blocks, |tape, v| qccl_loss(tape, v[0], v[1], v[2], &pos).unwrap())
    })
}

pub fn pna() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 1000);
        let (t, d) = (r.gen_range(2..=6), r.gen_range(1..=4));
        let tau = r.gen_range(0.1..2.0);
        let blocks = [randn(t, d, &mut r), randn(t, d, &mut r)];
        blocks_check(&blocks, |tape, v| pna_loss(tape, v[0], v[1], tau).unwrap())
    })
}

pub fn iou() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 1100);
        let (n, v) = (r.gen_range(1..=3), r.gen_range(1..=10));
        let s = Mat::from_fn(n, v, |_, _| r.gen_range(-0.95..0.95));
        let t = Mat::from_fn(n, v, |_, _| r.gen::<f64>());
        blocks_check(&[s], |tape, vs| iou_loss(tape, vs[0], &t).unwrap())
    })
}

pub fn bce() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 1200);
        let (n, v) = (r.gen_range(1..=3), r.gen_range(1..=10));
        let y = Mat::from_fn(n, v, |_, _| r.gen_range(0.02..0.98));
        let t = Mat::from_fn(n, v, |_, _| r.gen::<f64>());
        blocks_check(&[y], |tape, vs| soft_bce(tape, vs[0], &t).unwrap())
    })
}

pub fn contra() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let mut r = rng(seed + 1300);
        let (n, l) = (r.gen_range(1..=3), r.gen_range(1..=4));
        let v = l * (l + 1) / 2;
        let tau = r.gen_range(0.1..2.0);
        let cells: Vec<usize> = (0..n).map(|_| r.gen_range(0..v)).collect();
        let s = Mat::from_fn(n, v, |_, _| r.gen_range(-1.0..1.0));
        blocks_check(&[s], |tape, vs| contra_loss(tape, vs[0], &cells, tau).unwrap())
    })
}

pub fn tiny_model(seed: u64) -> (ModelConfig, ParamStore, VideoInput) {
    let mut r = rng(seed + 1400);
    let cfg = ModelConfig {
        raw_dynamic: 2,
        raw_static: 2,
        embed: 2,
        hidden: 3,
        fine_clips: 4,
        window: 2,
        k_edges: 3,
        graph_layers: 1,
        rbf_sigma: 1.0,
        adaptive_graph: true,
        ema_decay: 0.5,
        literal_eq2: seed % 2 == 0,
    };
    let mut params = model::init_params(&cfg, &mut r);
    jitter(&mut params, seed);
    let spans = vec![ClipSpan::new(1, 2).unwrap(), ClipSpan::new(3, 4).unwrap()];
    let input = VideoInput {
        dynamic: randn(4, 2, &mut r),
        static_: randn(4, 2, &mut r),
        queries: randn(2, 2, &mut r),
        gt_spans: spans.clone(),
        positive_spans: spans,
    };
    (cfg, params, input)
}

/// Whole-model objective against its parameters.
pub fn full_objective() -> Result<(), String> {
    for_seeds(INSTANCES, |seed| {
        let (cfg, params, input) = tiny_model(seed);
        let branch = if seed % 2 == 0 { Branch::Coarse } else { Branch::Fine };
        let obj = Objectives {
            supervise: true,
            qccl: true,
            pna: true,
            weights: LossWeights {
                lambda_f: 0.5,
                ..LossWeights::default()
            },
            iou_rescale: None,
        };
        store_gradcheck(&params, &[], |tape, p, _| {
            let fwd = model::forward(tape, p, &cfg, &input, branch, &obj)?;
            Ok(total_loss(tape, &fwd.terms, &obj.weights))
        })
    })
}

/// Every criterion-2 check, by name.
pub fn all() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("dynamic encoder", dynamic_encoder),
        ("static encoder", static_encoder),
        ("text encoder", text_encoder),
        ("fusion (residual-around-norm)", fusion_literal),
        ("fusion (pre-norm)", fusion_pre_norm),
        ("graph propagation", graph_propagation),
        ("coarse aggregation", coarse_aggregation),
        ("proposal map + scores", proposal_scores),
        ("qccl loss", qccl),
        ("pna loss", pna),
        ("iou loss", iou),
        ("soft bce", bce),
        ("contrastive loss", contra),
        ("full objective", full_objective),
    ]
}
