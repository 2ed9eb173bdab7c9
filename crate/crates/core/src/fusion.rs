//! Multimodal fusion block over the row-concatenation `[dyn ‖ sta ‖ qry]`.
//!
//! Literal form (default):
//!   `F~ = F + LN1(F)`, `F^ = LN2(F~ + MLP(F~))`
//! Pre-norm variant (`literal_eq2 = false`):
//!   `F^ = LN2(F + MLP(LN1(F)))`
//!
//! Every operation is row-wise, so rows never exchange information here.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

pub const LN_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub literal_eq2: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { literal_eq2: true }
    }
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, rng: &mut R) {
    for ln in ["fusion.ln1", "fusion.ln2"] {
        store.insert(format!("{ln}.gamma"), Mat::filled(1, hidden, 1.0));
        store.insert(format!("{ln}.beta"), Mat::zeros(1, hidden));
    }
    let wide = MLP_RATIO * hidden;
    store.init_glorot("fusion.mlp.w1", hidden, wide, hidden, wide, rng);
    store.insert("fusion.mlp.b1", Mat::zeros(1, wide));
    store.init_glorot("fusion.mlp.w2", wide, hidden, wide, hidden, rng);
    store.insert("fusion.mlp.b2", Mat::zeros(1, hidden));
}

/// Layer norm with learned affine.
pub fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x, LN_EPS);
    let scaled = tape.mul_row(n, p.var(&format!("{prefix}.gamma"))?);
    Ok(tape.add_row(scaled, p.var(&format!("{prefix}.beta"))?))
}

fn mlp(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p.var("fusion.mlp.w1")?);
    let h = tape.add_row(h, p.var("fusion.mlp.b1")?);
    let h = tape.gelu(h);
    let o = tape.matmul(h, p.var("fusion.mlp.w2")?);
    Ok(tape.add_row(o, p.var("fusion.mlp.b2")?))
}

#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub dynamic: Var,
    pub static_: Var,
    pub queries: Var,
}

pub fn fuse(
    tape: &mut Tape,
    p: &Bound,
    dynamic: Var,
    static_: Var,
    queries: Var,
    cfg: FusionConfig,
) -> Result<Fused> {
    let (t, d) = tape.value(dynamic).shape();
    let (ts, ds) = tape.value(static_).shape();
    let (n, dq) = tape.value(queries).shape();
    if d == 0 {
        return Err(Error::Shape("fusion width D must be positive".into()));
    }
    if ds != d || dq != d || ts != t {
        return Err(Error::Shape(format!(
            "fusion inputs {t}x{d}, {ts}x{ds}, {n}x{dq} disagree"
        )));
    }
    let joined = tape.concat_rows(&[dynamic, static_, queries]);
    let fused = if cfg.literal_eq2 {
        let ln1 = layer_norm(tape, p, "fusion.ln1", joined)?;
        let tilde = tape.add(joined, ln1);
        let m = mlp(tape, p, tilde)?;
        let pre = tape.add(tilde, m);
        layer_norm(tape, p, "fusion.ln2", pre)?
    } else {
        let ln1 = layer_norm(tape, p, "fusion.ln1", joined)?;
        let m = mlp(tape, p, ln1)?;
        let pre = tape.add(joined, m);
        layer_norm(tape, p, "fusion.ln2", pre)?
    };
    Ok(Fused {
        dynamic: tape.slice_rows(fused, 0, t),
        static_: tape.slice_rows(fused, t, t),
        queries: tape.slice_rows(fused, 2 * t, n),
    })
}
