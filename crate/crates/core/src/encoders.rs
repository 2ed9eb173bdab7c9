//! Stream and query encoders mapping raw widths to the shared width `D`.
//!
//! - dynamic: width-3 same-padded temporal convolution, then a linear layer
//! - static: causal gated mixer, `x·W_in + tanh(x·W_gate) ⊙ ema(x·W_in) + b`
//! - text: mean of frozen token embeddings, then a linear layer

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

pub const KERNEL_WIDTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub raw_dynamic: usize,
    pub raw_static: usize,
    pub embed: usize,
    pub hidden: usize,
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, dims: EncoderDims, rng: &mut R) {
    let EncoderDims {
        raw_dynamic,
        raw_static,
        embed,
        hidden,
    } = dims;
    for k in 0..KERNEL_WIDTH {
        store.init_glorot(
            &format!("enc.dyn.conv.w{k}"),
            raw_dynamic,
            hidden,
            KERNEL_WIDTH * raw_dynamic,
            hidden,
            rng,
        );
    }
    store.insert("enc.dyn.conv.b", Mat::zeros(1, hidden));
    store.init_glorot("enc.dyn.proj.w", hidden, hidden, hidden, hidden, rng);
    store.insert("enc.dyn.proj.b", Mat::zeros(1, hidden));

    store.init_glorot("enc.sta.in.w", raw_static, hidden, raw_static, hidden, rng);
    store.init_glorot("enc.sta.gate.w", raw_static, hidden, raw_static, hidden, rng);
    store.insert("enc.sta.b", Mat::zeros(1, hidden));

    store.init_glorot("enc.txt.w", embed, hidden, embed, hidden, rng);
    store.insert("enc.txt.b", Mat::zeros(1, hidden));
}

fn check_input(tape: &Tape, x: Var, what: &str) -> Result<()> {
    let m = tape.value(x);
    if m.rows() < KERNEL_WIDTH {
        return Err(Error::Shape(format!(
            "{what}: {} clips is shorter than the kernel width {KERNEL_WIDTH}",
            m.rows()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// `T x D_raw` to `T x D`.
pub fn encode_dynamic(tape: &mut Tape, p: &Bound, raw: Var) -> Result<Var> {
    check_input(tape, raw, "dynamic features")?;
    let mut acc: Option<Var> = None;
    for k in 0..KERNEL_WIDTH {
        // tap k reads x[t + k - 1]
        let shifted = tape.shift_rows(raw, k as isize - 1);
        let w = p.var(&format!("enc.dyn.conv.w{k}"))?;
        let term = tape.matmul(shifted, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let conv = tape.add_row(acc.expect("kernel is non-empty"), p.var("enc.dyn.conv.b")?);
    let lin = tape.matmul(conv, p.var("enc.dyn.proj.w")?);
    Ok(tape.add_row(lin, p.var("enc.dyn.proj.b")?))
}

/// `T x D_raw` to `T x D`; output at `t` depends only on inputs `<= t`.
pub fn encode_static(tape: &mut Tape, p: &Bound, raw: Var, ema_decay: f64) -> Result<Var> {
    check_input(tape, raw, "static features")?;
    let u = tape.matmul(raw, p.var("enc.sta.in.w")?);
    let gate_pre = tape.matmul(raw, p.var("enc.sta.gate.w")?);
    let gate = tape.tanh(gate_pre);
    let history = tape.ema(u, ema_decay);
    let mixed = tape.mul(gate, history);
    let out = tape.add(u, mixed);
    Ok(tape.add_row(out, p.var("enc.sta.b")?))
}

/// Pooled `N x E` query embeddings to `N x D`.
pub fn encode_queries(tape: &mut Tape, p: &Bound, pooled: Var) -> Result<Var> {
    let lin = tape.matmul(pooled, p.var("enc.txt.w")?);
    Ok(tape.add_row(lin, p.var("enc.txt.b")?))
}

/// Mean of token embeddings per query, `N x E`.
pub fn mean_pool_tokens(queries: &[Vec<u32>], table: &Mat) -> Result<Mat> {
    let mut out = Mat::zeros(queries.len(), table.cols());
    for (i, tokens) in queries.iter().enumerate() {
        if tokens.is_empty() {
            return Err(Error::Input(format!("query {i} has no tokens")));
        }
        let row = out.row_mut(i);
        for &tok in tokens {
            let t = tok as usize;
            if t >= table.rows() {
                return Err(Error::Input(format!(
                    "token {t} outside vocabulary of {}",
                    table.rows()
                )));
            }
            for (o, e) in row.iter_mut().zip(table.row(t)) {
                *o += e;
            }
        }
        let n = tokens.len() as f64;
        row.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}
