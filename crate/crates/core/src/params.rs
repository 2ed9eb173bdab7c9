//! Named parameter blocks and their binding onto a [`Tape`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Mat;

/// Ordered map of parameter name to value. Iteration order is the name
/// order, which keeps initialisation, updates, and checkpoints stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Mat::is_finite)
    }

    /// Registers every block as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Registers every block as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Glorot-uniform initialisation.
    pub fn init_glorot<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(name, Mat::uniform(rows, cols, bound, rng));
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter block {name}")))
    }

    /// Collects gradients by name; blocks the loss did not touch get zeros.
    pub fn gradients(&self, grads: &mut Grads, store: &ParamStore) -> BTreeMap<String, Mat> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = grads.take(v).unwrap_or_else(|| {
                    let m = store.get(name).expect("bound from this store");
                    Mat::zeros(m.rows(), m.cols())
                });
                (name.clone(), g)
            })
            .collect()
    }
}
