//! Named parameter storage, initialization and the Adam optimizer.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};

/// Ordered, named collection of f64 parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, idx: usize) -> &ArrayD<f64> {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.values[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Injects every parameter into a tape as gradient-tracking leaves,
    /// in registration order.
    pub fn inject(&self, tape: &Tape) -> TapeParams {
        TapeParams {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }
}

/// Tape handles for one injection of a [`ParamStore`].
pub struct TapeParams {
    vars: Vec<Var>,
}

impl TapeParams {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Collects per-parameter gradients (zeros for untouched parameters).
    pub fn collect_grads(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<ArrayD<f64>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                grads
                    .take(*v)
                    .unwrap_or_else(|| ArrayD::zeros(store.get(i).raw_dim()))
            })
            .collect()
    }
}

/// Kaiming-style normal initialization for conv/linear weights.
pub fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller from two uniforms; ChaCha keeps this reproducible.
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

/// Adam with bias correction; constant learning rate unless stepped with
/// an explicit override.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: (0..store.len())
                .map(|i| ArrayD::zeros(store.get(i).raw_dim()))
                .collect(),
            v: (0..store.len())
                .map(|i| ArrayD::zeros(store.get(i).raw_dim()))
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over all parameters with the stored learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[ArrayD<f64>]) {
        self.step_with_lr(store, grads, self.lr);
    }

    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &[ArrayD<f64>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            self.v[i]
                .zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            let p = store.get_mut(i);
            let (m, v) = (&self.m[i], &self.v[i]);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / b1t;
                    let vhat = vv / b2t;
                    *pv -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
