//! AdamW with decoupled weight decay, a warmup + polynomial-decay learning
//! rate schedule, and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::autodiff::{GradBuffer, Tape, Var};
use crate::error::{bail, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Linear warmup to `peak_lr`, then `(1 - progress)^power` decay to `end_lr`
/// at `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub power: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { peak_lr: lr, end_lr: lr, warmup_steps: 0, total_steps: 1, power: 1.0 }
    }

    /// Rate for the 0-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let done = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.end_lr + (self.peak_lr - self.end_lr) * (1.0 - done).powf(self.power)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.end_lr >= 0.0 && self.power > 0.0) {
            bail!(Config, "learning-rate schedule needs peak_lr > 0, end_lr >= 0, power > 0");
        }
        Ok(())
    }
}

/// Moment estimates for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamW { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update of every trainable parameter. Weight decay touches only
    /// parameters named `*.weight`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let decay = if p.name.ends_with(".weight") { c.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.grads[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let upd = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w -= lr * (upd + decay * *w);
            }
        }
    }

    /// Moments as named tensors, for checkpointing.
    pub fn state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, p) in store.iter().enumerate() {
            let shape = p.value.shape().to_vec();
            out.push((format!("adam.m.{}", p.name), Tensor::new(shape.clone(), self.m[i].clone()).expect("same shape")));
            out.push((format!("adam.v.{}", p.name), Tensor::new(shape, self.v[i].clone()).expect("same shape")));
        }
        out
    }

    pub fn restore(&mut self, store: &ParamStore, arrays: &[(String, Tensor)], step: usize) -> Result<()> {
        for (i, p) in store.iter().enumerate() {
            for (prefix, dst) in [("adam.m.", &mut self.m[i]), ("adam.v.", &mut self.v[i])] {
                let key = format!("{prefix}{}", p.name);
                let Some((_, t)) = arrays.iter().find(|(n, _)| *n == key) else {
                    bail!(Format, "optimizer state lacks {key}");
                };
                if t.numel() != dst.len() {
                    bail!(Shape, "optimizer state {key} has {} values, expected {}", t.numel(), dst.len());
                }
                dst.copy_from_slice(t.data());
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Batch-mean loss terms and gradient. `f` builds the terms of one item on
/// its own tape; the first term is differentiated. Items are evaluated in
/// parallel and reduced in input order, so the sum is deterministic.
/// Tapes are in training mode (dropout on) when `dropout_seed` is set.
pub fn batch_gradients<F>(
    store: &ParamStore,
    items: &[usize],
    dropout_seed: Option<u64>,
    f: F,
) -> Result<(Vec<f64>, GradBuffer)>
where
    F: Fn(&Tape, usize) -> Result<Vec<Var>> + Sync,
{
    let w = 1.0 / items.len().max(1) as f64;
    let parts: Vec<Result<(Vec<f64>, GradBuffer)>> = items
        .par_iter()
        .map(|&i| {
            let t = match dropout_seed {
                Some(s) => Tape::training(store, crate::rng::mix(s, i as u64)),
                None => Tape::with_params(store),
            };
            let terms = f(&t, i)?;
            let vals = terms.iter().map(|&v| t.scalar(v)).collect::<Result<Vec<_>>>()?;
            let mut g = GradBuffer::zeros_like(store);
            g.accumulate(&t.backward(terms[0])?, w);
            Ok((vals, g))
        })
        .collect();
    let mut grads = GradBuffer::zeros_like(store);
    let mut sums: Vec<f64> = Vec::new();
    for p in parts {
        let (vals, g) = p?;
        grads.add(&g);
        sums.resize(vals.len(), 0.0);
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += w * v;
        }
    }
    Ok((sums, grads))
}

/// Errors with [`Error::NonFinite`] naming the first non-finite term.
pub fn check_finite(names: &[&str], values: &[f64], grads: &GradBuffer, step: usize) -> Result<()> {
    for (n, v) in names.iter().zip(values) {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: n.to_string(), step });
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite { term: "gradient".into(), step });
    }
    Ok(())
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(grads: &mut GradBuffer, max_norm: f64) -> f64 {
    let n = grads.norm();
    if max_norm > 0.0 && n > max_norm {
        grads.scale(max_norm / n);
    }
    n
}
