//! AdamW: adaptive moments with decoupled weight decay,
//! `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Real;

/// Gradient accumulator keyed by parameter id; supports micro-batching by
/// summing several backward passes before an optimizer step.
pub struct GradAccum<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> GradAccum<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        GradAccum {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    /// Pull every bound-parameter gradient out of a finished graph.
    pub fn add_from_graph(&mut self, graph: &Graph<T>) {
        for (slot, g) in graph.bound_grads() {
            match &mut self.grads[slot] {
                Some(buf) => {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b = *b + gv;
                    }
                }
                slot_buf @ None => *slot_buf = Some(g.to_vec()),
            }
        }
    }

    pub fn set(&mut self, id: ParamId, g: Vec<T>) {
        self.grads[id] = Some(g);
    }

    pub fn scale(&mut self, factor: f64) {
        let f = T::from_f64(factor);
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * f;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }
}

pub struct AdamW<T: Real> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect(),
            v: store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers for checkpointing, ordered by parameter id.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Apply one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradAccum<T>) -> Result<()> {
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.lr);
        let wd = T::from_f64(self.weight_decay);
        let eps = T::from_f64(self.eps);
        for id in 0..store.len() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step: self.step as usize,
                    detail: format!("non-finite gradient in parameter {}", store.name(id)),
                });
            }
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
            }
        }
        Ok(())
    }
}
