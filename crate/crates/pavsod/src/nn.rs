//! Parameter store and the layer building blocks shared by the encoders,
//! fusion blocks and decoders.
//!
//! Layers hold `ParamId`s into a [`ParamStore`]; the tensors themselves live
//! in the store so the optimizer and checkpointing see one flat namespace.
//! During a forward pass each used parameter is bound into the graph once
//! via `Graph::bound_leaf`, so weights shared across time steps (GRU) or
//! frames accumulate their gradients in a single buffer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub type ParamId = usize;

/// Named, ordered parameter set. Creation order fixes the id space.
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        tensor.requires_grad = trainable;
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id] = trainable;
        self.tensors[id].requires_grad = trainable;
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for id in 0..self.len() {
            if self.names[id].starts_with(prefix) {
                self.set_trainable(id, trainable);
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.tensors.len()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Copy values (not trainability) from another store, matched by name.
    /// Returns how many parameters were loaded.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut loaded = 0;
        for (name, &oid) in &other.index {
            if let Some(id) = self.id(name) {
                if self.tensors[id].shape() != other.tensors[oid].shape() {
                    return Err(Error::ConfigMismatch(format!(
                        "parameter {name}: shape {:?} vs {:?}",
                        self.tensors[id].shape(),
                        other.tensors[oid].shape()
                    )));
                }
                let rq = self.tensors[id].requires_grad;
                self.tensors[id] = other.tensors[oid].clone();
                self.tensors[id].requires_grad = rq;
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Bind a parameter into the graph (cached per graph, see `bound_leaf`).
    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.bound_leaf(id, &self.tensors[id], self.trainable[id])
    }
}

// ── initializers ────────────────────────────────────────────────────

pub fn randn_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}

/// He-style init for relu fan-in.
pub fn he_normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    randn_tensor(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Glorot uniform for linear/attention projections.
pub fn glorot_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-limit..limit)))
}

// ── layers ──────────────────────────────────────────────────────────

/// Dense layer on row-token tensors: `[N, d_in] -> [N, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), glorot_uniform(rng, &[d_in, d_out], d_in, d_out), true);
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[1, d_out]), true));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = ps.bind(g, self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = ps.bind(g, b);
            y = g.add(y, b)?;
        }
        Ok(y)
    }
}

/// 3x3-style conv layer with optional bias, `[C_in,H,W] -> [C_out,Ho,Wo]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = ps.add(format!("{name}.w"), he_normal(rng, &[c_out, c_in, k, k], fan_in), true);
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[c_out, 1, 1]), true));
        Conv2d {
            w,
            b,
            stride,
            pad: k / 2,
            c_in,
            c_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = ps.bind(g, self.w);
        let mut y = g.conv2d(x, w, self.stride, self.pad)?;
        if let Some(b) = self.b {
            let b = ps.bind(g, b);
            y = g.add(y, b)?;
        }
        Ok(y)
    }
}

/// Learned per-channel scale and shift on `[C,H,W]` maps; the deterministic
/// substitute for batch norm at batch size 1–2.
#[derive(Debug, Clone)]
pub struct ScaleShift {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ScaleShift {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[channels, 1, 1], T::one()), true);
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[channels, 1, 1]), true);
        ScaleShift { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = ps.bind(g, self.gamma);
        let beta = ps.bind(g, self.beta);
        let y = g.mul(x, gamma)?;
        g.add(y, beta)
    }
}

/// Layer-norm affine parameters over a `d`-wide last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[d], T::one()), true);
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[d]), true);
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = ps.bind(g, self.gamma);
        let beta = ps.bind(g, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Two-layer feed-forward block with relu.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            lin1: Linear::new(ps, rng, &format!("{name}.lin1"), d, hidden, true),
            lin2: Linear::new(ps, rng, &format!("{name}.lin2"), hidden, d, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.lin1.forward(g, ps, x)?;
        let h = g.relu(h);
        self.lin2.forward(g, ps, h)
    }
}

/// Multi-head attention core: queries from `[S, d_model]`, keys/values from
/// `[L, d_kv]`. Scores are scaled by 1/sqrt(d_head); each query's weights
/// over the L tokens sum to 1.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_kv: usize,
        heads: usize,
    ) -> Result<Self> {
        if d_model % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("d_model {d_model} not divisible by {heads} heads"),
            ));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), d_model, d_model, true),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), d_kv, d_model, true),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), d_kv, d_model, true),
            wo: Linear::new(ps, rng, &format!("{name}.wo"), d_model, d_model, true),
            heads,
            d_model,
        })
    }

    /// Returns the attended output `[S, d_model]`. If `attn_out` is given it
    /// receives the per-head attention matrices (for invariant tests).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        q_tokens: Var,
        kv_tokens: Var,
        mut attn_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let q = self.wq.forward(g, ps, q_tokens)?;
        let k = self.wk.forward(g, ps, kv_tokens)?;
        let v = self.wv.forward(g, ps, kv_tokens)?;
        let dh = self.d_model / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1)?;
            if let Some(out) = attn_out.as_deref_mut() {
                out.push(attn);
            }
            heads_out.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat(&heads_out, 1)?;
        self.wo.forward(g, ps, cat)
    }
}

/// One GRU direction. Convention: update gate `z`, reset gate `r`,
/// candidate `n = tanh(x·Wn + r ⊙ (h·Un) + bn)`, state
/// `h' = (1−z) ⊙ n + z ⊙ h`. Gates are sigmoid, candidate tanh.
#[derive(Debug, Clone)]
pub struct GruDirection {
    pub wz: ParamId,
    pub wr: ParamId,
    pub wn: ParamId,
    pub uz: ParamId,
    pub ur: ParamId,
    pub un: ParamId,
    pub bz: ParamId,
    pub br: ParamId,
    pub bn: ParamId,
    pub hidden: usize,
    pub reverse: bool,
}

impl GruDirection {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        reverse: bool,
    ) -> Self {
        let mut mk_w = |suffix: &str, rng: &mut ChaCha8Rng| {
            ps.add(
                format!("{name}.{suffix}"),
                glorot_uniform(rng, &[d_in, hidden], d_in, hidden),
                true,
            )
        };
        let wz = mk_w("wz", rng);
        let wr = mk_w("wr", rng);
        let wn = mk_w("wn", rng);
        let mut mk_u = |suffix: &str, rng: &mut ChaCha8Rng| {
            ps.add(
                format!("{name}.{suffix}"),
                glorot_uniform(rng, &[hidden, hidden], hidden, hidden),
                true,
            )
        };
        let uz = mk_u("uz", rng);
        let ur = mk_u("ur", rng);
        let un = mk_u("un", rng);
        let bz = ps.add(format!("{name}.bz"), Tensor::zeros(&[1, hidden]), true);
        let br = ps.add(format!("{name}.br"), Tensor::zeros(&[1, hidden]), true);
        let bn = ps.add(format!("{name}.bn"), Tensor::zeros(&[1, hidden]), true);
        GruDirection {
            wz,
            wr,
            wn,
            uz,
            ur,
            un,
            bz,
            br,
            bn,
            hidden,
            reverse,
        }
    }

    /// `x` is `[Tsteps, d_in]`; output `[Tsteps, hidden]`, row t aligned
    /// with input row t for both directions.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let steps = g.shape(x)[0];
        let (wz, wr, wn) = (ps.bind(g, self.wz), ps.bind(g, self.wr), ps.bind(g, self.wn));
        let (uz, ur, un) = (ps.bind(g, self.uz), ps.bind(g, self.ur), ps.bind(g, self.un));
        let (bz, br, bn) = (ps.bind(g, self.bz), ps.bind(g, self.br), ps.bind(g, self.bn));
        let mut h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let mut outs: Vec<Var> = Vec::with_capacity(steps);
        let order: Vec<usize> = if self.reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for &t in &order {
            let xt = g.slice(x, 0, t, 1)?;
            let z = {
                let a = g.matmul(xt, wz)?;
                let b = g.matmul(h, uz)?;
                let s = g.add(a, b)?;
                let s = g.add(s, bz)?;
                g.sigmoid(s)
            };
            let r = {
                let a = g.matmul(xt, wr)?;
                let b = g.matmul(h, ur)?;
                let s = g.add(a, b)?;
                let s = g.add(s, br)?;
                g.sigmoid(s)
            };
            let n = {
                let a = g.matmul(xt, wn)?;
                let hu = g.matmul(h, un)?;
                let gated = g.mul(r, hu)?;
                let s = g.add(a, gated)?;
                let s = g.add(s, bn)?;
                g.tanh(s)
            };
            // h' = (1 - z) * n + z * h
            let one_minus_z = {
                let nz = g.scale(z, -T::one());
                g.add_const(nz, T::one())
            };
            let a = g.mul(one_minus_z, n)?;
            let b = g.mul(z, h)?;
            h = g.add(a, b)?;
            outs.push(h);
        }
        if self.reverse {
            outs.reverse();
        }
        g.concat(&outs, 0)
    }
}

/// Bidirectional GRU: forward and backward passes concatenated per step,
/// `[Tsteps, d_in] -> [Tsteps, 2*hidden]`.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd: GruDirection,
    pub bwd: GruDirection,
}

impl BiGru {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        BiGru {
            fwd: GruDirection::new(ps, rng, &format!("{name}.fwd"), d_in, hidden, false),
            bwd: GruDirection::new(ps, rng, &format!("{name}.bwd"), d_in, hidden, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let f = self.fwd.forward(g, ps, x)?;
        let b = self.bwd.forward(g, ps, x)?;
        g.concat(&[f, b], 1)
    }
}
