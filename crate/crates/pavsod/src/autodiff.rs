//! Tape-based reverse-mode automatic differentiation.
//!
//! A `Graph` records every differentiable operation executed during a
//! forward pass into a flat arena; `backward` replays the tape in reverse,
//! accumulating gradients by the chain rule. The tape is rebuilt on every
//! forward pass, which keeps dynamic control flow (teacher block on/off)
//! trivially correct.
//!
//! Kernels are single-threaded with fixed reduction order, so identical
//! inputs and parameters produce bit-identical outputs across runs.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Real, Tensor};

static GRAPH_IDS: AtomicU32 = AtomicU32::new(1);

/// Handle to a node in one specific `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    node: u32,
    graph: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

enum Op<T: Real> {
    Leaf,
    StopGrad,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Scale(T),
    AddConst(T),
    Matmul,
    Permute(Vec<usize>),
    Reshape,
    Softmax {
        axis: usize,
    },
    LayerNorm {
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        stride: usize,
        pad: usize,
    },
    PoolAxis {
        mode: PoolMode,
        axis: usize,
        window: usize,
        argmax: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
    },
    Upsample2d {
        factor: usize,
    },
    UpsampleBilinear2d {
        factor: usize,
    },
    SumAll,
    MeanAll,
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGrad => "stop_gradient",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Matmul => "matmul",
            Op::Permute(_) => "permute",
            Op::Reshape => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::PoolAxis { .. } => "pool",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Upsample2d { .. } => "upsample2d",
            Op::UpsampleBilinear2d { .. } => "upsample2d_bilinear",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
        }
    }
}

struct Node<T: Real> {
    op: Op<T>,
    inputs: Vec<u32>,
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

/// Recorded forward tape. Nodes are in execution (topological) order.
pub struct Graph<T: Real> {
    id: u32,
    nodes: Vec<Node<T>>,
    backward_done: bool,
    bindings: Vec<(usize, Var)>,
    binding_cache: HashMap<usize, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
            bindings: Vec::new(),
            binding_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "Var used with a different graph");
        v.node as usize
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.check(v);
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient buffer of a node, populated by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        let i = self.check(v);
        self.nodes[i].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        let i = self.check(v);
        self.nodes[i].requires_grad
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<u32>, value: Tensor<T>, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        {
            if !value.is_finite() {
                panic!("{}: non-finite value in forward output", op.name());
            }
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            requires_grad,
        });
        Var {
            node: id,
            graph: self.id,
        }
    }

    /// Insert a tensor that does not participate in gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], t, false)
    }

    /// Insert an input tensor, optionally tracked for gradients.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, vec![], t, requires_grad)
    }

    /// Insert a tensor bound to an external slot (a parameter-store index).
    /// Repeated calls with the same slot return the original node so that
    /// shared parameters accumulate gradients in one place.
    pub fn bound_leaf(&mut self, slot: usize, t: &Tensor<T>, requires_grad: bool) -> Var {
        if let Some(&v) = self.binding_cache.get(&slot) {
            return v;
        }
        let v = self.leaf(t.clone(), requires_grad);
        self.binding_cache.insert(slot, v);
        self.bindings.push((slot, v));
        v
    }

    /// Slots bound via `bound_leaf` together with their gradient buffers
    /// (empty gradients for untracked slots are skipped).
    pub fn bound_grads(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.bindings
            .iter()
            .filter_map(move |&(slot, v)| self.grad(v).map(|g| (slot, g)))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(&mut self, op: Op<T>, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let out_shape = broadcast_shape(
            self.nodes[ia].value.shape(),
            self.nodes[ib].value.shape(),
            op.name(),
        )?;
        let av = &self.nodes[ia].value;
        let bv = &self.nodes[ib].value;
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let f = |x: T, y: T| match op {
            Op::Add => x + y,
            Op::Sub => x - y,
            Op::Mul => x * y,
            Op::Div => x / y,
            _ => unreachable!(),
        };
        for_each_broadcast(&out_shape, av.shape(), bv.shape(), |oi, aj, bj| {
            out[oi] = f(av.data()[aj], bv.data()[bj]);
        });
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        let value = Tensor::new(out_shape, out).expect("broadcast shape consistent");
        Ok(self.push(op, vec![a.node, b.node], value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b)
    }

    fn unary(&mut self, op: Op<T>, a: Var) -> Var {
        let ia = self.check(a);
        let av = &self.nodes[ia].value;
        let data: Vec<T> = av
            .data()
            .iter()
            .map(|&x| match op {
                Op::Neg => -x,
                Op::Relu => {
                    if x > T::zero() {
                        x
                    } else {
                        T::zero()
                    }
                }
                Op::Sigmoid => sigmoid_scalar(x),
                Op::Tanh => x.tanh(),
                Op::Exp => x.exp(),
                Op::Log => x.ln(),
                Op::Scale(c) => x * c,
                Op::AddConst(c) => x + c,
                _ => unreachable!(),
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.nodes[ia].requires_grad;
        self.push(op, vec![a.node], value, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log, a)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(Op::Scale(c), a)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        self.unary(Op::AddConst(c), a)
    }

    /// Forward identity whose backward contributes nothing upstream.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let value = self.nodes[ia].value.clone();
        self.push(Op::StopGrad, vec![a.node], value, false)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let (ash, bsh) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if ash.len() != 2 || bsh.len() != 2 {
            return Err(Error::shape("matmul", format!("need 2-d operands, got {ash:?} and {bsh:?}")));
        }
        if ash[1] != bsh[0] {
            return Err(Error::shape(
                "matmul",
                format!("inner dims disagree: {ash:?} x {bsh:?}"),
            ));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let out = matmul_kernel(self.nodes[ia].value.data(), self.nodes[ib].value.data(), m, k, n);
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        let value = Tensor::new(vec![m, n], out).expect("matmul shape");
        Ok(self.push(Op::Matmul, vec![a.node, b.node], value, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ia = self.check(a);
        let ash = self.nodes[ia].value.shape().to_vec();
        let mut seen = vec![false; ash.len()];
        if perm.len() != ash.len() || perm.iter().any(|&p| p >= ash.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("bad permutation {perm:?} for rank {}", ash.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| ash[p]).collect();
        let out = permute_kernel(self.nodes[ia].value.data(), &ash, perm);
        let rg = self.nodes[ia].requires_grad;
        let value = Tensor::new(out_shape, out).expect("permute shape");
        Ok(self.push(Op::Permute(perm.to_vec()), vec![a.node], value, rg))
    }

    /// 2-d transpose, a common special case of `permute`.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a);
        let numel: usize = shape.iter().product();
        if numel != self.nodes[ia].value.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[ia].value.shape(), shape),
            ));
        }
        let value = Tensor::new(shape.to_vec(), self.nodes[ia].value.data().to_vec()).expect("reshape");
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(Op::Reshape, vec![a.node], value, rg))
    }

    // ── nn primitives ───────────────────────────────────────────────

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a);
        let shape = self.nodes[ia].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let out = softmax_kernel(self.nodes[ia].value.data(), &shape, axis);
        let rg = self.nodes[ia].requires_grad;
        let value = Tensor::new(shape, out).expect("softmax shape");
        Ok(self.push(Op::Softmax { axis }, vec![a.node], value, rg))
    }

    /// Layer normalization over the last axis, then affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x), self.check(gamma), self.check(beta));
        let shape = self.nodes[ix].value.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "rank-0 input"))?;
        if self.nodes[ig].value.shape() != [d] || self.nodes[ib].value.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma/beta must be [{d}], got {:?} and {:?}",
                    self.nodes[ig].value.shape(),
                    self.nodes[ib].value.shape()
                ),
            ));
        }
        let rows = self.nodes[ix].value.numel() / d;
        let xv = self.nodes[ix].value.data();
        let gv = self.nodes[ig].value.data();
        let bv = self.nodes[ib].value.data();
        let epst = T::from_f64(eps);
        let mut out = vec![T::zero(); rows * d];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        let dn = T::from_f64(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / dn;
            let inv_std = T::one() / (var + epst).sqrt();
            for i in 0..d {
                let xhat = (row[i] - mean) * inv_std;
                out[r * d + i] = gv[i] * xhat + bv[i];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let rg = self.nodes[ix].requires_grad
            || self.nodes[ig].requires_grad
            || self.nodes[ib].requires_grad;
        let value = Tensor::new(shape, out).expect("layer_norm shape");
        Ok(self.push(
            Op::LayerNorm {
                mean: means,
                inv_std: inv_stds,
            },
            vec![x.node, gamma.node, beta.node],
            value,
            rg,
        ))
    }

    /// 2-d cross-correlation: `x` is `[C_in, H, W]`, `w` is `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x), self.check(w));
        let xsh = self.nodes[ix].value.shape().to_vec();
        let wsh = self.nodes[iw].value.shape().to_vec();
        if xsh.len() != 3 || wsh.len() != 4 {
            return Err(Error::shape("conv2d", format!("x {xsh:?}, w {wsh:?}")));
        }
        let (cin, h, wd) = (xsh[0], xsh[1], xsh[2]);
        let (cout, wcin, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("input {h}x{wd} too small for k={kh} pad={pad}")));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let out = conv2d_kernel(
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            cin,
            h,
            wd,
            cout,
            kh,
            stride,
            pad,
            ho,
            wo,
        );
        let rg = self.nodes[ix].requires_grad || self.nodes[iw].requires_grad;
        let value = Tensor::new(vec![cout, ho, wo], out).expect("conv2d shape");
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x.node, w.node], value, rg))
    }

    /// Pool one axis with non-overlapping windows (floor semantics: the
    /// remainder is dropped). Max routes gradient to the first maximal
    /// element of each window; avg splits it uniformly.
    pub fn pool_axis(&mut self, x: Var, mode: PoolMode, axis: usize, window: usize) -> Result<Var> {
        let ix = self.check(x);
        let shape = self.nodes[ix].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("pool", format!("axis {axis} for shape {shape:?}")));
        }
        if window == 0 || shape[axis] / window == 0 {
            return Err(Error::invalid(
                "pool",
                format!("window {window} on axis of length {}", shape[axis]),
            ));
        }
        let axis_len = shape[axis];
        let out_len = axis_len / window;
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = out_len;
        let xv = self.nodes[ix].value.data();
        let mut out = vec![T::zero(); outer * out_len * inner];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0usize; out.len()];
        }
        let wn = T::from_f64(window as f64);
        for o in 0..outer {
            for j in 0..out_len {
                for i in 0..inner {
                    let oi = (o * out_len + j) * inner + i;
                    match mode {
                        PoolMode::Max => {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0;
                            for t in 0..window {
                                let src = (o * axis_len + j * window + t) * inner + i;
                                if xv[src] > best {
                                    best = xv[src];
                                    best_idx = src;
                                }
                            }
                            out[oi] = best;
                            argmax[oi] = best_idx;
                        }
                        PoolMode::Avg => {
                            let mut acc = T::zero();
                            for t in 0..window {
                                let src = (o * axis_len + j * window + t) * inner + i;
                                acc = acc + xv[src];
                            }
                            out[oi] = acc / wn;
                        }
                    }
                }
            }
        }
        let rg = self.nodes[ix].requires_grad;
        let value = Tensor::new(out_shape, out).expect("pool shape");
        Ok(self.push(
            Op::PoolAxis {
                mode,
                axis,
                window,
                argmax,
            },
            vec![x.node],
            value,
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let idxs: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect();
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut axis_total = 0;
        for &i in &idxs {
            let sh = self.nodes[i].value.shape();
            if sh.len() != first.len()
                || sh.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{sh:?} vs {first:?} on axis {axis}")));
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out = vec![T::zero(); outer * axis_total * inner];
        for o in 0..outer {
            let mut dst_off = 0;
            for &i in &idxs {
                let alen = self.nodes[i].value.shape()[axis];
                let src = self.nodes[i].value.data();
                let block = alen * inner;
                let dst = (o * axis_total + dst_off) * inner;
                out[dst..dst + block].copy_from_slice(&src[o * block..(o + 1) * block]);
                dst_off += alen;
            }
        }
        let rg = idxs.iter().any(|&i| self.nodes[i].requires_grad);
        let value = Tensor::new(out_shape, out).expect("concat shape");
        Ok(self.push(
            Op::Concat { axis },
            parts.iter().map(|v| v.node).collect(),
            value,
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x);
        let shape = self.nodes[ix].value.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(
                "slice",
                format!("axis {axis} [{start}..{}] of {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let xv = self.nodes[ix].value.data();
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * axis_len + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xv[src..src + len * inner]);
        }
        let rg = self.nodes[ix].requires_grad;
        let value = Tensor::new(out_shape, out).expect("slice shape");
        Ok(self.push(Op::Slice { axis, start }, vec![x.node], value, rg))
    }

    /// Nearest-neighbor upsampling of the last two axes of a `[C, H, W]` tensor.
    pub fn upsample2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let ix = self.check(x);
        let shape = self.nodes[ix].value.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("upsample2d", format!("need [C,H,W], got {shape:?}")));
        }
        if factor == 0 {
            return Err(Error::invalid("upsample2d", "factor must be >= 1"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.nodes[ix].value.data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[(ci * ho + i) * wo + j] = xv[(ci * h + i / factor) * w + j / factor];
                }
            }
        }
        let rg = self.nodes[ix].requires_grad;
        let value = Tensor::new(vec![c, ho, wo], out).expect("upsample shape");
        Ok(self.push(Op::Upsample2d { factor }, vec![x.node], value, rg))
    }

    /// Bilinear upsampling of the last two axes of a `[C, H, W]` tensor
    /// (half-pixel centers, edges clamped). Used for the final logit map so
    /// mask boundaries land between grid cells.
    pub fn upsample2d_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let ix = self.check(x);
        let shape = self.nodes[ix].value.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("upsample2d_bilinear", format!("need [C,H,W], got {shape:?}")));
        }
        if factor == 0 {
            return Err(Error::invalid("upsample2d_bilinear", "factor must be >= 1"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (h * factor, w * factor);
        let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|i| {
                    let s = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                    let lo = s.floor() as usize;
                    let hi = (lo + 1).min(n_in - 1);
                    (lo, hi, s - lo as f64)
                })
                .collect()
        };
        let rows = taps(ho, h);
        let cols = taps(wo, w);
        let xv = self.nodes[ix].value.data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ci in 0..c {
            for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
                for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
                    let v00 = xv[(ci * h + r0) * w + c0].to_f64_();
                    let v01 = xv[(ci * h + r0) * w + c1].to_f64_();
                    let v10 = xv[(ci * h + r1) * w + c0].to_f64_();
                    let v11 = xv[(ci * h + r1) * w + c1].to_f64_();
                    let v = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                    out[(ci * ho + i) * wo + j] = T::from_f64(v);
                }
            }
        }
        let rg = self.nodes[ix].requires_grad;
        let value = Tensor::new(vec![c, ho, wo], out).expect("bilinear shape");
        Ok(self.push(Op::UpsampleBilinear2d { factor }, vec![x.node], value, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let ix = self.check(x);
        let mut acc = T::zero();
        for &v in self.nodes[ix].value.data() {
            acc = acc + v;
        }
        let rg = self.nodes[ix].requires_grad;
        self.push(Op::SumAll, vec![x.node], Tensor::scalar(acc), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let ix = self.check(x);
        let n = self.nodes[ix].value.numel();
        let mut acc = T::zero();
        for &v in self.nodes[ix].value.data() {
            acc = acc + v;
        }
        let rg = self.nodes[ix].requires_grad;
        let value = Tensor::scalar(acc / T::from_f64(n as f64));
        self.push(Op::MeanAll, vec![x.node], value, rg)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; fills `grad` buffers of every
    /// tracked node. A second call on the same graph is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss);
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[il].value.shape().to_vec()));
        }
        if !self.nodes[il].requires_grad {
            return Err(Error::DetachedGraph);
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.dispatch_backward(i, &g, &mut grads);
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], node: usize, contribution: Vec<T>) {
        if !self.nodes[node].requires_grad {
            return;
        }
        match &mut grads[node] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contribution) {
                    *b = *b + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn dispatch_backward(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let in_val = |k: usize| self.nodes[ins[k] as usize].value.data();
        let in_shape = |k: usize| self.nodes[ins[k] as usize].value.shape();
        let in_numel = |k: usize| self.nodes[ins[k] as usize].value.numel();
        let out_shape = node.value.shape();

        match &node.op {
            Op::Leaf | Op::StopGrad => {}

            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (ash, bsh) = (in_shape(0).to_vec(), in_shape(1).to_vec());
                let (av, bv) = (in_val(0), in_val(1));
                let mut da = vec![T::zero(); in_numel(0)];
                let mut db = vec![T::zero(); in_numel(1)];
                for_each_broadcast(out_shape, &ash, &bsh, |oi, aj, bj| match node.op {
                    Op::Add => {
                        da[aj] = da[aj] + g[oi];
                        db[bj] = db[bj] + g[oi];
                    }
                    Op::Sub => {
                        da[aj] = da[aj] + g[oi];
                        db[bj] = db[bj] - g[oi];
                    }
                    Op::Mul => {
                        da[aj] = da[aj] + g[oi] * bv[bj];
                        db[bj] = db[bj] + g[oi] * av[aj];
                    }
                    Op::Div => {
                        da[aj] = da[aj] + g[oi] / bv[bj];
                        db[bj] = db[bj] - g[oi] * av[aj] / (bv[bj] * bv[bj]);
                    }
                    _ => unreachable!(),
                });
                self.accumulate(grads, ins[0] as usize, da);
                self.accumulate(grads, ins[1] as usize, db);
            }

            Op::Neg => {
                let da = g.iter().map(|&v| -v).collect();
                self.accumulate(grads, ins[0] as usize, da);
            }
            Op::Relu => {
                let xv = in_val(0);
                let da = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, ins[0] as usize, da);
            }
            Op::Sigmoid => {
                let yv = node.value.data();
                let da = g
                    .iter()
                    .zip(yv)
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, ins[0] as usize, da);
            }
            Op::Tanh => {
                let yv = node.value.data();
                let da = g
                    .iter()
                    .zip(yv)
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, ins[0] as usize, da);
            }
            Op::Exp => {
                let yv = node.value.data();
                let da = g.iter().zip(yv).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, ins[0] as usize, da);
            }
            Op::Log => {
                let xv = in_val(0);
                let da = g.iter().zip(xv).map(|(&gv, &x)| gv / x).collect();
                self.accumulate(grads, ins[0] as usize, da);
            }
            Op::Scale(c) => {
                let da = g.iter().map(|&v| v * *c).collect();
                self.accumulate(grads, ins[0] as usize, da);
            }
            Op::AddConst(_) => {
                self.accumulate(grads, ins[0] as usize, g.to_vec());
            }

            Op::Matmul => {
                let (ash, bsh) = (in_shape(0), in_shape(1));
                let (m, k, n) = (ash[0], ash[1], bsh[1]);
                let (av, bv) = (in_val(0), in_val(1));
                // da = g . b^T ; db = a^T . g
                let mut da = vec![T::zero(); m * k];
                for i0 in 0..m {
                    for j in 0..n {
                        let gv = g[i0 * n + j];
                        for p in 0..k {
                            da[i0 * k + p] = da[i0 * k + p] + gv * bv[p * n + j];
                        }
                    }
                }
                let mut db = vec![T::zero(); k * n];
                for i0 in 0..m {
                    for p in 0..k {
                        let a_ip = av[i0 * k + p];
                        for j in 0..n {
                            db[p * n + j] = db[p * n + j] + a_ip * g[i0 * n + j];
                        }
                    }
                }
                self.accumulate(grads, ins[0] as usize, da);
                self.accumulate(grads, ins[1] as usize, db);
            }

            Op::Permute(perm) => {
                let ash = in_shape(0);
                let mut da = vec![T::zero(); in_numel(0)];
                // output coord d corresponds to input coord perm[d]
                let in_strides = strides_of(ash);
                let out_sh = out_shape.to_vec();
                let mut coords = vec![0usize; out_sh.len()];
                for (oi, &gv) in g.iter().enumerate() {
                    let mut src = 0;
                    for d in 0..out_sh.len() {
                        src += coords[d] * in_strides[perm[d]];
                    }
                    da[src] = gv;
                    let _ = oi;
                    inc_coords(&mut coords, &out_sh);
                }
                self.accumulate(grads, ins[0] as usize, da);
            }

            Op::Reshape => {
                self.accumulate(grads, ins[0] as usize, g.to_vec());
            }

            Op::Softmax { axis } => {
                let yv = node.value.data();
                let shape = out_shape.to_vec();
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let alen = shape[*axis];
                let mut da = vec![T::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = T::zero();
                        for t in 0..alen {
                            let idx = (o * alen + t) * inner + i;
                            dot = dot + g[idx] * yv[idx];
                        }
                        for t in 0..alen {
                            let idx = (o * alen + t) * inner + i;
                            da[idx] = yv[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.accumulate(grads, ins[0] as usize, da);
            }

            Op::LayerNorm { mean, inv_std } => {
                let xv = in_val(0);
                let gv = in_val(1);
                let d = in_shape(1)[0];
                let rows = xv.len() / d;
                let dn = T::from_f64(d as f64);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let (m, is) = (mean[r], inv_std[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for i0 in 0..d {
                        let idx = r * d + i0;
                        let xhat = (xv[idx] - m) * is;
                        let dxhat = g[idx] * gv[i0];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgamma[i0] = dgamma[i0] + g[idx] * xhat;
                        dbeta[i0] = dbeta[i0] + g[idx];
                    }
                    for i0 in 0..d {
                        let idx = r * d + i0;
                        let xhat = (xv[idx] - m) * is;
                        let dxhat = g[idx] * gv[i0];
                        dx[idx] = is * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                    }
                }
                self.accumulate(grads, ins[0] as usize, dx);
                self.accumulate(grads, ins[1] as usize, dgamma);
                self.accumulate(grads, ins[2] as usize, dbeta);
            }

            Op::Conv2d { stride, pad } => {
                let xsh = in_shape(0);
                let wsh = in_shape(1);
                let (cin, h, w) = (xsh[0], xsh[1], xsh[2]);
                let (cout, k) = (wsh[0], wsh[2]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let xv = in_val(0);
                let wv = in_val(1);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                for co in 0..cout {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let gv = g[(co * ho + oh) * wo + ow];
                            if gv == T::zero() {
                                continue;
                            }
                            for ci in 0..cin {
                                for kh in 0..k {
                                    let ih = oh * stride + kh;
                                    if ih < *pad || ih - pad >= h {
                                        continue;
                                    }
                                    let ih = ih - pad;
                                    for kw in 0..k {
                                        let iw = ow * stride + kw;
                                        if iw < *pad || iw - pad >= w {
                                            continue;
                                        }
                                        let iw = iw - pad;
                                        let xi = (ci * h + ih) * w + iw;
                                        let wi = ((co * cin + ci) * k + kh) * k + kw;
                                        dx[xi] = dx[xi] + gv * wv[wi];
                                        dw[wi] = dw[wi] + gv * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, ins[0] as usize, dx);
                self.accumulate(grads, ins[1] as usize, dw);
            }

            Op::PoolAxis {
                mode,
                axis,
                window,
                argmax,
            } => {
                let xsh = in_shape(0);
                let mut dx = vec![T::zero(); in_numel(0)];
                match mode {
                    PoolMode::Max => {
                        for (oi, &src) in argmax.iter().enumerate() {
                            dx[src] = dx[src] + g[oi];
                        }
                    }
                    PoolMode::Avg => {
                        let axis_len = xsh[*axis];
                        let out_len = axis_len / window;
                        let inner: usize = xsh[axis + 1..].iter().product();
                        let outer: usize = xsh[..*axis].iter().product();
                        let wn = T::from_f64(*window as f64);
                        for o in 0..outer {
                            for j in 0..out_len {
                                for i0 in 0..inner {
                                    let share = g[(o * out_len + j) * inner + i0] / wn;
                                    for t in 0..*window {
                                        let src = (o * axis_len + j * window + t) * inner + i0;
                                        dx[src] = dx[src] + share;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, ins[0] as usize, dx);
            }

            Op::Concat { axis } => {
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let total = out_shape[*axis];
                let mut off = 0;
                for k in 0..ins.len() {
                    let alen = in_shape(k)[*axis];
                    if self.nodes[ins[k] as usize].requires_grad {
                        let mut dk = vec![T::zero(); in_numel(k)];
                        for o in 0..outer {
                            let src = (o * total + off) * inner;
                            let dst = o * alen * inner;
                            dk[dst..dst + alen * inner].copy_from_slice(&g[src..src + alen * inner]);
                        }
                        self.accumulate(grads, ins[k] as usize, dk);
                    }
                    off += alen;
                }
            }

            Op::Slice { axis, start } => {
                let xsh = in_shape(0);
                let inner: usize = xsh[axis + 1..].iter().product();
                let outer: usize = xsh[..*axis].iter().product();
                let axis_len = xsh[*axis];
                let len = out_shape[*axis];
                let mut dx = vec![T::zero(); in_numel(0)];
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, ins[0] as usize, dx);
            }

            Op::Upsample2d { factor } => {
                let xsh = in_shape(0);
                let (c, h, w) = (xsh[0], xsh[1], xsh[2]);
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); in_numel(0)];
                for ci in 0..c {
                    for i0 in 0..ho {
                        for j in 0..wo {
                            let xi = (ci * h + i0 / factor) * w + j / factor;
                            dx[xi] = dx[xi] + g[(ci * ho + i0) * wo + j];
                        }
                    }
                }
                self.accumulate(grads, ins[0] as usize, dx);
            }

            Op::UpsampleBilinear2d { factor } => {
                let xsh = in_shape(0);
                let (c, h, w) = (xsh[0], xsh[1], xsh[2]);
                let (ho, wo) = (h * factor, w * factor);
                let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
                    (0..n_out)
                        .map(|i| {
                            let s = ((i as f64 + 0.5) / *factor as f64 - 0.5)
                                .clamp(0.0, (n_in - 1) as f64);
                            let lo = s.floor() as usize;
                            let hi = (lo + 1).min(n_in - 1);
                            (lo, hi, s - lo as f64)
                        })
                        .collect()
                };
                let rows = taps(ho, h);
                let cols = taps(wo, w);
                let mut dx = vec![T::zero(); in_numel(0)];
                for ci in 0..c {
                    for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
                        for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
                            let gv = g[(ci * ho + i) * wo + j];
                            let add = |dx: &mut [T], r: usize, cc: usize, wgt: f64| {
                                let idx = (ci * h + r) * w + cc;
                                dx[idx] = dx[idx] + gv * T::from_f64(wgt);
                            };
                            add(&mut dx, r0, c0, (1.0 - fy) * (1.0 - fx));
                            add(&mut dx, r0, c1, (1.0 - fy) * fx);
                            add(&mut dx, r1, c0, fy * (1.0 - fx));
                            add(&mut dx, r1, c1, fy * fx);
                        }
                    }
                }
                self.accumulate(grads, ins[0] as usize, dx);
            }

            Op::SumAll => {
                let gv = g[0];
                self.accumulate(grads, ins[0] as usize, vec![gv; in_numel(0)]);
            }
            Op::MeanAll => {
                let gv = g[0] / T::from_f64(in_numel(0) as f64);
                self.accumulate(grads, ins[0] as usize, vec![gv; in_numel(0)]);
            }
        }
    }
}

fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ── kernels ─────────────────────────────────────────────────────────

pub(crate) fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + a_ip * brow[j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn conv2d_kernel<T: Real>(
    x: &[T],
    w: &[T],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); cout * ho * wo];
    for co in 0..cout {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = T::zero();
                for ci in 0..cin {
                    for kh in 0..k {
                        let ih = oh * stride + kh;
                        if ih < pad || ih - pad >= h {
                            continue;
                        }
                        let ih = ih - pad;
                        for kw in 0..k {
                            let iw = ow * stride + kw;
                            if iw < pad || iw - pad >= wd {
                                continue;
                            }
                            let iw = iw - pad;
                            acc = acc
                                + x[(ci * h + ih) * wd + iw] * w[((co * cin + ci) * k + kh) * k + kw];
                        }
                    }
                }
                out[(co * ho + oh) * wo + ow] = acc;
            }
        }
    }
    out
}

fn softmax_kernel<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let alen = shape[axis];
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut mx = T::neg_infinity();
            for t in 0..alen {
                mx = mx.max(x[(o * alen + t) * inner + i]);
            }
            let mut denom = T::zero();
            for t in 0..alen {
                let e = (x[(o * alen + t) * inner + i] - mx).exp();
                out[(o * alen + t) * inner + i] = e;
                denom = denom + e;
            }
            for t in 0..alen {
                let idx = (o * alen + t) * inner + i;
                out[idx] = out[idx] / denom;
            }
        }
    }
    out
}

fn permute_kernel<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let mut out = vec![T::zero(); x.len()];
    let mut coords = vec![0usize; out_shape.len()];
    for slot in out.iter_mut() {
        let mut src = 0;
        for d in 0..out_shape.len() {
            src += coords[d] * in_strides[perm[d]];
        }
        *slot = x[src];
        inc_coords(&mut coords, &out_shape);
    }
    out
}

fn inc_coords(coords: &mut [usize], shape: &[usize]) {
    for d in (0..shape.len()).rev() {
        coords[d] += 1;
        if coords[d] < shape[d] {
            return;
        }
        coords[d] = 0;
    }
}

/// Broadcast shape of two operands: equal dims, or one side is 1.
/// Shorter shapes are aligned right (leading dims of size 1).
fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Visit every output element of a broadcast binary op, yielding flat
/// indices into the output and both (possibly smaller) inputs.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        for i in 0..numel {
            f(i, i, i);
        }
        return;
    }
    let rank = out_shape.len();
    let eff = |shape: &[usize]| -> Vec<usize> {
        // Right-aligned effective strides with 0 for broadcast dims.
        let mut s = vec![0usize; rank];
        let offset = rank - shape.len();
        let st = strides_of(shape);
        for d in 0..shape.len() {
            s[offset + d] = if shape[d] == 1 { 0 } else { st[d] };
        }
        s
    };
    let sa = eff(a_shape);
    let sb = eff(b_shape);
    let mut coords = vec![0usize; rank];
    for oi in 0..numel {
        let mut ai = 0;
        let mut bi = 0;
        for d in 0..rank {
            ai += coords[d] * sa[d];
            bi += coords[d] * sb[d];
        }
        f(oi, ai, bi);
        inc_coords(&mut coords, out_shape);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            // Box-Muller is plenty here.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
    }

    #[test]
    fn sigmoid_tanh_midpoints() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let s = g.sigmoid(x);
        let t = g.tanh(x);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(t).item(), 0.0);
    }

    #[test]
    fn relu_gradient_piecewise() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), true);
        let y = g.relu(x);
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let p = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(p).data(), g.value(a).data());

        let x = g.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap(), false);
        let y = g.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap(), false);
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn_tensor(&mut rng, &[3, 4]);
        let b = randn_tensor(&mut rng, &[4, 2]);
        // Independent naive oracle, j-inner ordering.
        let mut expect = vec![0.0f64; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                expect[i * 2 + j] = acc;
            }
        }
        let mut g = Graph::<f64>::new();
        let av = g.constant(a);
        let bv = g.constant(b);
        let c = g.matmul(av, bv).unwrap();
        // Same summation order (p ascending) gives exact equality in f64.
        assert_eq!(g.value(c).data(), expect.as_slice());
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![5.0, 5.0, 0.0, 3.0f64.ln()]).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let d = g.value(s).data();
        assert!((d[0] - 0.5).abs() < 1e-15);
        assert!((d[1] - 0.5).abs() < 1e-15);
        assert!((d[2] - 0.25).abs() < 1e-12);
        assert!((d[3] - 0.75).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn_tensor(&mut rng, &[4, 7]);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let s = g.softmax(xv, 1).unwrap();
        for r in 0..4 {
            let sum: f64 = g.value(s).data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.7));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_normalizes_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn_tensor(&mut rng, &[3, 16]);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::full(&[16], 1.0));
        let beta = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(xv, gamma, beta, 1e-10).unwrap();
        for r in 0..3 {
            let row = &g.value(y).data()[r * 16..(r + 1) * 16];
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_one_by_one_identity_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn_tensor(&mut rng, &[1, 4, 6]);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let w1 = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = g.conv2d(xv, w1, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(xv).data());
        let w0 = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let z = g.conv2d(xv, w0, 1, 1).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_matches_direct_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn_tensor(&mut rng, &[2, 5, 5]);
        let w = randn_tensor(&mut rng, &[3, 2, 3, 3]);
        // Direct-summation oracle with explicit zero padding.
        let (cin, h, wd, cout, k, pad) = (2usize, 5usize, 5usize, 3usize, 3usize, 1usize);
        let mut expect = vec![0.0f64; cout * h * wd];
        for co in 0..cout {
            for oh in 0..h {
                for ow in 0..wd {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = oh as isize + kh as isize - pad as isize;
                                let iw = ow as isize + kw as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[(ci * h + ih as usize) * wd + iw as usize]
                                    * w.data()[((co * cin + ci) * k + kh) * k + kw];
                            }
                        }
                    }
                    expect[(co * h + oh) * wd + ow] = acc;
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let y = g.conv2d(xv, wv, 1, 1).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(g.conv2d(x, w, 1, 1).is_err());
    }

    #[test]
    fn pool_examples() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[6], 2.5));
        let m = g.pool_axis(c, PoolMode::Max, 0, 3).unwrap();
        assert_eq!(g.value(m).data(), &[2.5, 2.5]);
        let x = g.constant(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let a = g.pool_axis(x, PoolMode::Avg, 0, 2).unwrap();
        assert_eq!(g.value(a).data(), &[2.0]);
    }

    #[test]
    fn pool_floor_semantics_drops_tail() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 99.0]).unwrap());
        let m = g.pool_axis(x, PoolMode::Max, 0, 2).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 4.0]);
    }

    #[test]
    fn max_pool_tie_breaks_to_first() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![4], vec![7.0, 7.0, 1.0, 2.0]).unwrap(), true);
        let m = g.pool_axis(x, PoolMode::Max, 0, 4).unwrap();
        let l = g.sum_all(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_sum_gives_ones_and_mean_square_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let l = g.mean_all(sq);
        g.backward(l).unwrap();
        let grads = g.grad(x).unwrap();
        for (gi, xi) in grads.iter().zip([1.0, -2.0, 0.5, 3.0]) {
            assert!((gi - 2.0 * xi / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_twice_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(1.0), true);
        let l = g.sum_all(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));

        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(5.0));
        let l = g.sum_all(c);
        assert!(matches!(g.backward(l), Err(Error::DetachedGraph)));
    }

    #[test]
    fn stop_gradient_blocks_and_live_path_counts() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sg = g.stop_gradient(x);
        let l = g.sum_all(sg);
        assert!(matches!(g.backward(l), Err(Error::DetachedGraph)));

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sg = g.stop_gradient(x);
        let y = g.add(x, sg).unwrap();
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn broadcasting_size_one_dims() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap(), true);
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);

        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn permute_round_trip_and_flat_layout() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t.clone(), true);
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), t.data());
        let l = g.sum_all(back);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_fn(&[2, 2], |i| i as f64), true);
        let b = g.leaf(Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64), true);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        let a2 = g.slice(c, 1, 0, 2).unwrap();
        let b2 = g.slice(c, 1, 2, 3).unwrap();
        assert_eq!(g.value(a2).data(), g.value(a).data());
        assert_eq!(g.value(b2).data(), g.value(b).data());
        let l = g.sum_all(b2);
        g.backward(l).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn upsample_nearest_and_backward_sums() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap(), true);
        let y = g.upsample2d(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4]);
        assert_eq!(g.value(y).data(), &[3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn bilinear_upsample_interpolates_and_conserves_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2], vec![0.0, 4.0]).unwrap(), true);
        let y = g.upsample2d_bilinear(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4]);
        // Half-pixel centers: columns sample at -0.25, 0.25, 0.75, 1.25
        // which clamp to 0, then interpolate, then clamp to 1.
        assert_eq!(g.value(y).data()[0..4], [0.0, 1.0, 3.0, 4.0]);
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        // Weights are a partition of unity: total gradient mass is 8.
        let grad = g.grad(x).unwrap();
        assert!((grad.iter().sum::<f64>() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn bound_leaf_caches_per_slot() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::<f64>::full(&[2], 1.5);
        let v1 = g.bound_leaf(42, &t, true);
        let v2 = g.bound_leaf(42, &t, true);
        assert_eq!(v1, v2);
        let doubled = g.add(v1, v2).unwrap();
        let l = g.sum_all(doubled);
        g.backward(l).unwrap();
        let grads: Vec<_> = g.bound_grads().collect();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1, &[2.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = randn_tensor(&mut rng, &[3, 8]);
            let w = randn_tensor(&mut rng, &[8, 8]);
            let mut g = Graph::<f64>::new();
            let xv = g.constant(x);
            let wv = g.constant(w);
            let h = g.matmul(xv, wv).unwrap();
            let h = g.tanh(h);
            let s = g.softmax(h, 1).unwrap();
            g.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
