//! Label-guided multimodal fusion.
//!
//! Two pseudo-siamese audio-visual context fusion (ACF) blocks. The student
//! flattens the clip feature to `F in R^{C x THW}`, adds the spherical
//! positional encoding, cross-attends from pixels (queries) into the
//! semantic and location audio embeddings (keys/values), and modulates the
//! semantic result with a pixel-wise gate reduced from the location result:
//! `F_stu = F_sem ⊙ sigmoid(φ_{C->1}(F_loc))`. The teacher shares the
//! structure but not the weights, sees the ground-truth mask concatenated
//! as an extra channel, and sits behind a gradient truncation so its losses
//! never touch the encoders. The teacher runs only in training mode.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, PoolMode, Var};
use crate::error::{Error, Result};
use crate::geometry::SpeTable;
use crate::nn::{Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AcfConfig {
    pub c_vis: usize,
    pub c_aud: usize,
    pub heads: usize,
    /// MCA+FFN layers per branch; the positional encodings are added once
    /// before the first layer.
    pub depth: usize,
    pub ffn_mult: usize,
    /// Replace both attentions with broadcast-concat + 1x1 projection.
    pub concat_fusion: bool,
    /// When false, skip the location branch and its gate entirely.
    pub loc_branch: bool,
}

impl Default for AcfConfig {
    fn default() -> Self {
        AcfConfig {
            c_vis: 96,
            c_aud: 64,
            heads: 4,
            depth: 1,
            ffn_mult: 2,
            concat_fusion: false,
            loc_branch: true,
        }
    }
}

#[derive(Debug, Clone)]
struct McaLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

#[derive(Debug, Clone)]
enum Branch {
    Mca(Vec<McaLayer>),
    /// Mean-pooled audio vector broadcast to every pixel, concatenated on
    /// the channel axis, then projected back to C.
    Concat(Linear),
}

#[derive(Debug, Clone)]
pub struct AcfBlockParams {
    sem: Branch,
    loc: Option<Branch>,
    /// Channel-reduction conv of the gate: weight `[1, C]`, bias `[1, 1]`.
    phi_w: Option<ParamId>,
    phi_b: Option<ParamId>,
    /// Teacher-only input adapter absorbing the GT channel: 1x1, C+1 -> C.
    adapter: Option<Conv2d>,
    cfg: AcfConfig,
}

fn build_branch<T: Real>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &AcfConfig,
) -> Result<Branch> {
    if cfg.concat_fusion {
        let proj = Linear::new(ps, rng, &format!("{prefix}.proj"), cfg.c_vis + cfg.c_aud, cfg.c_vis, true);
        return Ok(Branch::Concat(proj));
    }
    let mut layers = Vec::new();
    for i in 0..cfg.depth {
        layers.push(McaLayer {
            attn: MultiHeadAttention::new(
                ps,
                rng,
                &format!("{prefix}.{i}.mca"),
                cfg.c_vis,
                cfg.c_aud,
                cfg.heads,
            )?,
            ln1: LayerNorm::new(ps, &format!("{prefix}.{i}.ln1"), cfg.c_vis),
            ffn: FeedForward::new(ps, rng, &format!("{prefix}.{i}.ffn"), cfg.c_vis, cfg.c_vis * cfg.ffn_mult),
            ln2: LayerNorm::new(ps, &format!("{prefix}.{i}.ln2"), cfg.c_vis),
        });
    }
    Ok(Branch::Mca(layers))
}

impl AcfBlockParams {
    pub fn build<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &AcfConfig,
        teacher: bool,
    ) -> Result<Self> {
        let sem = build_branch(ps, rng, &format!("{prefix}.sem"), cfg)?;
        let (loc, phi_w, phi_b) = if cfg.loc_branch {
            let loc = build_branch(ps, rng, &format!("{prefix}.loc"), cfg)?;
            let w = ps.add(
                format!("{prefix}.phi.w"),
                crate::nn::randn_tensor(rng, &[1, cfg.c_vis], (1.0 / cfg.c_vis as f64).sqrt()),
                true,
            );
            let b = ps.add(format!("{prefix}.phi.b"), Tensor::zeros(&[1, 1]), true);
            (Some(loc), Some(w), Some(b))
        } else {
            (None, None, None)
        };
        let adapter = teacher.then(|| {
            Conv2d::new(ps, rng, &format!("{prefix}.adapter"), cfg.c_vis + 1, cfg.c_vis, 1, 1, true)
        });
        Ok(AcfBlockParams {
            sem,
            loc,
            phi_w,
            phi_b,
            adapter,
            cfg: cfg.clone(),
        })
    }
}

/// Both fusion blocks. The teacher is absent under the no-teacher ablation.
pub struct FusionParams {
    pub student: AcfBlockParams,
    pub teacher: Option<AcfBlockParams>,
}

impl FusionParams {
    pub fn build<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &AcfConfig,
        with_teacher: bool,
    ) -> Result<Self> {
        let student = AcfBlockParams::build(ps, rng, "fusion.student", cfg, false)?;
        let teacher = if with_teacher {
            Some(AcfBlockParams::build(ps, rng, "fusion.teacher", cfg, true)?)
        } else {
            None
        };
        Ok(FusionParams { student, teacher })
    }
}

// ── flatten / SPE plumbing ─────────────────────────────────────────

/// `[T, C, H, W] -> [C, T*H*W]`; element `(t, c, h, w)` lands at flat
/// spatial index `t*H*W + h*W + w`.
pub fn flatten_clip<T: Real>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    let sh = g.shape(f).to_vec();
    if sh.len() != 4 {
        return Err(Error::shape("flatten_clip", format!("expected [T,C,H,W], got {sh:?}")));
    }
    let p = g.permute(f, &[1, 0, 2, 3])?;
    g.reshape(p, &[sh[1], sh[0] * sh[2] * sh[3]])
}

/// Inverse of [`flatten_clip`].
pub fn unflatten_clip<T: Real>(g: &mut Graph<T>, flat: Var, t: usize, h: usize, w: usize) -> Result<Var> {
    let sh = g.shape(flat).to_vec();
    if sh.len() != 2 || sh[1] != t * h * w {
        return Err(Error::shape(
            "unflatten_clip",
            format!("cannot reshape {sh:?} to T={t} H={h} W={w}"),
        ));
    }
    let r = g.reshape(flat, &[sh[0], t, h, w])?;
    g.permute(r, &[1, 0, 2, 3])
}

/// Lay an SPE table out as a `[d, T*H*W]` matrix (time steps share the
/// spatial encoding) ready to add to a flattened clip feature.
pub fn spe_to_flat<T: Real>(table: &SpeTable, t_frames: usize) -> Tensor<T> {
    let (h, w, d) = (table.height, table.width, table.dim);
    let s = t_frames * h * w;
    let mut data = vec![T::zero(); d * s];
    for c in 0..d {
        for t in 0..t_frames {
            for y in 0..h {
                for x in 0..w {
                    data[c * s + t * h * w + y * w + x] = T::from_f64(table.at(y, x)[c]);
                }
            }
        }
    }
    Tensor::new(vec![d, s], data).expect("spe layout")
}

// ── multimodal cross-attention ──────────────────────────────────────

fn mca_layer<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    layer: &McaLayer,
    f_cs: Var,
    tokens_cl: Var,
    attn_probe: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let ft = g.transpose(f_cs)?; // [S, C]
    let gt = g.transpose(tokens_cl)?; // [L, C_aud]
    let attn = layer.attn.forward(g, ps, ft, gt, attn_probe)?;
    let res = g.add(attn, ft)?;
    let h = layer.ln1.forward(g, ps, res)?;
    let f = layer.ffn.forward(g, ps, h)?;
    let res2 = g.add(f, h)?;
    let out = layer.ln2.forward(g, ps, res2)?;
    g.transpose(out)
}

/// One cross-attention branch: queries from the flattened visual feature
/// `F [C, S]`, keys/values from audio tokens `[C_aud, L]`, both assumed to
/// carry their positional encodings already. Residual + layer-norm, then
/// FFN + residual + layer-norm.
pub fn mca<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    branch: &AcfBlockParams,
    semantic: bool,
    f_cs: Var,
    tokens_cl: Var,
    mut attn_probe: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let b = if semantic {
        &branch.sem
    } else {
        branch.loc.as_ref().ok_or_else(|| Error::invalid("mca", "location branch disabled"))?
    };
    match b {
        Branch::Mca(layers) => {
            let mut f = f_cs;
            for layer in layers {
                f = mca_layer(g, ps, layer, f, tokens_cl, attn_probe.as_deref_mut())?;
            }
            Ok(f)
        }
        Branch::Concat(proj) => {
            let l = g.shape(tokens_cl)[1];
            let s = g.shape(f_cs)[1];
            let pooled = g.pool_axis(tokens_cl, PoolMode::Avg, 1, l)?; // [C_aud, 1]
            let zeros = g.constant(Tensor::zeros(&[1, s]));
            let broad = g.add(pooled, zeros)?; // [C_aud, S]
            let cat = g.concat(&[f_cs, broad], 0)?; // [C+C_aud, S]
            let catt = g.transpose(cat)?;
            let out = proj.forward(g, ps, catt)?;
            g.transpose(out)
        }
    }
}

// ── blocks ──────────────────────────────────────────────────────────

pub struct BlockOutput {
    /// `[T, C, H, W]` fused feature.
    pub feature: Var,
    /// Location gate `[T, 1, H, W]`, present when the loc branch exists.
    pub gate: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn acf_block_core<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &AcfBlockParams,
    f: Var,
    g_sem: Var,
    g_loc: Var,
    spe_flat: Option<Var>,
    pe_aud: Option<Var>,
) -> Result<BlockOutput> {
    let sh = g.shape(f).to_vec();
    let (t, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if c != params.cfg.c_vis {
        return Err(Error::shape(
            "acf_block",
            format!("feature channels {c} != configured {}", params.cfg.c_vis),
        ));
    }
    let mut f_cs = flatten_clip(g, f)?;
    if let Some(spe) = spe_flat {
        if g.shape(spe) != g.shape(f_cs) {
            return Err(Error::shape(
                "acf_block",
                format!("SPE {:?} vs flattened feature {:?}", g.shape(spe), g.shape(f_cs)),
            ));
        }
        f_cs = g.add(f_cs, spe)?;
    }
    let add_pe = |g: &mut Graph<T>, tokens: Var| -> Result<Var> {
        match pe_aud {
            Some(pe) => g.add(tokens, pe),
            None => Ok(tokens),
        }
    };
    let g_sem_pe = add_pe(g, g_sem)?;
    let g_loc_pe = add_pe(g, g_loc)?;

    let f_sem = mca(g, ps, params, true, f_cs, g_sem_pe, None)?;
    if params.loc.is_none() {
        let feature = unflatten_clip(g, f_sem, t, h, w)?;
        return Ok(BlockOutput { feature, gate: None });
    }
    let f_loc = mca(g, ps, params, false, f_cs, g_loc_pe, None)?;
    let phi_w = ps.bind(g, params.phi_w.expect("loc branch has phi"));
    let phi_b = ps.bind(g, params.phi_b.expect("loc branch has phi"));
    let logits = g.matmul(phi_w, f_loc)?; // [1, S]
    let logits = g.add(logits, phi_b)?;
    let gate = g.sigmoid(logits);
    let f_stu = g.mul(f_sem, gate)?; // broadcast [C,S] * [1,S]
    let feature = unflatten_clip(g, f_stu, t, h, w)?;
    let gate4 = g.reshape(gate, &[t, 1, h, w])?;
    Ok(BlockOutput {
        feature,
        gate: Some(gate4),
    })
}

/// Student ACF block.
pub fn student_block<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &AcfBlockParams,
    f: Var,
    g_sem: Var,
    g_loc: Var,
    spe_flat: Option<Var>,
    pe_aud: Option<Var>,
) -> Result<BlockOutput> {
    acf_block_core(g, ps, params, f, g_sem, g_loc, spe_flat, pe_aud)
}

/// Teacher ACF block: ground truth is average-pooled to the feature
/// resolution and concatenated behind a gradient truncation; a 1x1 adapter
/// absorbs the extra channel, then the structure matches the student.
#[allow(clippy::too_many_arguments)]
pub fn teacher_block<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &AcfBlockParams,
    f: Var,
    gt_masks: Var,
    g_sem: Var,
    g_loc: Var,
    spe_flat: Option<Var>,
    pe_aud: Option<Var>,
) -> Result<BlockOutput> {
    let adapter = params
        .adapter
        .as_ref()
        .ok_or_else(|| Error::invalid("teacher_block", "params were built without an adapter"))?;
    let fsh = g.shape(f).to_vec();
    let gsh = g.shape(gt_masks).to_vec();
    let (t, c, h, w) = (fsh[0], fsh[1], fsh[2], fsh[3]);
    if gsh.len() != 4 || gsh[0] != t || gsh[1] != 1 {
        return Err(Error::shape("teacher_block", format!("gt shape {gsh:?}")));
    }
    if gsh[2] % h != 0 || gsh[3] % w != 0 {
        return Err(Error::shape(
            "teacher_block",
            format!("gt {}x{} not a multiple of feature {}x{}", gsh[2], gsh[3], h, w),
        ));
    }
    // Soft-occupancy downsample of the mask.
    let mut gt = gt_masks;
    if gsh[2] != h {
        gt = g.pool_axis(gt, PoolMode::Avg, 2, gsh[2] / h)?;
    }
    if gsh[3] != w {
        gt = g.pool_axis(gt, PoolMode::Avg, 3, gsh[3] / w)?;
    }
    // Truncate gradients before the multimodal fusion: the teacher must
    // not influence the visual or acoustic encoders.
    let f_detached = g.stop_gradient(f);
    let g_sem = g.stop_gradient(g_sem);
    let g_loc = g.stop_gradient(g_loc);
    let x = g.concat(&[f_detached, gt], 1)?; // [T, C+1, H, W]
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        let xt = g.slice(x, 0, ti, 1)?;
        let xt = g.reshape(xt, &[c + 1, h, w])?;
        let at = adapter.forward(g, ps, xt)?;
        frames.push(g.reshape(at, &[1, c, h, w])?);
    }
    let adapted = g.concat(&frames, 0)?;
    acf_block_core(g, ps, params, adapted, g_sem, g_loc, spe_flat, pe_aud)
}

// ── fuse ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Train,
    Infer,
}

/// Student feature, teacher feature (training only) and the location gate.
pub struct FusionOutput {
    pub f_stu: Var,
    pub f_tch: Option<Var>,
    pub heatmap: Option<Var>,
}

/// Run the fusion module. Training mode requires ground truth and produces
/// both features; inference never executes the teacher (ground truth, if
/// supplied, is ignored with a warning).
#[allow(clippy::too_many_arguments)]
pub fn fuse<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &FusionParams,
    f: Var,
    g_sem: Var,
    g_loc: Var,
    spe_flat: Option<Var>,
    pe_aud: Option<Var>,
    mode: FusionMode,
    gt_masks: Option<Var>,
) -> Result<FusionOutput> {
    let stu = student_block(g, ps, &params.student, f, g_sem, g_loc, spe_flat, pe_aud)?;
    let f_tch = match mode {
        FusionMode::Train => {
            let teacher = params
                .teacher
                .as_ref()
                .ok_or_else(|| Error::invalid("fuse", "train mode without teacher params"))?;
            let gt = gt_masks.ok_or_else(|| Error::invalid("fuse", "train mode requires ground truth"))?;
            let out = teacher_block(g, ps, teacher, f, gt, g_sem, g_loc, spe_flat, pe_aud)?;
            Some(out.feature)
        }
        FusionMode::Infer => {
            if gt_masks.is_some() {
                eprintln!("warning: ground truth supplied in infer mode is ignored");
            }
            None
        }
    };
    Ok(FusionOutput {
        f_stu: stu.feature,
        f_tch,
        heatmap: stu.gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn_tensor;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(33)
    }

    fn tiny_cfg() -> AcfConfig {
        AcfConfig {
            c_vis: 8,
            c_aud: 6,
            heads: 2,
            depth: 1,
            ffn_mult: 2,
            concat_fusion: false,
            loc_branch: true,
        }
    }

    #[test]
    fn flatten_round_trip_and_layout() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_fn(&[2, 3, 2, 4], |i| i as f64);
        let f = g.leaf(t.clone(), true);
        let flat = flatten_clip(&mut g, f).unwrap();
        assert_eq!(g.shape(flat), &[3, 16]);
        // (t, c, h, w) -> flat column t*H*W + h*W + w.
        for (ti, ci, hi, wi) in [(0, 0, 0, 0), (1, 2, 1, 3), (0, 1, 1, 2)] {
            let s = ti * 8 + hi * 4 + wi;
            assert_eq!(g.value(flat).at(&[ci, s]), t.at(&[ti, ci, hi, wi]));
        }
        let back = unflatten_clip(&mut g, flat, 2, 2, 4).unwrap();
        assert_eq!(g.value(back).data(), t.data());

        // T = 1, H = W = 1 degenerates to a C x 1 column.
        let single = g.constant(Tensor::from_fn(&[1, 5, 1, 1], |i| i as f64));
        let col = flatten_clip(&mut g, single).unwrap();
        assert_eq!(g.shape(col), &[5, 1]);
    }

    #[test]
    fn mca_matches_scalar_loop_oracle() {
        let mut r = rng();
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f64>::new();
        let block = AcfBlockParams::build(&mut ps, &mut r, "b", &cfg, false).unwrap();
        let f = randn_tensor::<f64>(&mut r, &[8, 4], 1.0); // C x S, S = 4
        let tok = randn_tensor::<f64>(&mut r, &[6, 3], 1.0); // C_aud x L, L = 3

        let mut g = Graph::<f64>::new();
        let fv = g.constant(f.clone());
        let tv = g.constant(tok.clone());
        let out = mca(&mut g, &ps, &block, true, fv, tv, None).unwrap();
        let got = g.value(out).data().to_vec();

        // Scalar-loop oracle of the whole branch: projections, per-head
        // softmax(K^T Q / sqrt(d)) V, output projection, residual + LN,
        // FFN + residual + LN.
        let get = |n: &str| ps.get(ps.id(n).unwrap()).data().to_vec();
        let wq = get("b.sem.0.mca.wq.w");
        let bq = get("b.sem.0.mca.wq.b");
        let wk = get("b.sem.0.mca.wk.w");
        let bk = get("b.sem.0.mca.wk.b");
        let wv = get("b.sem.0.mca.wv.w");
        let bv = get("b.sem.0.mca.wv.b");
        let wo = get("b.sem.0.mca.wo.w");
        let bo = get("b.sem.0.mca.wo.b");
        let (s, l, c, ca, heads) = (4usize, 3usize, 8usize, 6usize, 2usize);
        let dh = c / heads;
        let matvec = |x: &[f64], w: &[f64], b: &[f64], rows: usize, din: usize, dout: usize| {
            let mut out = vec![0.0; rows * dout];
            for i in 0..rows {
                for j in 0..dout {
                    let mut acc = 0.0;
                    for p in 0..din {
                        acc += x[i * din + p] * w[p * dout + j];
                    }
                    out[i * dout + j] = acc + b[j];
                }
            }
            out
        };
        // Tokens as rows.
        let ft: Vec<f64> = (0..s * c).map(|i| f.data()[(i % c) * s + i / c]).collect();
        let gt: Vec<f64> = (0..l * ca).map(|i| tok.data()[(i % ca) * l + i / ca]).collect();
        let q = matvec(&ft, &wq, &bq, s, c, c);
        let k = matvec(&gt, &wk, &bk, l, ca, c);
        let v = matvec(&gt, &wv, &bv, l, ca, c);
        let mut attn_cat = vec![0.0; s * c];
        for h in 0..heads {
            for si in 0..s {
                let mut scores = vec![0.0; l];
                for li in 0..l {
                    let mut acc = 0.0;
                    for p in 0..dh {
                        acc += q[si * c + h * dh + p] * k[li * c + h * dh + p];
                    }
                    scores[li] = acc / (dh as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for p in 0..dh {
                    let mut acc = 0.0;
                    for li in 0..l {
                        acc += exps[li] / denom * v[li * c + h * dh + p];
                    }
                    attn_cat[si * c + h * dh + p] = acc;
                }
            }
        }
        let attn_o = matvec(&attn_cat, &wo, &bo, s, c, c);
        let ln = |x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, d: usize| {
            let mut out = vec![0.0; rows * d];
            for rI in 0..rows {
                let row = &x[rI * d..(rI + 1) * d];
                let mean: f64 = row.iter().sum::<f64>() / d as f64;
                let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + 1e-5).sqrt();
                for j in 0..d {
                    out[rI * d + j] = gamma[j] * (row[j] - mean) * inv + beta[j];
                }
            }
            out
        };
        let g1 = get("b.sem.0.ln1.gamma");
        let b1 = get("b.sem.0.ln1.beta");
        let res: Vec<f64> = attn_o.iter().zip(&ft).map(|(a, b)| a + b).collect();
        let h1 = ln(&res, &g1, &b1, s, c);
        let w1 = get("b.sem.0.ffn.lin1.w");
        let bb1 = get("b.sem.0.ffn.lin1.b");
        let w2 = get("b.sem.0.ffn.lin2.w");
        let bb2 = get("b.sem.0.ffn.lin2.b");
        let hid = matvec(&h1, &w1, &bb1, s, c, c * 2);
        let hid: Vec<f64> = hid.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let ffn = matvec(&hid, &w2, &bb2, s, c * 2, c);
        let res2: Vec<f64> = ffn.iter().zip(&h1).map(|(a, b)| a + b).collect();
        let g2 = get("b.sem.0.ln2.gamma");
        let b2 = get("b.sem.0.ln2.beta");
        let out_rows = ln(&res2, &g2, &b2, s, c);
        // Transpose back to C x S and compare.
        for ci in 0..c {
            for si in 0..s {
                let expect = out_rows[si * c + ci];
                let gotv = got[ci * s + si];
                assert!(
                    (expect - gotv).abs() <= 1e-12 * expect.abs().max(1.0),
                    "({ci},{si}): {gotv} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn mca_zero_output_projection_ignores_audio() {
        let mut r = rng();
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f64>::new();
        let block = AcfBlockParams::build(&mut ps, &mut r, "b", &cfg, false).unwrap();
        for n in ["b.sem.0.mca.wo.w", "b.sem.0.mca.wo.b"] {
            let id = ps.id(n).unwrap();
            let sh = ps.get(id).shape().to_vec();
            *ps.get_mut(id) = Tensor::zeros(&sh);
        }
        let f = randn_tensor::<f64>(&mut r, &[8, 4], 1.0);
        let run = |tok: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let fv = g.constant(f.clone());
            let tv = g.constant(tok.clone());
            let out = mca(&mut g, &ps, &block, true, fv, tv, None).unwrap();
            g.value(out).data().to_vec()
        };
        let a = run(&randn_tensor::<f64>(&mut r, &[6, 3], 1.0));
        let b = run(&randn_tensor::<f64>(&mut r, &[6, 3], 5.0));
        assert_eq!(a, b);
    }

    #[test]
    fn mca_single_audio_token_uniform_attention() {
        let mut r = rng();
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f64>::new();
        let block = AcfBlockParams::build(&mut ps, &mut r, "b", &cfg, false).unwrap();
        let mut g = Graph::<f64>::new();
        let fv = g.constant(randn_tensor::<f64>(&mut r, &[8, 5], 1.0));
        let tv = g.constant(randn_tensor::<f64>(&mut r, &[6, 1], 1.0));
        let mut probe = Vec::new();
        mca(&mut g, &ps, &block, true, fv, tv, Some(&mut probe)).unwrap();
        assert!(!probe.is_empty());
        for attn in probe {
            assert_eq!(g.shape(attn), &[5, 1]);
            assert!(g.value(attn).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn gate_saturation_identity_and_annihilation() {
        let mut r = rng();
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f64>::new();
        let block = AcfBlockParams::build(&mut ps, &mut r, "b", &cfg, false).unwrap();
        let f = randn_tensor::<f64>(&mut r, &[2, 8, 2, 2], 1.0);
        let sem = randn_tensor::<f64>(&mut r, &[6, 3], 1.0);
        let loc = randn_tensor::<f64>(&mut r, &[6, 3], 1.0);

        let run = |ps: &ParamStore<f64>| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::<f64>::new();
            let fv = g.constant(f.clone());
            let sv = g.constant(sem.clone());
            let lv = g.constant(loc.clone());
            let out = student_block(&mut g, ps, &block, fv, sv, lv, None, None).unwrap();
            let flat = flatten_clip(&mut g, fv).unwrap();
            let sem_only = mca(&mut g, ps, &block, true, flat, sv, None).unwrap();
            let sem_clip = unflatten_clip(&mut g, sem_only, 2, 2, 2).unwrap();
            (
                g.value(out.feature).data().to_vec(),
                g.value(sem_clip).data().to_vec(),
            )
        };

        // phi bias -> +inf: gate saturates to exactly 1.0 in f64.
        let bid = ps.id("b.phi.b").unwrap();
        ps.get_mut(bid).data_mut()[0] = 1000.0;
        let wid = ps.id("b.phi.w").unwrap();
        let wsh = ps.get(wid).shape().to_vec();
        *ps.get_mut(wid) = Tensor::zeros(&wsh);
        let (stu, sem_ref) = run(&ps);
        assert_eq!(stu, sem_ref);

        // phi bias -> -inf: gate underflows to exactly 0.
        ps.get_mut(bid).data_mut()[0] = -1000.0;
        let (stu, _) = run(&ps);
        assert!(stu.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_keeps_magnitude_bounded() {
        let mut r = rng();
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f64>::new();
        let block = AcfBlockParams::build(&mut ps, &mut r, "b", &cfg, false).unwrap();
        let mut g = Graph::<f64>::new();
        let fv = g.constant(randn_tensor::<f64>(&mut r, &[2, 8, 2, 2], 1.0));
        let sv = g.constant(randn_tensor::<f64>(&mut r, &[6, 3], 1.0));
        let lv = g.constant(randn_tensor::<f64>(&mut r, &[6, 3], 1.0));
        let out = student_block(&mut g, &ps, &block, fv, sv, lv, None, None).unwrap();
        let flat = flatten_clip(&mut g, fv).unwrap();
        let sem = mca(&mut g, &ps, &block, true, flat, sv, None).unwrap();
        let sem_clip = unflatten_clip(&mut g, sem, 2, 2, 2).unwrap();
        let gate = g.value(out.gate.unwrap());
        assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for (a, b) in g.value(out.feature).data().iter().zip(g.value(sem_clip).data()) {
            assert!(a.abs() <= b.abs() + 1e-15);
        }
    }

    #[test]
    fn student_block_gradient_check() {
        use crate::gradcheck::grad_check;
        let mut r = rng();
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f64>::new();
        let block = AcfBlockParams::build(&mut ps, &mut r, "b", &cfg, false).unwrap();
        let sem = randn_tensor::<f64>(&mut r, &[6, 3], 1.0);
        let loc = randn_tensor::<f64>(&mut r, &[6, 3], 1.0);
        let x0 = randn_tensor::<f64>(&mut r, &[2, 8, 2, 2], 1.0);
        let psr = std::rc::Rc::new(ps);
        let report = grad_check(
            {
                let ps = psr.clone();
                let sem = sem.clone();
                let loc = loc.clone();
                move |g, x| {
                    let sv = g.constant(sem.clone());
                    let lv = g.constant(loc.clone());
                    let out = student_block(g, &ps, &block, x, sv, lv, None, None).unwrap();
                    let sq = g.mul(out.feature, out.feature).unwrap();
                    g.sum_all(sq)
                }
            },
            &x0,
            1e-5,
            1e-4,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn teacher_gradient_wall() {
        let mut r = rng();
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f64>::new();
        let fp = FusionParams::build(&mut ps, &mut r, &cfg, true).unwrap();
        let x0 = randn_tensor::<f64>(&mut r, &[2, 8, 2, 2], 1.0);
        let sem = randn_tensor::<f64>(&mut r, &[6, 3], 1.0);
        let loc = randn_tensor::<f64>(&mut r, &[6, 3], 1.0);
        let gt = Tensor::from_fn(&[2, 1, 4, 4], |i| f64::from(i % 3 == 0));

        // Loss on the teacher feature only: the visual feature must get no
        // gradient, while teacher params do.
        let mut g = Graph::<f64>::new();
        let f = g.leaf(x0.clone(), true);
        let sv = g.constant(sem.clone());
        let lv = g.constant(loc.clone());
        let gtv = g.constant(gt.clone());
        let out = teacher_block(&mut g, &ps, fp.teacher.as_ref().unwrap(), f, gtv, sv, lv, None, None).unwrap();
        let sq = g.mul(out.feature, out.feature).unwrap();
        let l = g.sum_all(sq);
        g.backward(l).unwrap();
        assert!(g.grad(f).is_none(), "visual feature must sit behind the gradient wall");
        let teacher_grads: usize = g.bound_grads().count();
        assert!(teacher_grads > 0, "teacher params should receive gradients");

        // Loss on the student feature: the visual feature gradient is live.
        let mut g = Graph::<f64>::new();
        let f = g.leaf(x0, true);
        let sv = g.constant(sem);
        let lv = g.constant(loc);
        let out = student_block(&mut g, &ps, &fp.student, f, sv, lv, None, None).unwrap();
        let sq = g.mul(out.feature, out.feature).unwrap();
        let l = g.sum_all(sq);
        g.backward(l).unwrap();
        assert!(g.grad(f).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pseudo_siamese_structural_equality() {
        let mut r = rng();
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f64>::new();
        let fp = FusionParams::build(&mut ps, &mut r, &cfg, true).unwrap();
        // Copy student params onto the teacher by name.
        for id in ps.ids().collect::<Vec<_>>() {
            let name = ps.name(id).to_string();
            if let Some(suffix) = name.strip_prefix("fusion.student.") {
                let tname = format!("fusion.teacher.{suffix}");
                if let Some(tid) = ps.id(&tname) {
                    let val = ps.get(id).clone();
                    *ps.get_mut(tid) = val;
                    ps.get_mut(tid).requires_grad = true;
                }
            }
        }
        // Adapter: identity on the C channels, zero weight on the GT channel.
        let teacher = fp.teacher.as_ref().unwrap();
        let aid = teacher.adapter.as_ref().unwrap().w;
        let c = cfg.c_vis;
        let mut w = Tensor::<f64>::zeros(&[c, c + 1, 1, 1]);
        for i in 0..c {
            w.set(&[i, i, 0, 0], 1.0);
        }
        w.requires_grad = true;
        *ps.get_mut(aid) = w;

        let mut g = Graph::<f64>::new();
        let f = g.constant(randn_tensor::<f64>(&mut r, &[2, 8, 2, 2], 1.0));
        let sv = g.constant(randn_tensor::<f64>(&mut r, &[6, 3], 1.0));
        let lv = g.constant(randn_tensor::<f64>(&mut r, &[6, 3], 1.0));
        let gt = g.constant(Tensor::zeros(&[2, 1, 4, 4]));
        let s_out = student_block(&mut g, &ps, &fp.student, f, sv, lv, None, None).unwrap();
        let t_out = teacher_block(&mut g, &ps, teacher, f, gt, sv, lv, None, None).unwrap();
        assert_eq!(g.shape(s_out.feature), g.shape(t_out.feature));
        for (a, b) in g
            .value(s_out.feature)
            .data()
            .iter()
            .zip(g.value(t_out.feature).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_modes() {
        let mut r = rng();
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f64>::new();
        let fp = FusionParams::build(&mut ps, &mut r, &cfg, true).unwrap();
        let f = randn_tensor::<f64>(&mut r, &[2, 8, 2, 2], 1.0);
        let sem = randn_tensor::<f64>(&mut r, &[6, 3], 1.0);
        let loc = randn_tensor::<f64>(&mut r, &[6, 3], 1.0);
        let gt = Tensor::from_fn(&[2, 1, 2, 2], |i| f64::from(i % 2 == 0));

        let run = |mode: FusionMode, with_gt: bool| {
            let mut g = Graph::<f64>::new();
            let fv = g.constant(f.clone());
            let sv = g.constant(sem.clone());
            let lv = g.constant(loc.clone());
            let gtv = with_gt.then(|| g.constant(gt.clone()));
            let out = fuse(&mut g, &ps, &fp, fv, sv, lv, None, None, mode, gtv).unwrap();
            (
                g.value(out.f_stu).data().to_vec(),
                out.f_tch.map(|v| g.value(v).data().to_vec()),
            )
        };
        let (stu_train, tch_train) = run(FusionMode::Train, true);
        let (stu_infer, tch_infer) = run(FusionMode::Infer, false);
        assert_eq!(stu_train, stu_infer);
        assert!(tch_train.is_some());
        assert!(tch_infer.is_none());

        // Train mode without ground truth is an error.
        let mut g = Graph::<f64>::new();
        let fv = g.constant(f.clone());
        let sv = g.constant(sem.clone());
        let lv = g.constant(loc.clone());
        assert!(fuse(&mut g, &ps, &fp, fv, sv, lv, None, None, FusionMode::Train, None).is_err());
    }

    #[test]
    fn concat_fusion_and_no_loc_variants() {
        let mut r = rng();
        let mut cfg = tiny_cfg();
        cfg.concat_fusion = true;
        let mut ps = ParamStore::<f64>::new();
        let block = AcfBlockParams::build(&mut ps, &mut r, "b", &cfg, false).unwrap();
        let mut g = Graph::<f64>::new();
        let fv = g.constant(randn_tensor::<f64>(&mut r, &[2, 8, 2, 2], 1.0));
        let sv = g.constant(randn_tensor::<f64>(&mut r, &[6, 3], 1.0));
        let lv = g.constant(randn_tensor::<f64>(&mut r, &[6, 3], 1.0));
        let out = student_block(&mut g, &ps, &block, fv, sv, lv, None, None).unwrap();
        assert_eq!(g.shape(out.feature), &[2, 8, 2, 2]);

        let mut cfg2 = tiny_cfg();
        cfg2.loc_branch = false;
        let mut ps2 = ParamStore::<f64>::new();
        let block2 = AcfBlockParams::build(&mut ps2, &mut r, "b", &cfg2, false).unwrap();
        let mut g2 = Graph::<f64>::new();
        let fv = g2.constant(randn_tensor::<f64>(&mut r, &[2, 8, 2, 2], 1.0));
        let sv = g2.constant(randn_tensor::<f64>(&mut r, &[6, 3], 1.0));
        let lv = g2.constant(randn_tensor::<f64>(&mut r, &[6, 3], 1.0));
        let out2 = student_block(&mut g2, &ps2, &block2, fv, sv, lv, None, None).unwrap();
        assert!(out2.gate.is_none());
        assert!(ps2.id("b.phi.w").is_none());
    }

    #[test]
    fn spe_injection_changes_content_not_shape() {
        let mut r = rng();
        let cfg = AcfConfig {
            c_vis: 12,
            ..tiny_cfg()
        };
        let mut ps = ParamStore::<f64>::new();
        let block = AcfBlockParams::build(&mut ps, &mut r, "b", &cfg, false).unwrap();
        let grid = crate::geometry::ErGrid::from_width(4).unwrap();
        let table = crate::geometry::build_spe_table(grid, 12).unwrap();
        let spe_t = spe_to_flat::<f64>(&table, 2);
        assert_eq!(spe_t.shape(), &[12, 2 * 2 * 4]);
        let f = randn_tensor::<f64>(&mut r, &[2, 12, 2, 4], 1.0);
        let sem = randn_tensor::<f64>(&mut r, &[6, 3], 1.0);
        let loc = randn_tensor::<f64>(&mut r, &[6, 3], 1.0);
        let run = |with_spe: bool| {
            let mut g = Graph::<f64>::new();
            let fv = g.constant(f.clone());
            let sv = g.constant(sem.clone());
            let lv = g.constant(loc.clone());
            let spe = with_spe.then(|| g.constant(spe_t.clone()));
            let out = student_block(&mut g, &ps, &block, fv, sv, lv, spe, None).unwrap();
            (g.shape(out.feature).to_vec(), g.value(out.feature).data().to_vec())
        };
        let (sh_a, val_a) = run(true);
        let (sh_b, val_b) = run(false);
        assert_eq!(sh_a, sh_b);
        assert_ne!(val_a, val_b);
    }
}
