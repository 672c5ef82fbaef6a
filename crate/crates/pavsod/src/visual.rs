//! Visual encoder and decoder.
//!
//! A 4-stage conv backbone (each stage: stride-2 conv, relu, conv, relu)
//! yields a pyramid at strides 2/4/8/16. The deepest level is flattened
//! into tokens for a pre-norm transformer encoder, then a temporal
//! non-local block lets the T frames of a clip interact. The decoder is a
//! small FPN: 1x1-projected skips plus 2x nearest-upsampled deeper maps
//! with 3x3 smoothing, a 1-channel head at stride 4 and a final 4x
//! upsample back to input resolution.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct VisualConfig {
    /// Channel widths of the four backbone stages (strides 2, 4, 8, 16).
    pub widths: [usize; 4],
    pub tf_layers: usize,
    pub tf_heads: usize,
    pub ffn_mult: usize,
    /// FPN decoder width.
    pub decoder_width: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        VisualConfig {
            widths: [16, 32, 64, 96],
            tf_layers: 3,
            tf_heads: 4,
            ffn_mult: 2,
            decoder_width: 48,
        }
    }
}

impl VisualConfig {
    pub fn feature_channels(&self) -> usize {
        self.widths[3]
    }
}

/// Per-frame feature pyramid, shallow (stride 2) to deep (stride 16).
pub struct FramePyramid {
    pub levels: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    stages: Vec<(Conv2d, Conv2d)>,
}

impl BackboneParams {
    pub fn build<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &VisualConfig,
    ) -> Self {
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let down = Conv2d::new(ps, rng, &format!("{prefix}.stage{i}.down"), c_in, w, 3, 2, true);
            let conv = Conv2d::new(ps, rng, &format!("{prefix}.stage{i}.conv"), w, w, 3, 1, true);
            stages.push((down, conv));
            c_in = w;
        }
        BackboneParams { stages }
    }
}

/// Run one ER frame `[3, H, W]` (H = W/2, both divisible by 16) through the
/// backbone, collecting all four pyramid levels.
pub fn backbone_forward<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &BackboneParams,
    frame: Var,
) -> Result<FramePyramid> {
    let sh = g.shape(frame).to_vec();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::shape("backbone", format!("expected [3,H,W], got {sh:?}")));
    }
    let (h, w) = (sh[1], sh[2]);
    if w != 2 * h || h % 16 != 0 {
        return Err(Error::invalid(
            "backbone",
            format!("need W = 2H with H divisible by 16, got {h}x{w}"),
        ));
    }
    let mut x = frame;
    let mut levels = Vec::with_capacity(4);
    for (down, conv) in &params.stages {
        let y = down.forward(g, ps, x)?;
        let y = g.relu(y);
        let y = conv.forward(g, ps, y)?;
        x = g.relu(y);
        levels.push(x);
    }
    Ok(FramePyramid { levels })
}

// ── transformer encoder ─────────────────────────────────────────────

#[derive(Debug, Clone)]
struct TfLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct TransformerParams {
    layers: Vec<TfLayer>,
}

impl TransformerParams {
    pub fn build<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..n_layers {
            layers.push(TfLayer {
                ln1: LayerNorm::new(ps, &format!("{prefix}.l{i}.ln1"), d_model),
                attn: MultiHeadAttention::new(ps, rng, &format!("{prefix}.l{i}.attn"), d_model, d_model, n_heads)?,
                ln2: LayerNorm::new(ps, &format!("{prefix}.l{i}.ln2"), d_model),
                ffn: FeedForward::new(ps, rng, &format!("{prefix}.l{i}.ffn"), d_model, d_model * ffn_mult),
            });
        }
        Ok(TransformerParams { layers })
    }
}

/// Pre-norm self-attention stack over `[S, C]` tokens. Zero layers is the
/// identity; positional encodings are the caller's concern.
pub fn transformer_encoder<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &TransformerParams,
    tokens: Var,
) -> Result<Var> {
    let mut x = tokens;
    for layer in &params.layers {
        let n = layer.ln1.forward(g, ps, x)?;
        let a = layer.attn.forward(g, ps, n, n, None)?;
        x = g.add(x, a)?;
        let n = layer.ln2.forward(g, ps, x)?;
        let f = layer.ffn.forward(g, ps, n)?;
        x = g.add(x, f)?;
    }
    Ok(x)
}

// ── temporal non-local block ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct NonLocalParams {
    theta: Linear,
    phi: Linear,
    gproj: Linear,
    out: Linear,
    inter: usize,
}

impl NonLocalParams {
    /// Embedded-Gaussian non-local block; the output projection starts at
    /// zero so the block is the identity at init.
    pub fn build<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
    ) -> Self {
        let inter = (channels / 2).max(1);
        let theta = Linear::new(ps, rng, &format!("{prefix}.theta"), channels, inter, false);
        let phi = Linear::new(ps, rng, &format!("{prefix}.phi"), channels, inter, false);
        let gproj = Linear::new(ps, rng, &format!("{prefix}.g"), channels, inter, false);
        let out = Linear::new(ps, rng, &format!("{prefix}.out"), inter, channels, true);
        let w = ps.get_mut(out.w);
        let sh = w.shape().to_vec();
        *w = Tensor::zeros(&sh);
        NonLocalParams {
            theta,
            phi,
            gproj,
            out,
            inter,
        }
    }
}

/// Residual attention across every spatio-temporal position of a
/// `[T, C, H, W]` clip feature.
pub fn temporal_nonlocal<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &NonLocalParams,
    f: Var,
) -> Result<Var> {
    let sh = g.shape(f).to_vec();
    if sh.len() != 4 {
        return Err(Error::shape("temporal_nonlocal", format!("expected [T,C,H,W], got {sh:?}")));
    }
    let (t, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let s = t * h * w;
    let tokens = g.permute(f, &[0, 2, 3, 1])?;
    let tokens = g.reshape(tokens, &[s, c])?;
    let q = params.theta.forward(g, ps, tokens)?;
    let k = params.phi.forward(g, ps, tokens)?;
    let v = params.gproj.forward(g, ps, tokens)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (params.inter as f64).sqrt()));
    let attn = g.softmax(scores, 1)?;
    let y = g.matmul(attn, v)?;
    let y = params.out.forward(g, ps, y)?;
    let z = g.add(tokens, y)?;
    let z = g.reshape(z, &[t, h, w, c])?;
    g.permute(z, &[0, 3, 1, 2])
}

// ── FPN decoder ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DecoderParams {
    proj_top: Conv2d,
    lat8: Conv2d,
    smooth8: Conv2d,
    lat4: Conv2d,
    smooth4: Conv2d,
    head: Conv2d,
}

impl DecoderParams {
    pub fn build<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &VisualConfig,
    ) -> Self {
        let d = cfg.decoder_width;
        let c = cfg.feature_channels();
        let proj_top = Conv2d::new(ps, rng, &format!("{prefix}.proj_top"), c, d, 1, 1, true);
        let lat8 = Conv2d::new(ps, rng, &format!("{prefix}.lat8"), cfg.widths[2], d, 1, 1, true);
        let smooth8 = Conv2d::new(ps, rng, &format!("{prefix}.smooth8"), d, d, 3, 1, true);
        let lat4 = Conv2d::new(ps, rng, &format!("{prefix}.lat4"), cfg.widths[1], d, 1, 1, true);
        let smooth4 = Conv2d::new(ps, rng, &format!("{prefix}.smooth4"), d, d, 3, 1, true);
        let head = Conv2d::new(ps, rng, &format!("{prefix}.head"), d, 1, 1, 1, true);
        // Bias the head toward background; masks are sparse.
        if let Some(b) = head.b {
            ps.get_mut(b).data_mut()[0] = T::from_f64(-2.0);
        }
        DecoderParams {
            proj_top,
            lat8,
            smooth8,
            lat4,
            smooth4,
            head,
        }
    }
}

/// Decode fused clip features `[T, C, H, W]` (stride 16) with per-frame
/// pyramid skips into logits `[T, 1, H_o, W_o]` at input resolution.
pub fn fpn_decode<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &DecoderParams,
    fused: Var,
    skips: &[FramePyramid],
) -> Result<Var> {
    let sh = g.shape(fused).to_vec();
    if sh.len() != 4 {
        return Err(Error::shape("fpn_decode", format!("expected [T,C,H,W], got {sh:?}")));
    }
    let t_frames = sh[0];
    if skips.len() != t_frames {
        return Err(Error::shape(
            "fpn_decode",
            format!("{} skip pyramids for {t_frames} frames", skips.len()),
        ));
    }
    let (c, h, w) = (sh[1], sh[2], sh[3]);
    let mut frames_out = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let f_t = g.slice(fused, 0, t, 1)?;
        let f_t = g.reshape(f_t, &[c, h, w])?;
        let mut x = params.proj_top.forward(g, ps, f_t)?;
        for (lat, smooth, level) in [
            (&params.lat8, &params.smooth8, 2usize),
            (&params.lat4, &params.smooth4, 1usize),
        ] {
            let up = g.upsample2d(x, 2)?;
            let skip = lat.forward(g, ps, skips[t].levels[level])?;
            if g.shape(up) != g.shape(skip) {
                return Err(Error::shape(
                    "fpn_decode",
                    format!("skip {:?} vs upsampled {:?}", g.shape(skip), g.shape(up)),
                ));
            }
            let merged = g.add(up, skip)?;
            let smoothed = smooth.forward(g, ps, merged)?;
            x = g.relu(smoothed);
        }
        let logits = params.head.forward(g, ps, x)?;
        // Bilinear here: nearest would quantize the mask boundary to 4x4
        // blocks, capping the achievable overlap on small objects.
        let up = g.upsample2d_bilinear(logits, 4)?;
        let ush = g.shape(up).to_vec();
        frames_out.push(g.reshape(up, &[1, 1, ush[1], ush[2]])?);
    }
    g.concat(&frames_out, 0)
}
