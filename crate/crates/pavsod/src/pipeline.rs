//! End-to-end model assembly, training, inference and evaluation.
//!
//! Frames go through the conv backbone, a transformer encoder on the
//! deepest level and the temporal non-local block; the fusion module mixes
//! in the acoustic embeddings (student + teacher blocks during training);
//! two FPN decoders produce the per-frame masks. The acoustic encoder is
//! frozen by default (`unfreeze_audio` lifts that), and the teacher branch
//! is walled off from the encoders: its block stops the feature gradient
//! and its decoder sees detached skips, so teacher losses touch only
//! teacher parameters.
//!
//! Every component seeds its own RNG stream from the config seed, so
//! toggling one ablation flag never shifts another component's init.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acoustic::{
    extract_embeddings, stft_features, SeldConfig, SeldParams, SpectroFeatures,
};
use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fusion::{fuse, spe_to_flat, FusionMode, FusionParams};
use crate::geometry::{sinusoidal_pe_1d, spe_table_cached, ErGrid};
use crate::image_io::GrayImage;
use crate::nn::{ParamId, ParamStore};
use crate::objective::{distill_loss, structure_loss, total_loss, LossReport, LossWeights};
use crate::optim::{AdamW, GradAccum};
use crate::synth::{load_clip, ClipSample, Manifest, ManifestEntry};
use crate::tensor::{Real, Tensor};
use crate::visual::{
    backbone_forward, fpn_decode, temporal_nonlocal, transformer_encoder, BackboneParams,
    DecoderParams, FramePyramid, NonLocalParams, TransformerParams, VisualConfig,
};

fn component_rng(seed: u64, component: &str) -> ChaCha8Rng {
    // FNV-1a over the component name; decouples init streams so ablation
    // flags do not shift other components' draws.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in component.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// All parameter handles of the assembled model.
pub struct Model {
    pub cfg: Config,
    pub backbone: BackboneParams,
    pub transformer: TransformerParams,
    pub temporal: NonLocalParams,
    pub seld: Option<SeldParams>,
    pub fusion: Option<FusionParams>,
    pub dec_student: DecoderParams,
    pub dec_teacher: Option<DecoderParams>,
}

impl Model {
    pub fn visual_config(cfg: &Config) -> VisualConfig {
        VisualConfig {
            widths: cfg.widths,
            tf_layers: cfg.tf_layers,
            tf_heads: cfg.tf_heads,
            ffn_mult: cfg.ffn_mult,
            decoder_width: cfg.decoder_width,
        }
    }

    pub fn seld_config(cfg: &Config) -> Result<SeldConfig> {
        Ok(SeldConfig {
            m_dft: cfg.m_dft,
            conv_filters: cfg.conv_filters,
            pool_schedule: cfg.pool_schedule()?,
            gru_hidden: cfg.gru_hidden,
            fc_width: cfg.fc_width,
            n_classes: cfg.n_classes,
        })
    }

    pub fn acf_config(cfg: &Config) -> crate::fusion::AcfConfig {
        crate::fusion::AcfConfig {
            c_vis: cfg.feature_channels(),
            c_aud: cfg.fc_width,
            heads: cfg.fusion_heads,
            depth: cfg.fusion_depth,
            ffn_mult: cfg.ffn_mult,
            concat_fusion: cfg.concat_fusion,
            loc_branch: !cfg.no_loc_branch,
        }
    }

    pub fn build<T: Real>(ps: &mut ParamStore<T>, cfg: &Config) -> Result<Model> {
        cfg.validate()?;
        let vcfg = Self::visual_config(cfg);
        let backbone = BackboneParams::build(
            ps,
            &mut component_rng(cfg.seed, "visual.backbone"),
            "visual.backbone",
            &vcfg,
        );
        let transformer = TransformerParams::build(
            ps,
            &mut component_rng(cfg.seed, "visual.tf"),
            "visual.tf",
            cfg.feature_channels(),
            cfg.tf_layers,
            cfg.tf_heads,
            cfg.ffn_mult,
        )?;
        let temporal = NonLocalParams::build(
            ps,
            &mut component_rng(cfg.seed, "visual.nonlocal"),
            "visual.nonlocal",
            cfg.feature_channels(),
        );
        let with_audio = !cfg.no_audio;
        let seld = if with_audio {
            let params = SeldParams::build(
                ps,
                &mut component_rng(cfg.seed, "acoustic"),
                "acoustic",
                &Self::seld_config(cfg)?,
            )?;
            if !cfg.unfreeze_audio {
                ps.set_trainable_prefix("acoustic.", false);
            }
            Some(params)
        } else {
            None
        };
        let fusion = if with_audio {
            Some(FusionParams::build(
                ps,
                &mut component_rng(cfg.seed, "fusion"),
                &Self::acf_config(cfg),
                !cfg.no_teacher,
            )?)
        } else {
            None
        };
        let dec_student = DecoderParams::build(
            ps,
            &mut component_rng(cfg.seed, "dec.student"),
            "dec.student",
            &vcfg,
        );
        let dec_teacher = if with_audio && !cfg.no_teacher {
            Some(DecoderParams::build(
                ps,
                &mut component_rng(cfg.seed, "dec.teacher"),
                "dec.teacher",
                &vcfg,
            ))
        } else {
            None
        };
        Ok(Model {
            cfg: cfg.clone(),
            backbone,
            transformer,
            temporal,
            seld,
            fusion,
            dec_student,
            dec_teacher,
        })
    }

    pub fn has_teacher(&self) -> bool {
        self.dec_teacher.is_some()
    }
}

/// Preprocessed clip ready for the tape: normalized frames, 0/1 masks,
/// spectrogram features (absent under the no-audio ablation).
pub struct ClipTensors<T: Real> {
    pub frames: Vec<Tensor<T>>,
    pub gt: Tensor<T>,
    pub feat: Option<SpectroFeatures<T>>,
}

pub fn prepare_clip<T: Real>(cfg: &Config, clip: &ClipSample) -> Result<ClipTensors<T>> {
    if clip.frames.len() != cfg.frames {
        return Err(Error::ConfigMismatch(format!(
            "clip has {} frames, config expects {}",
            clip.frames.len(),
            cfg.frames
        )));
    }
    let (w, h) = (cfg.width, cfg.height());
    let mut frames = Vec::with_capacity(cfg.frames);
    for img in &clip.frames {
        if img.width != w || img.height != h {
            return Err(Error::ConfigMismatch(format!(
                "frame {}x{} vs config {}x{}",
                img.width, img.height, w, h
            )));
        }
        let mut data = vec![T::zero(); 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let [r, g, b] = img.get(x, y);
                data[y * w + x] = T::from_f64(f64::from(r) / 255.0);
                data[h * w + y * w + x] = T::from_f64(f64::from(g) / 255.0);
                data[2 * h * w + y * w + x] = T::from_f64(f64::from(b) / 255.0);
            }
        }
        frames.push(Tensor::new(vec![3, h, w], data)?);
    }
    let mut gt = Tensor::zeros(&[cfg.frames, 1, h, w]);
    for (t, mask) in clip.masks.iter().enumerate() {
        if mask.width != w || mask.height != h {
            return Err(Error::ConfigMismatch("mask resolution mismatch".into()));
        }
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) > 127 {
                    gt.set(&[t, 0, y, x], T::one());
                }
            }
        }
    }
    let feat = if cfg.no_audio {
        None
    } else {
        let audio = if cfg.mono { clip.audio.to_mono() } else { clip.audio.clone() };
        Some(stft_features(&audio, cfg.m_dft)?)
    };
    Ok(ClipTensors { frames, gt, feat })
}

/// Everything a loss or an inspection needs from one forward pass.
pub struct ForwardOutput {
    pub logits_stu: Var,
    pub logits_tch: Option<Var>,
    pub f_stu: Var,
    pub f_tch: Option<Var>,
    /// Location gate at feature resolution, `[T, 1, h, w]`.
    pub heatmap: Option<Var>,
}

pub fn model_forward<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    model: &Model,
    clip: &ClipTensors<T>,
    mode: FusionMode,
) -> Result<ForwardOutput> {
    let cfg = &model.cfg;
    let c = cfg.feature_channels();
    let mut pyramids = Vec::with_capacity(cfg.frames);
    let mut deep_frames = Vec::with_capacity(cfg.frames);
    let (mut fh, mut fw) = (0usize, 0usize);
    for frame in &clip.frames {
        let fv = g.constant(frame.clone());
        let pyr = backbone_forward(g, ps, &model.backbone, fv)?;
        let deep = pyr.levels[3];
        let dsh = g.shape(deep).to_vec();
        (fh, fw) = (dsh[1], dsh[2]);
        // [C, h, w] -> [h*w, C] tokens with a raster or spherical PE.
        let tokens = g.permute(deep, &[1, 2, 0])?;
        let tokens = g.reshape(tokens, &[fh * fw, c])?;
        let pe = if cfg.visual_spe {
            let grid = ErGrid::new(fw, fh)?;
            let table = spe_table_cached(grid, c)?;
            let flat: Vec<f64> = table.data().to_vec();
            Tensor::<T>::from_f64_slice(&[fh * fw, c], &flat)?
        } else {
            let pe64 = sinusoidal_pe_1d(fh * fw, c)?;
            Tensor::<T>::from_f64_slice(&[fh * fw, c], pe64.data())?
        };
        let pev = g.constant(pe);
        let tokens = g.add(tokens, pev)?;
        let enc = transformer_encoder(g, ps, &model.transformer, tokens)?;
        let back = g.reshape(enc, &[fh, fw, c])?;
        let back = g.permute(back, &[2, 0, 1])?;
        deep_frames.push(g.reshape(back, &[1, c, fh, fw])?);
        pyramids.push(pyr);
    }
    let f_prime = g.concat(&deep_frames, 0)?;
    let f = temporal_nonlocal(g, ps, &model.temporal, f_prime)?;

    let (f_stu, f_tch, heatmap) = match (&model.fusion, &model.seld, &clip.feat) {
        (Some(fusion), Some(seld), Some(feat)) => {
            let emb = extract_embeddings(g, ps, seld, feat)?;
            let l = feat.frames;
            let pe_aud = {
                let pe = sinusoidal_pe_1d(l, cfg.fc_width)?;
                let t = Tensor::<T>::from_f64_slice(&[l, cfg.fc_width], pe.data())?;
                let v = g.constant(t);
                g.transpose(v)? // [C_e, L]
            };
            let spe_flat = if cfg.no_spe {
                None
            } else {
                let grid = ErGrid::new(fw, fh)?;
                let table = spe_table_cached(grid, c)?;
                Some(g.constant(spe_to_flat::<T>(&table, cfg.frames)))
            };
            let gt_var = match mode {
                FusionMode::Train => Some(g.constant(clip.gt.clone())),
                FusionMode::Infer => None,
            };
            let out = fuse(
                g,
                ps,
                fusion,
                f,
                emb.g_sem,
                emb.g_loc,
                spe_flat,
                Some(pe_aud),
                mode,
                gt_var,
            )?;
            (out.f_stu, out.f_tch, out.heatmap)
        }
        _ => (f, None, None),
    };

    let logits_stu = fpn_decode(g, ps, &model.dec_student, f_stu, &pyramids)?;
    let logits_tch = match (f_tch, &model.dec_teacher) {
        (Some(ft), Some(dec)) => {
            // The teacher decoder must not leak gradients into the encoder
            // through the skip connections.
            let detached: Vec<FramePyramid> = pyramids
                .iter()
                .map(|p| FramePyramid {
                    levels: p.levels.iter().map(|&l| g.stop_gradient(l)).collect(),
                })
                .collect();
            Some(fpn_decode(g, ps, dec, ft, &detached)?)
        }
        _ => None,
    };
    Ok(ForwardOutput {
        logits_stu,
        logits_tch,
        f_stu,
        f_tch,
        heatmap,
    })
}

/// Assemble the training loss for one clip.
pub fn clip_loss<T: Real>(
    g: &mut Graph<T>,
    out: &ForwardOutput,
    gt: &Tensor<T>,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let gt_var = g.constant(gt.clone());
    clip_loss_from(g, out, gt_var, weights)
}

/// Same as [`clip_loss`] with the ground truth already on the tape.
pub fn clip_loss_from<T: Real>(
    g: &mut Graph<T>,
    out: &ForwardOutput,
    gt_var: Var,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let l_stu = structure_loss(g, out.logits_stu, gt_var, weights.lambda_dice)?;
    let (l_tch, l_dis) = match (out.logits_tch, out.f_tch) {
        (Some(lt), Some(ft)) => {
            let l_tch = structure_loss(g, lt, gt_var, weights.lambda_dice)?;
            let target = g.stop_gradient(ft);
            let l_dis = distill_loss(g, out.f_stu, target)?;
            (Some(l_tch), Some(l_dis))
        }
        _ => (None, None),
    };
    total_loss(g, l_stu, l_tch, l_dis, weights)
}

// ── training ────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log: Vec<String>,
    pub steps_run: usize,
}

pub struct LoadedClip<T: Real> {
    pub tensors: ClipTensors<T>,
    pub sample: ClipSample,
}

pub fn load_entries<T: Real>(cfg: &Config, entries: &[&ManifestEntry]) -> Result<Vec<LoadedClip<T>>> {
    entries
        .iter()
        .map(|e| {
            let sample = load_clip(&e.dir)?;
            let tensors = prepare_clip(cfg, &sample)?;
            Ok(LoadedClip { tensors, sample })
        })
        .collect()
}

/// Train on the manifest's train split. `acoustic_from` preloads pretrained
/// acoustic weights (matched by name). Emits one tab-separated log line per
/// step: `step loss l_stu l_tch l_distill`.
pub fn train<T: Real>(
    cfg: &Config,
    manifest: &Manifest,
    out_dir: &Path,
    acoustic_from: Option<&Path>,
    quiet: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let train_entries = manifest.train();
    if train_entries.is_empty() {
        return Err(Error::invalid("train", "manifest has no training clips"));
    }
    let clips: Vec<LoadedClip<T>> = load_entries(cfg, &train_entries)?;

    let mut ps = ParamStore::<T>::new();
    let model = Model::build(&mut ps, cfg)?;
    if let Some(path) = acoustic_from {
        if model.seld.is_some() {
            let ck = Checkpoint::<T>::load(path)?;
            let mut loaded = 0usize;
            let map = ck.tensor_map();
            for id in ps.ids().collect::<Vec<_>>() {
                let name = ps.name(id).to_string();
                if !name.starts_with("acoustic.") {
                    continue;
                }
                let t = map.get(name.as_str()).ok_or_else(|| {
                    Error::ConfigMismatch(format!("acoustic checkpoint missing {name}"))
                })?;
                if t.shape() != ps.get(id).shape() {
                    return Err(Error::ConfigMismatch(format!(
                        "acoustic parameter {name}: {:?} vs {:?}",
                        t.shape(),
                        ps.get(id).shape()
                    )));
                }
                let rq = ps.get(id).requires_grad;
                *ps.get_mut(id) = (*t).clone();
                ps.get_mut(id).requires_grad = rq;
                loaded += 1;
            }
            if loaded == 0 {
                return Err(Error::ConfigMismatch(
                    "acoustic checkpoint contained no acoustic.* tensors".into(),
                ));
            }
        }
    }

    let weights = LossWeights {
        lambda_distill: cfg.lambda_distill,
        lambda_dice: cfg.lambda_dice,
    };
    let mut opt = AdamW::new(&ps, cfg.lr, cfg.weight_decay);
    let mut order_rng = component_rng(cfg.seed, "train.order");
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let ckpt_path = out_dir.join("model.ckpt");

    for step in 0..cfg.steps {
        let mut grads = GradAccum::new(&ps);
        let mut batch_report = LossReport::new(0.0, 0.0, 0.0, &weights);
        for _ in 0..cfg.batch {
            if order.is_empty() {
                order = (0..clips.len()).collect();
                for i in (1..order.len()).rev() {
                    let j = order_rng.random_range(0..=i);
                    order.swap(i, j);
                }
            }
            let ci = order.pop().expect("refilled order");
            let mut g = Graph::<T>::new();
            let out = model_forward(&mut g, &ps, &model, &clips[ci].tensors, FusionMode::Train)?;
            let (loss, report) = clip_loss(&mut g, &out, &clips[ci].tensors.gt, &weights).map_err(|e| {
                match e {
                    Error::Diverged { detail, .. } => {
                        // Keep the last good parameters on disk for diagnosis.
                        let _ = Checkpoint::capture(cfg, step as u64, &ps, Some(&opt)).save(&ckpt_path);
                        Error::Diverged { step, detail }
                    }
                    other => other,
                }
            })?;
            batch_report.l_struc_stu += report.l_struc_stu / cfg.batch as f64;
            batch_report.l_struc_tch += report.l_struc_tch / cfg.batch as f64;
            batch_report.l_distill += report.l_distill / cfg.batch as f64;
            batch_report.total += report.total / cfg.batch as f64;
            g.backward(loss)?;
            grads.add_from_graph(&g);
        }
        grads.scale(1.0 / cfg.batch as f64);
        opt.step(&mut ps, &grads).map_err(|e| {
            let _ = Checkpoint::capture(cfg, step as u64, &ps, Some(&opt)).save(&ckpt_path);
            e
        })?;
        let line = format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            step, batch_report.total, batch_report.l_struc_stu, batch_report.l_struc_tch, batch_report.l_distill
        );
        if !quiet {
            println!("{line}");
        }
        log.push(line);
    }
    let ck = Checkpoint::capture(cfg, cfg.steps as u64, &ps, Some(&opt));
    ck.save(&ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint_path: ckpt_path,
        log,
        steps_run: cfg.steps,
    })
}

// ── inference and evaluation ────────────────────────────────────────

pub struct InferResult {
    /// Per-frame probability maps at input resolution, f64 in [0,1].
    pub probs: Vec<Tensor<f64>>,
    /// Location-gate heatmap at feature resolution.
    pub heatmap: Option<Tensor<f64>>,
}

pub fn infer_clip<T: Real>(
    ps: &ParamStore<T>,
    model: &Model,
    clip: &ClipTensors<T>,
) -> Result<InferResult> {
    let mut g = Graph::<T>::new();
    let out = model_forward(&mut g, ps, model, clip, FusionMode::Infer)?;
    let probs_var = g.sigmoid(out.logits_stu);
    let pv = g.value(probs_var);
    let sh = pv.shape().to_vec();
    let (t, h, w) = (sh[0], sh[2], sh[3]);
    let mut probs = Vec::with_capacity(t);
    for ti in 0..t {
        let mut frame = Tensor::<f64>::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                frame.set(&[y, x], pv.at(&[ti, 0, y, x]).to_f64_());
            }
        }
        probs.push(frame);
    }
    let heatmap = out.heatmap.map(|hm| {
        let hv = g.value(hm);
        Tensor::<f64>::from_f64_slice(hv.shape(), &hv.to_f64_vec()).expect("heatmap copy")
    });
    Ok(InferResult { probs, heatmap })
}

/// Rebuild model and parameters from a checkpoint.
pub fn restore<T: Real>(ck: &Checkpoint<T>) -> Result<(Config, ParamStore<T>, Model)> {
    let cfg = ck.config.clone();
    let mut ps = ParamStore::<T>::new();
    let model = Model::build(&mut ps, &cfg)?;
    ck.load_into(&mut ps)?;
    Ok((cfg, ps, model))
}

pub fn probs_to_mask_image(probs: &Tensor<f64>) -> GrayImage {
    let sh = probs.shape();
    let (h, w) = (sh[0], sh[1]);
    let mut img = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            img.put(x, y, (probs.at(&[y, x]) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    img
}

pub fn mask_image_to_probs(img: &GrayImage) -> Tensor<f64> {
    Tensor::from_fn(&[img.height, img.width], |i| f64::from(img.data[i]) / 255.0)
}

/// Per-frame metric rows plus the summary (mean MAE over all frames, mean
/// F-beta over frames with nonempty ground truth).
pub struct EvalReport {
    pub rows: Vec<(String, f64, Option<f64>)>,
    pub mean_mae: f64,
    pub mean_fbeta: f64,
}

pub fn evaluate_maps(frames: &[(String, Tensor<f64>, Tensor<f64>)]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(frames.len());
    let mut mae_sum = 0.0;
    let mut f_sum = 0.0;
    let mut f_count = 0usize;
    for (id, pred, gt) in frames {
        let m = crate::objective::mae(pred, gt)?;
        let f = crate::objective::adaptive_fbeta(pred, gt)?;
        mae_sum += m;
        if let Some(fv) = f {
            f_sum += fv;
            f_count += 1;
        }
        rows.push((id.clone(), m, f));
    }
    Ok(EvalReport {
        mean_mae: mae_sum / rows.len().max(1) as f64,
        mean_fbeta: if f_count > 0 { f_sum / f_count as f64 } else { 0.0 },
        rows,
    })
}

/// Run inference over manifest entries and collect (frame id, pred, gt).
pub fn predict_entries<T: Real>(
    ps: &ParamStore<T>,
    model: &Model,
    clips: &[LoadedClip<T>],
    ids: &[String],
) -> Result<Vec<(String, Tensor<f64>, Tensor<f64>)>> {
    let mut frames = Vec::new();
    for (clip, id) in clips.iter().zip(ids) {
        let result = infer_clip(ps, model, &clip.tensors)?;
        for (t, prob) in result.probs.iter().enumerate() {
            let gt = mask_image_to_probs(&clip.sample.masks[t]);
            frames.push((format!("{id}#{t}"), prob.clone(), gt));
        }
    }
    Ok(frames)
}

/// Fraction of frames whose heatmap argmax cell overlaps the ground-truth
/// mask. The heatmap lives at feature resolution; its argmax cell maps to a
/// block of input pixels and counts as a hit when any masked pixel falls
/// inside that block.
pub fn heatmap_hit_rate<T: Real>(
    ps: &ParamStore<T>,
    model: &Model,
    clips: &[LoadedClip<T>],
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for clip in clips {
        let result = infer_clip(ps, model, &clip.tensors)?;
        let Some(heat) = &result.heatmap else {
            return Err(Error::invalid("heatmap_hit_rate", "model has no location gate"));
        };
        let hs = heat.shape().to_vec(); // [T, 1, h, w]
        let (t_frames, fh, fw) = (hs[0], hs[2], hs[3]);
        for t in 0..t_frames {
            let mut best = f64::NEG_INFINITY;
            let mut best_cell = (0usize, 0usize);
            for y in 0..fh {
                for x in 0..fw {
                    let v = heat.at(&[t, 0, y, x]);
                    if v > best {
                        best = v;
                        best_cell = (y, x);
                    }
                }
            }
            let mask = &clip.sample.masks[t];
            let (bh, bw) = (mask.height / fh, mask.width / fw);
            let mut hit = false;
            for y in best_cell.0 * bh..(best_cell.0 + 1) * bh {
                for x in best_cell.1 * bw..(best_cell.1 + 1) * bw {
                    if mask.get(x, y) == 255 {
                        hit = true;
                    }
                }
            }
            hits += usize::from(hit);
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

// ── end-to-end gradient verification ────────────────────────────────

/// A micro config small enough for finite differences through the entire
/// pipeline in f64.
pub fn micro_config() -> Config {
    Config {
        width: 32,
        frames: 2,
        widths: [4, 6, 8, 12],
        tf_layers: 1,
        tf_heads: 2,
        ffn_mult: 2,
        decoder_width: 8,
        fusion_heads: 2,
        fusion_depth: 1,
        m_dft: 64,
        conv_filters: 4,
        gru_hidden: 8,
        fc_width: 12,
        n_classes: 2,
        unfreeze_audio: true,
        precision: crate::config::Precision::F64,
        ..Config::default()
    }
}

pub fn micro_scene_params() -> crate::synth::SceneParams {
    crate::synth::SceneParams {
        width: 32,
        frames: 2,
        radius: 0.45,
        n_distractors: 1,
        sample_rate: 8000,
        samples_per_frame: 400,
    }
}

pub struct EndToEndCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<(String, usize, f64, f64)>,
}

/// Sample parameter coordinates across every module and compare analytic
/// gradients of the full training loss against central differences.
pub fn end_to_end_grad_check(seed: u64, per_group: usize, eps: f64, tol: f64) -> Result<EndToEndCheck> {
    let cfg = micro_config();
    let mut spec = crate::synth::SceneSpec::random(&micro_scene_params(), seed)?;
    // Keep the finite differences away from non-smooth points: a noise
    // burst leaves no silent frames (whose constant spectra tie the
    // frequency max-pool), and a little jitter on frames and features
    // steers activations off relu kinks.
    spec.class_id = crate::acoustic::CLASS_NOISE;
    let clip_sample = crate::synth::render_clip(&spec)?;
    let mut clip = prepare_clip::<f64>(&cfg, &clip_sample)?;
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD17E);
    let mut jitter = |t: &mut Tensor<f64>, scale: f64| {
        for v in t.data_mut() {
            *v += jitter_rng.random_range(-scale..scale);
        }
    };
    for frame in &mut clip.frames {
        jitter(frame, 1e-3);
    }
    if let Some(feat) = &mut clip.feat {
        jitter(&mut feat.tensor, 1e-3);
    }
    let mut ps = ParamStore::<f64>::new();
    let model = Model::build(&mut ps, &cfg)?;
    let weights = LossWeights {
        lambda_distill: cfg.lambda_distill,
        lambda_dice: cfg.lambda_dice,
    };

    // The teacher branch sits behind stop-gradient walls, so the raw total
    // is not finite-differentiable with respect to every parameter: its
    // VALUE still moves through the truncated forward paths that the
    // analytic gradient deliberately ignores. Each parameter group is
    // therefore checked against the sub-loss in which every term is either
    // truncation-free or independent of that group:
    //   encoders           -> student structure loss
    //   student fusion/dec -> full total (teacher terms are constants)
    //   teacher fusion/dec -> both structure losses (distill is detached)
    #[derive(Clone, Copy, PartialEq)]
    enum CheckLoss {
        StudentOnly,
        Full,
        StructureOnly,
    }
    let loss_of = |g: &mut Graph<f64>, kind: CheckLoss, ps: &ParamStore<f64>| -> Result<Var> {
        let out = model_forward(g, ps, &model, &clip, FusionMode::Train)?;
        let gt_var = g.constant(clip.gt.clone());
        let l_stu = structure_loss(g, out.logits_stu, gt_var, weights.lambda_dice)?;
        match kind {
            CheckLoss::StudentOnly => Ok(l_stu),
            CheckLoss::StructureOnly => {
                let l_tch = structure_loss(g, out.logits_tch.expect("teacher"), gt_var, weights.lambda_dice)?;
                g.add(l_stu, l_tch)
            }
            CheckLoss::Full => {
                let (total, _) = clip_loss_from(g, &out, gt_var, &weights)?;
                Ok(total)
            }
        }
    };

    let groups: [(&str, CheckLoss); 8] = [
        ("visual.backbone.", CheckLoss::StudentOnly),
        ("visual.tf.", CheckLoss::StudentOnly),
        ("visual.nonlocal.", CheckLoss::StudentOnly),
        ("acoustic.", CheckLoss::StudentOnly),
        ("fusion.student.", CheckLoss::Full),
        ("fusion.teacher.", CheckLoss::StructureOnly),
        ("dec.student.", CheckLoss::Full),
        ("dec.teacher.", CheckLoss::StructureOnly),
    ];
    let mut analytic_by_kind: HashMap<u8, HashMap<ParamId, Vec<f64>>> = HashMap::new();
    for kind in [CheckLoss::StudentOnly, CheckLoss::Full, CheckLoss::StructureOnly] {
        let mut g = Graph::<f64>::new();
        let loss = loss_of(&mut g, kind, &ps)?;
        g.backward(loss)?;
        analytic_by_kind.insert(
            kind as u8,
            g.bound_grads().map(|(id, gr)| (id, gr.to_vec())).collect(),
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut failures = Vec::new();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (group, kind) in groups {
        let analytic = &analytic_by_kind[&(kind as u8)];
        let ids: Vec<ParamId> = ps
            .ids()
            .filter(|&id| ps.name(id).starts_with(group) && analytic.contains_key(&id))
            .collect();
        if ids.is_empty() {
            return Err(Error::invalid(
                "end_to_end_grad_check",
                format!("no gradients under {group}"),
            ));
        }
        for k in 0..per_group {
            let id = ids[k % ids.len()];
            let grad = &analytic[&id];
            let c = rng.random_range(0..grad.len());
            let orig = ps.get(id).data()[c];
            let eval = |ps: &ParamStore<f64>| -> Result<f64> {
                let mut g = Graph::<f64>::new();
                let loss = loss_of(&mut g, kind, ps)?;
                Ok(g.value(loss).item())
            };
            ps.get_mut(id).data_mut()[c] = orig + eps;
            let up = eval(&ps)?;
            ps.get_mut(id).data_mut()[c] = orig - eps;
            let down = eval(&ps)?;
            ps.get_mut(id).data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * eps);
            let rel = crate::gradcheck::rel_err(grad[c], fd);
            max_rel = max_rel.max(rel);
            checked += 1;
            if rel > tol {
                failures.push((ps.name(id).to_string(), c, grad[c], fd));
            }
        }
    }
    Ok(EndToEndCheck {
        checked,
        max_rel_err: max_rel,
        failures,
    })
}

/// Parameter names grouped for the ablation accounting invariant.
pub fn param_names(cfg: &Config) -> Result<Vec<String>> {
    let mut ps = ParamStore::<f32>::new();
    Model::build(&mut ps, cfg)?;
    Ok(ps.ids().map(|id| ps.name(id).to_string()).collect())
}
