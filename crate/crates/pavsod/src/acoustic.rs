//! Ambisonic audio front-end.
//!
//! A first-order B-format clip (W, X, Y, Z) is turned into per-channel
//! magnitude/phase spectrograms, encoded by a small CRNN (conv stack,
//! frequency max-pooling, two bidirectional GRU layers) and read out by two
//! linear branches: sound-event detection (sigmoid over N classes) and DOA
//! regression (tanh over 3N Cartesian coordinates). Dropping each branch's
//! final layer yields the semantic / location embeddings consumed by the
//! fusion module.
//!
//! `doa_oracle` is the analytic counterpart: for a single first-order
//! source, the time-averaged intensity proxy (mean W·X, mean W·Y, mean W·Z)
//! points at the spatial-energy maximum, so encode → oracle must round-trip
//! the direction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::{Graph, PoolMode, Var};
use crate::error::{Error, Result};
use crate::nn::{BiGru, Conv2d, Linear, ParamStore, ScaleShift};
use crate::tensor::{Real, Tensor};

pub const B_FORMAT_CHANNELS: usize = 4;

/// First-order B-format clip: W (omni, gain 1/sqrt(2)) plus X/Y/Z dipoles.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbisonicClip {
    pub sample_rate: u32,
    channels: [Vec<f32>; 4],
}

impl AmbisonicClip {
    pub fn new(sample_rate: u32, channels: [Vec<f32>; 4]) -> Result<Self> {
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::invalid("ambisonic_clip", "channel length mismatch"));
        }
        Ok(AmbisonicClip {
            sample_rate,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f32>; 4] {
        &self.channels
    }

    /// Slice out a sample range as a new clip.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::invalid("clip_window", format!("range {start}+{len} beyond {}", self.len())));
        }
        let ch = |i: usize| self.channels[i][start..start + len].to_vec();
        AmbisonicClip::new(self.sample_rate, [ch(0), ch(1), ch(2), ch(3)])
    }

    /// Destroy spatial information: every channel becomes the W channel.
    pub fn to_mono(&self) -> Self {
        let w = self.channels[0].clone();
        AmbisonicClip {
            sample_rate: self.sample_rate,
            channels: [w.clone(), w.clone(), w.clone(), w],
        }
    }

    /// Silence of the same shape.
    pub fn silence_like(&self) -> Self {
        let z = vec![0.0f32; self.len()];
        AmbisonicClip {
            sample_rate: self.sample_rate,
            channels: [z.clone(), z.clone(), z.clone(), z],
        }
    }
}

/// Encode a mono signal arriving from `dir` (unit vector) into B-format:
/// `W = s/sqrt(2)`, `X = s*dx`, `Y = s*dy`, `Z = s*dz`.
pub fn encode_bformat(dir: [f64; 3], signal: &[f32], sample_rate: u32) -> Result<AmbisonicClip> {
    let norm = dir.iter().map(|c| c * c).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("encode_bformat", format!("direction norm {norm} != 1")));
    }
    let wg = (0.5f64).sqrt() as f32;
    let (dx, dy, dz) = (dir[0] as f32, dir[1] as f32, dir[2] as f32);
    let mk = |gain: f32| signal.iter().map(|&s| s * gain).collect::<Vec<f32>>();
    AmbisonicClip::new(sample_rate, [mk(wg), mk(dx), mk(dy), mk(dz)])
}

/// Direction estimate from the time-averaged acoustic intensity proxy
/// `(mean(W·X), mean(W·Y), mean(W·Z))`, normalized. `None` for silence.
pub fn doa_oracle(clip: &AmbisonicClip) -> Option<[f64; 3]> {
    let n = clip.len();
    if n == 0 {
        return None;
    }
    let w = clip.channel(0);
    let mut acc = [0.0f64; 3];
    for axis in 0..3 {
        let c = clip.channel(axis + 1);
        let mut s = 0.0f64;
        for i in 0..n {
            s += f64::from(w[i]) * f64::from(c[i]);
        }
        acc[axis] = s / n as f64;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    Some([acc[0] / norm, acc[1] / norm, acc[2] / norm])
}

/// Angle between two directions, degrees.
pub fn angular_error_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

// ── spectrogram features ────────────────────────────────────────────

/// `T_a x M/2 x 2C` feature block: C magnitude planes then C phase planes
/// per frequency bin; the zeroth bin is excluded.
#[derive(Debug, Clone)]
pub struct SpectroFeatures<T: Real> {
    pub frames: usize,
    pub bins: usize,
    pub tensor: Tensor<T>,
}

pub fn stft_frame_count(len: usize, m: usize) -> usize {
    (len - m) / (m / 2) + 1
}

/// Hamming-windowed STFT with 50% overlap: per channel, M-point DFT,
/// keep positive bins `1..=M/2`, emit magnitude and phase.
pub fn stft_features<T: Real>(clip: &AmbisonicClip, m: usize) -> Result<SpectroFeatures<T>> {
    if !m.is_power_of_two() || m < 4 {
        return Err(Error::invalid("stft", format!("M must be a power of two >= 4, got {m}")));
    }
    if clip.len() < m {
        return Err(Error::invalid(
            "stft",
            format!("clip of {} samples shorter than one window of {m}", clip.len()),
        ));
    }
    let hop = m / 2;
    let frames = stft_frame_count(clip.len(), m);
    let bins = m / 2;
    let window: Vec<f64> = (0..m)
        .map(|n| 0.54 - 0.46 * (std::f64::consts::TAU * n as f64 / (m as f64 - 1.0)).cos())
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(m);

    let c = B_FORMAT_CHANNELS;
    let mut data = vec![T::zero(); frames * bins * 2 * c];
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    for ch in 0..c {
        let samples = clip.channel(ch);
        for t in 0..frames {
            for n in 0..m {
                buf[n] = Complex::new(f64::from(samples[t * hop + n]) * window[n], 0.0);
            }
            fft.process(&mut buf);
            for k in 1..=bins {
                let mag = buf[k].norm();
                let phase = if buf[k].re == 0.0 && buf[k].im == 0.0 {
                    0.0
                } else {
                    buf[k].im.atan2(buf[k].re)
                };
                let base = (t * bins + (k - 1)) * 2 * c;
                data[base + ch] = T::from_f64(mag);
                data[base + c + ch] = T::from_f64(phase);
            }
        }
    }
    Ok(SpectroFeatures {
        frames,
        bins,
        tensor: Tensor::new(vec![frames, bins, 2 * c], data)?,
    })
}

// ── SELD encoder ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SeldConfig {
    pub m_dft: usize,
    pub conv_filters: usize,
    pub pool_schedule: Vec<usize>,
    pub gru_hidden: usize,
    pub fc_width: usize,
    pub n_classes: usize,
}

impl Default for SeldConfig {
    fn default() -> Self {
        SeldConfig {
            m_dft: 256,
            conv_filters: 16,
            pool_schedule: vec![8, 4, 2],
            gru_hidden: 32,
            fc_width: 64,
            n_classes: 2,
        }
    }
}

impl SeldConfig {
    /// Frequency bins remaining after the max-pool schedule; must be 2.
    pub fn validate(&self) -> Result<()> {
        if self.pool_schedule.len() != 3 {
            return Err(Error::invalid("seld_config", "need one pool factor per conv layer (3)"));
        }
        let mut f = self.m_dft / 2;
        for &p in &self.pool_schedule {
            if p == 0 || f % p != 0 {
                return Err(Error::invalid(
                    "seld_config",
                    format!("pool factor {p} does not divide remaining {f} bins"),
                ));
            }
            f /= p;
        }
        if f != 2 {
            return Err(Error::invalid(
                "seld_config",
                format!("pool schedule must reduce {} bins to 2, leaves {f}", self.m_dft / 2),
            ));
        }
        Ok(())
    }
}

/// Parameter handles of the acoustic encoder; tensors live in a ParamStore.
#[derive(Debug, Clone)]
pub struct SeldParams {
    pub cfg: SeldConfig,
    convs: Vec<(Conv2d, ScaleShift)>,
    gru1: BiGru,
    gru2: BiGru,
    sed_fc1: Linear,
    sed_fc2: Linear,
    doa_fc1: Linear,
    doa_fc2: Linear,
}

impl SeldParams {
    pub fn build<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &SeldConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.conv_filters;
        let mut convs = Vec::new();
        for layer in 0..3 {
            let c_in = if layer == 0 { 2 * B_FORMAT_CHANNELS } else { p };
            let conv = Conv2d::new(ps, rng, &format!("{prefix}.conv{layer}"), c_in, p, 3, 1, true);
            let norm = ScaleShift::new(ps, &format!("{prefix}.norm{layer}"), p);
            convs.push((conv, norm));
        }
        let q = cfg.gru_hidden;
        let gru1 = BiGru::new(ps, rng, &format!("{prefix}.gru1"), 2 * p, q);
        let gru2 = BiGru::new(ps, rng, &format!("{prefix}.gru2"), 2 * q, q);
        let r = cfg.fc_width;
        let sed_fc1 = Linear::new(ps, rng, &format!("{prefix}.sed_fc1"), 2 * q, r, true);
        let sed_fc2 = Linear::new(ps, rng, &format!("{prefix}.sed_fc2"), r, cfg.n_classes, true);
        let doa_fc1 = Linear::new(ps, rng, &format!("{prefix}.doa_fc1"), 2 * q, r, true);
        let doa_fc2 = Linear::new(ps, rng, &format!("{prefix}.doa_fc2"), r, 3 * cfg.n_classes, true);
        Ok(SeldParams {
            cfg: cfg.clone(),
            convs,
            gru1,
            gru2,
            sed_fc1,
            sed_fc2,
            doa_fc1,
            doa_fc2,
        })
    }
}

/// All intermediate readouts of one encoder pass.
pub struct SeldForward {
    /// `[T_a, 2Q]` recurrent features.
    pub hidden: Var,
    /// `[T_a, N]` pre-sigmoid.
    pub sed_logits: Var,
    /// `[T_a, N]` in (0,1).
    pub sed: Var,
    /// `[T_a, 3N]` in (-1,1).
    pub doa: Var,
    /// `[T_a, R]` penultimate SED activation.
    pub sed_penult: Var,
    /// `[T_a, R]` penultimate DOA activation.
    pub doa_penult: Var,
}

pub fn seld_encoder_forward<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &SeldParams,
    feat: &SpectroFeatures<T>,
) -> Result<SeldForward> {
    // [T_a, F, 2C] -> [2C, T_a, F] for the conv stack.
    let x = g.constant(feat.tensor.clone());
    let mut x = g.permute(x, &[2, 0, 1])?;
    for (i, (conv, norm)) in params.convs.iter().enumerate() {
        let y = conv.forward(g, ps, x)?;
        let y = norm.forward(g, ps, y)?;
        let y = g.relu(y);
        x = g.pool_axis(y, PoolMode::Max, 2, params.cfg.pool_schedule[i])?;
    }
    // [P, T_a, 2] -> [T_a, 2P]
    let p = params.cfg.conv_filters;
    let frames = feat.frames;
    let x = g.permute(x, &[1, 0, 2])?;
    let x = g.reshape(x, &[frames, 2 * p])?;
    let h = params.gru1.forward(g, ps, x)?;
    let hidden = params.gru2.forward(g, ps, h)?;
    let sed_penult = params.sed_fc1.forward(g, ps, hidden)?;
    let sed_logits = params.sed_fc2.forward(g, ps, sed_penult)?;
    let sed = g.sigmoid(sed_logits);
    let doa_penult = params.doa_fc1.forward(g, ps, hidden)?;
    let doa_raw = params.doa_fc2.forward(g, ps, doa_penult)?;
    let doa = g.tanh(doa_raw);
    Ok(SeldForward {
        hidden,
        sed_logits,
        sed,
        doa,
        sed_penult,
        doa_penult,
    })
}

/// Semantic and location embeddings: the penultimate branch activations
/// transposed to `C_e x L` with `C_e = R` and `L = T_a`.
pub struct AcousticEmbeddings {
    pub g_sem: Var,
    pub g_loc: Var,
}

pub fn extract_embeddings<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &SeldParams,
    feat: &SpectroFeatures<T>,
) -> Result<AcousticEmbeddings> {
    let fwd = seld_encoder_forward(g, ps, params, feat)?;
    Ok(AcousticEmbeddings {
        g_sem: g.transpose(fwd.sed_penult)?,
        g_loc: g.transpose(fwd.doa_penult)?,
    })
}

/// Threshold SED probabilities at a strict 0.5.
pub fn sed_decision<T: Real>(sed: &Tensor<T>) -> Vec<bool> {
    let half = T::from_f64(0.5);
    sed.data().iter().map(|&v| v > half).collect()
}

// ── synthetic signals and pretraining ───────────────────────────────

pub const CLASS_TONE: usize = 0;
pub const CLASS_NOISE: usize = 1;
pub const N_CLASSES: usize = 2;

/// Burst of `len` samples with a linear 10% attack / 10% release envelope.
/// Class 0 is a tone (random frequency), class 1 white noise.
pub fn burst_signal(
    rng: &mut ChaCha8Rng,
    class_id: usize,
    len: usize,
    sample_rate: u32,
    amplitude: f64,
) -> Vec<f32> {
    let attack = (len as f64 * 0.1).max(1.0);
    let release_start = len as f64 * 0.9;
    let envelope = |i: usize| -> f64 {
        let t = i as f64;
        let a = (t / attack).min(1.0);
        let r = if t > release_start {
            ((len as f64 - t) / (len as f64 - release_start)).max(0.0)
        } else {
            1.0
        };
        a * r
    };
    match class_id {
        CLASS_TONE => {
            let freq = rng.random_range(400.0..1200.0);
            let w = std::f64::consts::TAU * freq / f64::from(sample_rate);
            (0..len)
                .map(|i| (amplitude * envelope(i) * (w * i as f64).sin()) as f32)
                .collect()
        }
        _ => (0..len)
            .map(|i| (amplitude * envelope(i) * rng.random_range(-1.0..1.0)) as f32)
            .collect(),
    }
}

/// Uniform random unit vector.
pub fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0f64),
            rng.random_range(-1.0..1.0f64),
            rng.random_range(-1.0..1.0f64),
        ];
        let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// One pretraining example: a single burst with a fixed direction inside an
/// otherwise silent clip, plus frame-level targets.
pub struct PretrainClip {
    pub audio: AmbisonicClip,
    pub class_id: usize,
    pub direction: [f64; 3],
    /// Active sample range of the burst.
    pub burst: (usize, usize),
}

pub fn make_pretrain_clip(rng: &mut ChaCha8Rng, sample_rate: u32, len: usize) -> PretrainClip {
    let class_id = rng.random_range(0..N_CLASSES);
    let direction = random_direction(rng);
    let amplitude = rng.random_range(0.4..0.9);
    let dur = rng.random_range(len * 2 / 5..=len * 9 / 10);
    let start = rng.random_range(0..=len - dur);
    let sig = burst_signal(rng, class_id, dur, sample_rate, amplitude);
    let mut full = vec![0.0f32; len];
    full[start..start + dur].copy_from_slice(&sig);
    let audio = encode_bformat(direction, &full, sample_rate).expect("unit direction");
    PretrainClip {
        audio,
        class_id,
        direction,
        burst: (start, start + dur),
    }
}

pub fn make_pretrain_dataset(n: usize, sample_rate: u32, len: usize, seed: u64) -> Vec<PretrainClip> {
    use rand_chacha::rand_core::SeedableRng;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            make_pretrain_clip(&mut rng, sample_rate, len)
        })
        .collect()
}

/// Frame-level SED/DOA targets. A frame is active when at least half its
/// window overlaps the burst.
pub fn pretrain_targets<T: Real>(clip: &PretrainClip, m: usize) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let frames = stft_frame_count(clip.audio.len(), m);
    let hop = m / 2;
    let n = N_CLASSES;
    let mut sed = Tensor::zeros(&[frames, n]);
    let mut doa = Tensor::zeros(&[frames, 3 * n]);
    let mut mask = Tensor::zeros(&[frames, 3 * n]);
    for t in 0..frames {
        let w0 = t * hop;
        let w1 = w0 + m;
        let overlap = w1.min(clip.burst.1).saturating_sub(w0.max(clip.burst.0));
        if overlap * 2 >= m {
            sed.set(&[t, clip.class_id], T::one());
            for axis in 0..3 {
                doa.set(&[t, 3 * clip.class_id + axis], T::from_f64(clip.direction[axis]));
                mask.set(&[t, 3 * clip.class_id + axis], T::one());
            }
        }
    }
    (sed, doa, mask)
}

/// Stable elementwise binary cross-entropy on logits, mean-reduced:
/// `mean(relu(x) - x*y + ln(1 + exp(-|x|)))`.
pub fn bce_logits_mean<T: Real>(g: &mut Graph<T>, logits: Var, targets: Var) -> Result<Var> {
    let pos = g.relu(logits);
    let xy = g.mul(logits, targets)?;
    let neg_x = g.neg(logits);
    let neg_abs = {
        let a = g.relu(logits);
        let b = g.relu(neg_x);
        let s = g.add(a, b)?;
        g.neg(s)
    };
    let e = g.exp(neg_abs);
    let e1 = g.add_const(e, T::one());
    let soft = g.log(e1);
    let t1 = g.sub(pos, xy)?;
    let per_elem = g.add(t1, soft)?;
    Ok(g.mean_all(per_elem))
}

pub struct PretrainOutcome<T: Real> {
    pub store: ParamStore<T>,
    pub params: SeldParams,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Supervised pretraining on synthetic bursts: BCE on SED logits plus MSE
/// on DOA regressors masked to active classes.
pub fn pretrain_seld<T: Real>(
    clips: &[PretrainClip],
    cfg: &SeldConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<PretrainOutcome<T>> {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = SeldParams::build(&mut store, &mut rng, "acoustic", cfg)?;
    let mut opt = crate::optim::AdamW::new(&store, lr, 0.0);

    let feats: Vec<SpectroFeatures<T>> = clips
        .iter()
        .map(|c| stft_features(&c.audio, cfg.m_dft))
        .collect::<Result<_>>()?;
    let targets: Vec<(Tensor<T>, Tensor<T>, Tensor<T>)> =
        clips.iter().map(|c| pretrain_targets(c, cfg.m_dft)).collect();

    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        // Seeded in-place shuffle, Fisher-Yates.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for &ci in &order {
            let mut g = Graph::<T>::new();
            let fwd = seld_encoder_forward(&mut g, &store, &params, &feats[ci])?;
            let (sed_t, doa_t, mask) = &targets[ci];
            let sed_target = g.constant(sed_t.clone());
            let loss_sed = bce_logits_mean(&mut g, fwd.sed_logits, sed_target)?;
            let active: f64 = mask.to_f64_vec().iter().sum();
            let loss = if active > 0.0 {
                let doa_target = g.constant(doa_t.clone());
                let maskv = g.constant(mask.clone());
                let diff = g.sub(fwd.doa, doa_target)?;
                let sq = g.mul(diff, diff)?;
                let masked = g.mul(sq, maskv)?;
                let sum = g.sum_all(masked);
                let mse = g.scale(sum, T::from_f64(1.0 / active));
                g.add(loss_sed, mse)?
            } else {
                loss_sed
            };
            let lv = g.value(loss).item().to_f64_();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step: epoch,
                    detail: format!("pretraining loss became {lv}"),
                });
            }
            epoch_loss += lv;
            g.backward(loss)?;
            let mut grads = crate::optim::GradAccum::new(&store);
            grads.add_from_graph(&g);
            opt.step(&mut store, &grads)?;
        }
        curve.push(epoch_loss / clips.len() as f64);
    }
    Ok(PretrainOutcome {
        store,
        params,
        loss_curve: curve,
    })
}

/// Fraction of (frame, class) activity decisions matching the target.
pub fn sed_frame_accuracy<T: Real>(
    store: &ParamStore<T>,
    params: &SeldParams,
    clips: &[PretrainClip],
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for clip in clips {
        let feat = stft_features::<T>(&clip.audio, params.cfg.m_dft)?;
        let mut g = Graph::<T>::new();
        let fwd = seld_encoder_forward(&mut g, store, params, &feat)?;
        let (sed_t, _, _) = pretrain_targets::<T>(clip, params.cfg.m_dft);
        let pred = sed_decision(g.value(fwd.sed));
        for (p, &t) in pred.iter().zip(sed_t.data()) {
            if *p == (t > T::from_f64(0.5)) {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Median DOA angular error over active frames, degrees.
pub fn doa_median_error_deg<T: Real>(
    store: &ParamStore<T>,
    params: &SeldParams,
    clips: &[PretrainClip],
) -> Result<f64> {
    let mut errors = Vec::new();
    for clip in clips {
        let feat = stft_features::<T>(&clip.audio, params.cfg.m_dft)?;
        let mut g = Graph::<T>::new();
        let fwd = seld_encoder_forward(&mut g, store, params, &feat)?;
        let doa = g.value(fwd.doa);
        let (sed_t, _, _) = pretrain_targets::<T>(clip, params.cfg.m_dft);
        for t in 0..feat.frames {
            if sed_t.at(&[t, clip.class_id]) > T::from_f64(0.5) {
                let v = [
                    doa.at(&[t, 3 * clip.class_id]).to_f64_(),
                    doa.at(&[t, 3 * clip.class_id + 1]).to_f64_(),
                    doa.at(&[t, 3 * clip.class_id + 2]).to_f64_(),
                ];
                let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                if n < 1e-9 {
                    errors.push(180.0);
                    continue;
                }
                errors.push(angular_error_deg(
                    [v[0] / n, v[1] / n, v[2] / n],
                    clip.direction,
                ));
            }
        }
    }
    if errors.is_empty() {
        return Err(Error::invalid("doa_median", "no active frames"));
    }
    errors.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    Ok(errors[errors.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn tone(len: usize, freq_bin: usize, m: usize) -> Vec<f32> {
        // Exactly periodic in the window: freq = bin * fs / M.
        (0..len)
            .map(|i| (std::f64::consts::TAU * freq_bin as f64 * i as f64 / m as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn bformat_gains() {
        let sig = vec![1.0f32; 8];
        let c = encode_bformat([1.0, 0.0, 0.0], &sig, 8000).unwrap();
        assert!(c.channel(2).iter().all(|&v| v == 0.0));
        assert!(c.channel(3).iter().all(|&v| v == 0.0));
        assert!((c.channel(0)[0] - (0.5f32).sqrt()).abs() < 1e-7);
        assert_eq!(c.channel(1)[0], 1.0);

        let c = encode_bformat([0.0, 0.0, 1.0], &sig, 8000).unwrap();
        assert!(c.channel(1).iter().all(|&v| v == 0.0));
        assert!(c.channel(2).iter().all(|&v| v == 0.0));
        assert_eq!(c.channel(3)[0], 1.0);

        assert!(encode_bformat([0.5, 0.0, 0.0], &sig, 8000).is_err());
    }

    #[test]
    fn doa_oracle_round_trip_and_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise: Vec<f32> = (0..4000).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        for dir in [
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.6, -0.64, 0.48],
            [-0.6, 0.64, -0.48],
        ] {
            let clip = encode_bformat(dir, &noise, 8000).unwrap();
            let est = doa_oracle(&clip).unwrap();
            assert!(
                angular_error_deg(est, dir) < 1.0,
                "direction {dir:?} came back as {est:?}"
            );
            let neg = [-dir[0], -dir[1], -dir[2]];
            let clip_neg = encode_bformat(neg, &noise, 8000).unwrap();
            let est_neg = doa_oracle(&clip_neg).unwrap();
            assert!(angular_error_deg(est_neg, neg) < 1.0);
        }
    }

    #[test]
    fn doa_oracle_silent_clip_no_estimate() {
        let clip = AmbisonicClip::new(8000, [vec![0.0; 64], vec![0.0; 64], vec![0.0; 64], vec![0.0; 64]]).unwrap();
        assert!(doa_oracle(&clip).is_none());
    }

    #[test]
    fn stft_frame_arithmetic_and_sine_bin() {
        let m = 256;
        let len = 2048;
        assert_eq!(stft_frame_count(len, m), (len - m) / (m / 2) + 1);
        let sig = tone(len, 19, m);
        let clip = encode_bformat([1.0, 0.0, 0.0], &sig, 8000).unwrap();
        // Channel 1 (X) carries the full signal.
        let feat = stft_features::<f64>(&clip, m).unwrap();
        for t in 0..feat.frames {
            let mut best_bin = 0;
            let mut best = -1.0;
            for k in 0..feat.bins {
                let v = feat.tensor.at(&[t, k, 1]);
                if v > best {
                    best = v;
                    best_bin = k;
                }
            }
            assert_eq!(best_bin, 19 - 1, "frame {t} peaked at the wrong bin");
        }
    }

    #[test]
    fn stft_silence_is_all_zero() {
        let clip = AmbisonicClip::new(8000, [vec![0.0; 512], vec![0.0; 512], vec![0.0; 512], vec![0.0; 512]]).unwrap();
        let feat = stft_features::<f64>(&clip, 256).unwrap();
        assert!(feat.tensor.data().iter().all(|&v| v == 0.0));
        let short = AmbisonicClip::new(8000, [vec![0.0; 100], vec![0.0; 100], vec![0.0; 100], vec![0.0; 100]]).unwrap();
        assert!(stft_features::<f64>(&short, 256).is_err());
    }

    #[test]
    fn stft_parseval_within_five_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 256usize;
        let sig: Vec<f32> = (0..1024).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let clip = encode_bformat([0.0, 1.0, 0.0], &sig, 8000).unwrap();
        let feat = stft_features::<f64>(&clip, m).unwrap();
        let window: Vec<f64> = (0..m)
            .map(|n| 0.54 - 0.46 * (std::f64::consts::TAU * n as f64 / (m as f64 - 1.0)).cos())
            .collect();
        let hop = m / 2;
        for t in 0..feat.frames {
            let time_energy: f64 = (0..m)
                .map(|n| (f64::from(clip.channel(2)[t * hop + n]) * window[n]).powi(2))
                .sum();
            // One-sided spectrum without DC; double everything but Nyquist.
            let mut spec = 0.0;
            for k in 0..feat.bins {
                let mag = feat.tensor.at(&[t, k, 2]);
                let w = if k == feat.bins - 1 { 1.0 } else { 2.0 };
                spec += w * mag * mag;
            }
            spec /= m as f64;
            let rel = (spec - time_energy).abs() / time_energy.max(1e-12);
            assert!(rel < 0.05, "frame {t}: spectral {spec} vs time {time_energy}");
        }
    }

    #[test]
    fn sed_decision_threshold_strict() {
        let sed = Tensor::<f64>::new(vec![1, 3], vec![0.51, 0.5, 0.0]).unwrap();
        assert_eq!(sed_decision(&sed), vec![true, false, false]);
    }

    #[test]
    fn seld_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SeldConfig {
            m_dft: 64,
            conv_filters: 4,
            pool_schedule: vec![4, 2, 2],
            gru_hidden: 8,
            fc_width: 16,
            n_classes: 2,
        };
        let mut ps = ParamStore::<f64>::new();
        let params = SeldParams::build(&mut ps, &mut rng, "acoustic", &cfg).unwrap();
        let noise: Vec<f32> = (0..320).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let clip = encode_bformat([0.0, 1.0, 0.0], &noise, 8000).unwrap();
        let feat = stft_features::<f64>(&clip, cfg.m_dft).unwrap();
        let mut g = Graph::<f64>::new();
        let fwd = seld_encoder_forward(&mut g, &ps, &params, &feat).unwrap();
        assert_eq!(g.shape(fwd.sed), &[feat.frames, 2]);
        assert_eq!(g.shape(fwd.doa), &[feat.frames, 6]);
        assert!(g.value(fwd.sed).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(g.value(fwd.doa).data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let emb = extract_embeddings(&mut g, &ps, &params, &feat).unwrap();
        assert_eq!(g.shape(emb.g_sem), &[16, feat.frames]);
        assert_eq!(g.shape(emb.g_loc), &[16, feat.frames]);
    }

    #[test]
    fn zero_input_embeddings_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = SeldConfig {
            m_dft: 64,
            conv_filters: 4,
            pool_schedule: vec![4, 2, 2],
            gru_hidden: 8,
            fc_width: 16,
            n_classes: 2,
        };
        let mut ps = ParamStore::<f64>::new();
        let params = SeldParams::build(&mut ps, &mut rng, "acoustic", &cfg).unwrap();
        let silent = AmbisonicClip::new(8000, [vec![0.0; 320], vec![0.0; 320], vec![0.0; 320], vec![0.0; 320]]).unwrap();
        let feat = stft_features::<f64>(&silent, cfg.m_dft).unwrap();
        let run = || {
            let mut g = Graph::<f64>::new();
            let emb = extract_embeddings(&mut g, &ps, &params, &feat).unwrap();
            g.value(emb.g_loc).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn seld_tiny_gradient_check() {
        // Whole encoder through FD on a handful of weight coordinates.
        use crate::gradcheck::rel_err;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SeldConfig {
            m_dft: 16,
            conv_filters: 4,
            pool_schedule: vec![2, 2, 1],
            gru_hidden: 8,
            fc_width: 8,
            n_classes: 2,
        };
        let mut ps = ParamStore::<f64>::new();
        let params = SeldParams::build(&mut ps, &mut rng, "acoustic", &cfg).unwrap();
        let noise: Vec<f32> = (0..56).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let clip = encode_bformat([0.6, 0.0, 0.8], &noise, 8000).unwrap();
        let feat = stft_features::<f64>(&clip, cfg.m_dft).unwrap();
        assert_eq!(feat.frames, 6);
        let loss_of = |ps: &ParamStore<f64>| -> (f64, Option<Graph<f64>>) {
            let mut g = Graph::new();
            let fwd = seld_encoder_forward(&mut g, ps, &params, &feat).unwrap();
            let s = g.mul(fwd.sed, fwd.sed).unwrap();
            let d = g.mul(fwd.doa, fwd.doa).unwrap();
            let ls = g.sum_all(s);
            let ld = g.sum_all(d);
            let l = g.add(ls, ld).unwrap();
            let v = g.value(l).item();
            g.backward(l).unwrap();
            (v, Some(g))
        };
        let (_, g) = loss_of(&ps);
        let g = g.unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(100);
        let mut checked = 0;
        let grads: std::collections::HashMap<usize, Vec<f64>> = g
            .bound_grads()
            .map(|(slot, gr)| (slot, gr.to_vec()))
            .collect();
        for id in ps.ids().collect::<Vec<_>>() {
            if checked >= 12 {
                break;
            }
            let Some(grad) = grads.get(&id) else { continue };
            let c = rng2.random_range(0..grad.len());
            let eps = 1e-5;
            let orig = ps.get(id).data()[c];
            ps.get_mut(id).data_mut()[c] = orig + eps;
            let mut gp = Graph::new();
            let fwd = seld_encoder_forward(&mut gp, &ps, &params, &feat).unwrap();
            let s = gp.mul(fwd.sed, fwd.sed).unwrap();
            let d = gp.mul(fwd.doa, fwd.doa).unwrap();
            let ls = gp.sum_all(s);
            let ld = gp.sum_all(d);
            let l = gp.add(ls, ld).unwrap();
            let up = gp.value(l).item();
            ps.get_mut(id).data_mut()[c] = orig - eps;
            let mut gm = Graph::new();
            let fwd = seld_encoder_forward(&mut gm, &ps, &params, &feat).unwrap();
            let s = gm.mul(fwd.sed, fwd.sed).unwrap();
            let d = gm.mul(fwd.doa, fwd.doa).unwrap();
            let ls = gm.sum_all(s);
            let ld = gm.sum_all(d);
            let l = gm.add(ls, ld).unwrap();
            let down = gm.value(l).item();
            ps.get_mut(id).data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!(
                rel_err(grad[c], fd) < 1e-4,
                "{}[{c}]: analytic {} vs fd {fd}",
                ps.name(id),
                grad[c]
            );
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} coordinates had gradients");
    }

    #[test]
    fn mono_collapse_destroys_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<f32> = (0..2000).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let clip = encode_bformat([0.0, 1.0, 0.0], &noise, 8000).unwrap().to_mono();
        let est = doa_oracle(&clip).unwrap();
        // All intensity components are equal: direction collapses to the diagonal.
        let diag = 1.0 / 3.0f64.sqrt();
        assert!(angular_error_deg(est, [diag, diag, diag]) < 1e-6);
    }
}
