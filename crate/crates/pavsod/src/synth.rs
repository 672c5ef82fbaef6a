//! Procedural panoramic clips with a moving, sound-emitting salient object.
//!
//! Each clip is a short ER-projected scene: one bright disc (the object)
//! moves along a great circle and emits a class-dependent burst (tone or
//! noise) encoded into first-order ambisonics from its true direction;
//! silent distractor discs of similar size and color sit still. The mask
//! marks exactly the pixels whose sphere direction lies within the object's
//! angular radius, so audio is strictly informative about which disc
//! matters. Everything is a pure function of the seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acoustic::{burst_signal, encode_bformat, random_direction, AmbisonicClip};
use crate::error::{Error, Result};
use crate::geometry::{pixel_to_sphere, ErGrid};
use crate::image_io::{GrayImage, RgbImage};
use crate::wav;

/// Dataset-level generation knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub width: usize,
    pub frames: usize,
    /// Object angular radius, radians; must stay below pi/4.
    pub radius: f64,
    pub n_distractors: usize,
    pub sample_rate: u32,
    pub samples_per_frame: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 64,
            frames: 3,
            radius: 0.62,
            n_distractors: 3,
            sample_rate: 8000,
            samples_per_frame: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distractor {
    pub dir: [f64; 3],
    pub color: [u8; 3],
    pub radius: f64,
}

/// One fully resolved scene; rendering is deterministic given this.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub trajectory: Vec<[f64; 3]>,
    pub radius: f64,
    pub distractors: Vec<Distractor>,
    pub class_id: usize,
    pub sample_rate: u32,
    pub samples_per_frame: usize,
    pub seed: u64,
}

/// Object colors by audio class: tone bursts are warm, noise bursts cool.
pub const CLASS_COLORS: [[u8; 3]; 2] = [[235, 120, 70], [70, 140, 235]];

fn rotate_about(axis: [f64; 3], v: [f64; 3], angle: f64) -> [f64; 3] {
    // Rodrigues rotation.
    let (s, c) = angle.sin_cos();
    let cross = [
        axis[1] * v[2] - axis[2] * v[1],
        axis[2] * v[0] - axis[0] * v[2],
        axis[0] * v[1] - axis[1] * v[0],
    ];
    let dot = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = v[i] * c + cross[i] * s + axis[i] * dot * (1.0 - c);
    }
    let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    [out[0] / n, out[1] / n, out[2] / n]
}

fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
        .acos()
}

impl SceneSpec {
    /// Resolve a random scene from the seed: trajectory along a random
    /// great circle, silent distractors kept clear of the object's path.
    pub fn random(base: &SceneParams, seed: u64) -> Result<SceneSpec> {
        if base.radius >= std::f64::consts::FRAC_PI_4 {
            return Err(Error::invalid("scene", format!("radius {} >= pi/4", base.radius)));
        }
        if base.width % 2 != 0 {
            return Err(Error::invalid("scene", "width must be even"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
        let class_id = rng.random_range(0..crate::acoustic::N_CLASSES);
        let start = random_direction(&mut rng);
        // Rotation axis orthogonal to the start direction.
        let helper = random_direction(&mut rng);
        let mut axis = [
            start[1] * helper[2] - start[2] * helper[1],
            start[2] * helper[0] - start[0] * helper[2],
            start[0] * helper[1] - start[1] * helper[0],
        ];
        let n = axis.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            axis = [0.0, 0.0, 1.0];
        } else {
            for a in &mut axis {
                *a /= n;
            }
        }
        let step = rng.random_range(0.08..0.18);
        let trajectory: Vec<[f64; 3]> = (0..base.frames)
            .map(|t| rotate_about(axis, start, step * t as f64))
            .collect();

        let mut distractors = Vec::new();
        let mut attempts = 0;
        while distractors.len() < base.n_distractors && attempts < 1000 {
            attempts += 1;
            let dir = random_direction(&mut rng);
            let clear = trajectory
                .iter()
                .all(|t| angle_between(dir, *t) > base.radius * 2.5)
                && distractors
                    .iter()
                    .all(|d: &Distractor| angle_between(dir, d.dir) > base.radius * 2.0);
            if !clear {
                continue;
            }
            // Visually similar: same palette, randomly dimmed.
            let palette = CLASS_COLORS[rng.random_range(0..CLASS_COLORS.len())];
            let dim = rng.random_range(0.75..1.0);
            let color = [
                (f64::from(palette[0]) * dim) as u8,
                (f64::from(palette[1]) * dim) as u8,
                (f64::from(palette[2]) * dim) as u8,
            ];
            distractors.push(Distractor {
                dir,
                color,
                radius: base.radius,
            });
        }
        Ok(SceneSpec {
            width: base.width,
            height: base.width / 2,
            frames: base.frames,
            trajectory,
            radius: base.radius,
            distractors,
            class_id,
            sample_rate: base.sample_rate,
            samples_per_frame: base.samples_per_frame,
            seed,
        })
    }
}

/// A rendered clip: frames, ambisonic audio, masks, per-frame true DOA.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub frames: Vec<RgbImage>,
    pub audio: AmbisonicClip,
    pub masks: Vec<GrayImage>,
    pub doa_truth: Vec<[f64; 3]>,
    pub class_id: usize,
}

fn pixel_hash(seed: u64, u: usize, v: usize, t: usize) -> u64 {
    let mut x = seed ^ (u as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (v as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (t as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// Render the scene: distractors under the object, background gradient
/// with hash noise, mask = pixels within the object's angular radius,
/// audio = per-frame bursts encoded from the true direction.
pub fn render_clip(spec: &SceneSpec) -> Result<ClipSample> {
    for t in &spec.trajectory {
        let n = t.iter().map(|c| c * c).sum::<f64>();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("render_clip", "trajectory direction not unit"));
        }
    }
    if spec.radius >= std::f64::consts::FRAC_PI_4 {
        return Err(Error::invalid("render_clip", "object radius >= pi/4"));
    }
    let grid = ErGrid::new(spec.width, spec.height)?;
    let cos_r = spec.radius.cos();
    let obj_color = CLASS_COLORS[spec.class_id % CLASS_COLORS.len()];

    // Per-pixel sphere directions, computed once.
    let mut dirs = Vec::with_capacity(spec.width * spec.height);
    for v in 0..spec.height {
        for u in 0..spec.width {
            dirs.push(pixel_to_sphere(grid, u, v)?);
        }
    }

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut audio_channels: [Vec<f32>; 4] = Default::default();
    let mut audio_rng =
        ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0xA0D1_0A0D_10A0_D10A).wrapping_add(7));

    for t in 0..spec.frames {
        let obj_dir = spec.trajectory[t];
        let mut img = RgbImage::new(spec.width, spec.height);
        let mut mask = GrayImage::new(spec.width, spec.height);
        for v in 0..spec.height {
            for u in 0..spec.width {
                let d = dirs[v * spec.width + u];
                let noise = (pixel_hash(spec.seed, u, v, t) % 17) as i32 - 8;
                let base = 25.0 + 30.0 * v as f64 / spec.height as f64;
                let bg = (base as i32 + noise).clamp(0, 255) as u8;
                let mut color = [bg, bg, bg];
                for dd in &spec.distractors {
                    let dot: f64 = d.iter().zip(&dd.dir).map(|(a, b)| a * b).sum();
                    if dot >= dd.radius.cos() {
                        color = dd.color;
                    }
                }
                let dot: f64 = d.iter().zip(&obj_dir).map(|(a, b)| a * b).sum();
                if dot >= cos_r {
                    color = obj_color;
                    mask.put(u, v, 255);
                }
                img.put(u, v, color);
            }
        }
        frames.push(img);
        masks.push(mask);

        let amp = audio_rng.random_range(0.4..0.9);
        let sig = burst_signal(
            &mut audio_rng,
            spec.class_id,
            spec.samples_per_frame,
            spec.sample_rate,
            amp,
        );
        let seg = encode_bformat(obj_dir, &sig, spec.sample_rate)?;
        for c in 0..4 {
            audio_channels[c].extend_from_slice(seg.channel(c));
        }
    }
    Ok(ClipSample {
        frames,
        audio: AmbisonicClip::new(spec.sample_rate, audio_channels)?,
        masks,
        doa_truth: spec.trajectory.clone(),
        class_id: spec.class_id,
    })
}

// ── dataset on disk ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub dir: PathBuf,
    pub class_id: usize,
    pub seed: u64,
}

impl ManifestEntry {
    /// Disjoint split by seed parity: even seeds train, odd validate.
    pub fn is_train(&self) -> bool {
        self.seed % 2 == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn train(&self) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.is_train()).collect()
    }

    pub fn val(&self) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| !e.is_train()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", e.dir.display(), e.class_id, e.seed)
                .expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    what: "manifest",
                    offset: i,
                    detail: format!("expected 3 tab-separated fields, got {}", parts.len()),
                });
            }
            entries.push(ManifestEntry {
                dir: PathBuf::from(parts[0]),
                class_id: parts[1].parse().map_err(|e| Error::Parse {
                    what: "manifest",
                    offset: i,
                    detail: format!("bad class: {e}"),
                })?,
                seed: parts[2].parse().map_err(|e| Error::Parse {
                    what: "manifest",
                    offset: i,
                    detail: format!("bad seed: {e}"),
                })?,
            });
        }
        Ok(Manifest { entries })
    }
}

/// Audio treatment applied when a dataset is written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AudioMode {
    #[default]
    Ambisonic,
    /// W channel replicated onto all four: spectra survive, direction dies.
    Mono,
    /// All channels silent.
    None,
}

pub fn save_clip(clip: &ClipSample, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, frame) in clip.frames.iter().enumerate() {
        frame.write_ppm(&dir.join(format!("frame_{i:02}.ppm")))?;
    }
    for (i, mask) in clip.masks.iter().enumerate() {
        mask.write_pgm(&dir.join(format!("mask_{i:02}.pgm")))?;
    }
    wav::write_wav_f32(&dir.join("audio.wav"), clip.audio.sample_rate, clip.audio.channels())?;
    let mut meta = String::new();
    writeln!(meta, "class {}", clip.class_id).expect("meta write");
    writeln!(meta, "frames {}", clip.frames.len()).expect("meta write");
    for (t, d) in clip.doa_truth.iter().enumerate() {
        writeln!(meta, "doa {t} {} {} {}", d[0], d[1], d[2]).expect("meta write");
    }
    std::fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

pub fn load_clip(dir: &Path) -> Result<ClipSample> {
    let meta = std::fs::read_to_string(dir.join("meta.txt"))?;
    let mut class_id = None;
    let mut n_frames = None;
    let mut doa = Vec::new();
    for (i, line) in meta.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("class") => {
                class_id = Some(it.next().and_then(|v| v.parse().ok()).ok_or(Error::Parse {
                    what: "clip meta",
                    offset: i,
                    detail: "bad class line".into(),
                })?)
            }
            Some("frames") => {
                n_frames = Some(it.next().and_then(|v| v.parse().ok()).ok_or(Error::Parse {
                    what: "clip meta",
                    offset: i,
                    detail: "bad frames line".into(),
                })?)
            }
            Some("doa") => {
                let mut vals = [0.0f64; 4];
                for v in vals.iter_mut() {
                    *v = it.next().and_then(|x| x.parse().ok()).ok_or(Error::Parse {
                        what: "clip meta",
                        offset: i,
                        detail: "bad doa line".into(),
                    })?;
                }
                doa.push([vals[1], vals[2], vals[3]]);
            }
            _ => {}
        }
    }
    let class_id = class_id.ok_or(Error::Parse {
        what: "clip meta",
        offset: 0,
        detail: "missing class".into(),
    })?;
    let n_frames: usize = n_frames.ok_or(Error::Parse {
        what: "clip meta",
        offset: 0,
        detail: "missing frames".into(),
    })?;
    let mut frames = Vec::with_capacity(n_frames);
    let mut masks = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        frames.push(RgbImage::read_ppm(&dir.join(format!("frame_{i:02}.ppm")))?);
        masks.push(GrayImage::read_pgm(&dir.join(format!("mask_{i:02}.pgm")))?);
    }
    let w = wav::read_wav_channels(&dir.join("audio.wav"), 4)?;
    let [c0, c1, c2, c3]: [Vec<f32>; 4] = w.samples.try_into().expect("4 channels checked");
    Ok(ClipSample {
        frames,
        audio: AmbisonicClip::new(w.sample_rate, [c0, c1, c2, c3])?,
        masks,
        doa_truth: doa,
        class_id,
    })
}

/// Generate `n_clips` scenes, render and write them under `out_dir`, and
/// return (writing) the manifest. Clip seeds are consecutive so the seed
/// parity split interleaves train and validation.
pub fn make_dataset(
    n_clips: usize,
    base: &SceneParams,
    seed: u64,
    out_dir: &Path,
    audio_mode: AudioMode,
) -> Result<Manifest> {
    if n_clips == 0 {
        return Err(Error::invalid("make_dataset", "n_clips must be >= 1"));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::default();
    for i in 0..n_clips {
        let clip_seed = seed.wrapping_mul(1_000_000).wrapping_add(i as u64);
        let spec = SceneSpec::random(base, clip_seed)?;
        let mut clip = render_clip(&spec)?;
        match audio_mode {
            AudioMode::Ambisonic => {}
            AudioMode::Mono => clip.audio = clip.audio.to_mono(),
            AudioMode::None => clip.audio = clip.audio.silence_like(),
        }
        let dir = out_dir.join(format!("clip_{i:04}"));
        save_clip(&clip, &dir)?;
        manifest.entries.push(ManifestEntry {
            dir,
            class_id: clip.class_id,
            seed: clip_seed,
        });
    }
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
