//! Run configuration: model dimensions, loss weights, trainer settings and
//! ablation flags, with a line-based `key = value` file format
//! (`#` starts a comment). Unknown keys are hard errors carrying the line
//! number so the CLI can point at the offending line.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // Frame geometry.
    pub width: usize,
    pub frames: usize,
    // Visual encoder.
    pub widths: [usize; 4],
    pub tf_layers: usize,
    pub tf_heads: usize,
    pub ffn_mult: usize,
    pub decoder_width: usize,
    // Fusion.
    pub fusion_heads: usize,
    pub fusion_depth: usize,
    // Acoustic encoder.
    pub m_dft: usize,
    pub conv_filters: usize,
    pub gru_hidden: usize,
    pub fc_width: usize,
    pub n_classes: usize,
    // Loss and trainer.
    pub lambda_distill: f64,
    pub lambda_dice: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub precision: Precision,
    // Ablations.
    pub no_audio: bool,
    pub mono: bool,
    pub no_teacher: bool,
    pub no_spe: bool,
    pub concat_fusion: bool,
    pub no_loc_branch: bool,
    pub unfreeze_audio: bool,
    /// Use the spherical PE inside the visual transformer instead of the
    /// raster sinusoid (off by default; the SPE always feeds the fusion).
    pub visual_spe: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            width: 64,
            frames: 3,
            widths: [16, 32, 64, 96],
            tf_layers: 3,
            tf_heads: 4,
            ffn_mult: 2,
            decoder_width: 48,
            fusion_heads: 4,
            fusion_depth: 1,
            m_dft: 256,
            conv_filters: 16,
            gru_hidden: 32,
            fc_width: 64,
            n_classes: 2,
            lambda_distill: 5.0,
            lambda_dice: 1.0,
            lr: 1e-4,
            weight_decay: 0.0,
            batch: 2,
            steps: 500,
            seed: 0,
            precision: Precision::F32,
            no_audio: false,
            mono: false,
            no_teacher: false,
            no_spe: false,
            concat_fusion: false,
            no_loc_branch: false,
            unfreeze_audio: false,
            visual_spe: false,
        }
    }
}

impl Config {
    pub fn height(&self) -> usize {
        self.width / 2
    }

    pub fn feature_channels(&self) -> usize {
        self.widths[3]
    }

    /// Frequency max-pool schedule reducing `m_dft/2` bins to 2: the
    /// remaining power of two is split greedily into three factors of at
    /// most 8.
    pub fn pool_schedule(&self) -> Result<Vec<usize>> {
        if !self.m_dft.is_power_of_two() || self.m_dft < 16 {
            return Err(Error::invalid("config", format!("m_dft must be a power of two >= 16, got {}", self.m_dft)));
        }
        let mut total = (self.m_dft / 2 / 2).trailing_zeros() as usize;
        let mut out = Vec::with_capacity(3);
        for _ in 0..3 {
            let b = total.min(3);
            out.push(1usize << b);
            total -= b;
        }
        if total != 0 {
            return Err(Error::invalid("config", format!("m_dft {} too large for 3 pools", self.m_dft)));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |d: String| Err(Error::invalid("config", d));
        if self.width % 32 != 0 || self.width == 0 {
            return err(format!("width must be a positive multiple of 32, got {}", self.width));
        }
        if self.frames == 0 {
            return err("frames must be >= 1".into());
        }
        let c = self.feature_channels();
        if c % self.fusion_heads != 0 || c % self.tf_heads != 0 {
            return err(format!("feature channels {c} must divide by heads"));
        }
        if !self.no_spe && c % 6 != 0 {
            return err(format!("feature channels {c} must be divisible by 6 for the SPE"));
        }
        if self.fc_width % 2 != 0 {
            return err(format!("fc_width {} must be even for the 1-d PE", self.fc_width));
        }
        if self.batch == 0 {
            return err("batch must be >= 1".into());
        }
        self.pool_schedule()?;
        Ok(())
    }

    /// Parse a config file onto `self`, returning the updated copy.
    pub fn parse_str(&self, text: &str) -> Result<Config> {
        let mut cfg = self.clone();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::BadConfigValue {
                    line: i + 1,
                    detail: format!("expected `key = value`, got `{raw}`"),
                });
            };
            cfg.apply(key.trim(), value.trim(), i + 1)?;
        }
        Ok(cfg)
    }

    pub fn load(&self, path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        self.parse_str(&text)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        macro_rules! parse {
            ($t:ty) => {
                value.parse::<$t>().map_err(|e| Error::BadConfigValue {
                    line,
                    detail: format!("{key}: {e}"),
                })?
            };
        }
        match key {
            "width" => self.width = parse!(usize),
            "frames" => self.frames = parse!(usize),
            "widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::BadConfigValue {
                        line,
                        detail: format!("widths: {e}"),
                    })?;
                if parts.len() != 4 {
                    return Err(Error::BadConfigValue {
                        line,
                        detail: format!("widths needs 4 entries, got {}", parts.len()),
                    });
                }
                self.widths = [parts[0], parts[1], parts[2], parts[3]];
            }
            "tf_layers" => self.tf_layers = parse!(usize),
            "tf_heads" => self.tf_heads = parse!(usize),
            "ffn_mult" => self.ffn_mult = parse!(usize),
            "decoder_width" => self.decoder_width = parse!(usize),
            "fusion_heads" => self.fusion_heads = parse!(usize),
            "fusion_depth" => self.fusion_depth = parse!(usize),
            "m_dft" => self.m_dft = parse!(usize),
            "conv_filters" => self.conv_filters = parse!(usize),
            "gru_hidden" => self.gru_hidden = parse!(usize),
            "fc_width" => self.fc_width = parse!(usize),
            "n_classes" => self.n_classes = parse!(usize),
            "lambda_distill" => self.lambda_distill = parse!(f64),
            "lambda_dice" => self.lambda_dice = parse!(f64),
            "lr" => self.lr = parse!(f64),
            "weight_decay" => self.weight_decay = parse!(f64),
            "batch" => self.batch = parse!(usize),
            "steps" => self.steps = parse!(usize),
            "seed" => self.seed = parse!(u64),
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => {
                        return Err(Error::BadConfigValue {
                            line,
                            detail: format!("precision must be f32 or f64, got {other}"),
                        })
                    }
                }
            }
            "no_audio" => self.no_audio = parse!(bool),
            "mono" => self.mono = parse!(bool),
            "no_teacher" => self.no_teacher = parse!(bool),
            "no_spe" => self.no_spe = parse!(bool),
            "concat_fusion" => self.concat_fusion = parse!(bool),
            "no_loc_branch" => self.no_loc_branch = parse!(bool),
            "unfreeze_audio" => self.unfreeze_audio = parse!(bool),
            "visual_spe" => self.visual_spe = parse!(bool),
            other => {
                return Err(Error::UnknownConfigKey {
                    line,
                    key: other.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order. Parsing it back gives
    /// an identical config, and identical configs serialize identically.
    pub fn to_canonical_string(&self) -> String {
        let p = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        format!(
            "width = {}\nframes = {}\nwidths = {},{},{},{}\ntf_layers = {}\ntf_heads = {}\n\
             ffn_mult = {}\ndecoder_width = {}\nfusion_heads = {}\nfusion_depth = {}\n\
             m_dft = {}\nconv_filters = {}\ngru_hidden = {}\nfc_width = {}\nn_classes = {}\n\
             lambda_distill = {}\nlambda_dice = {}\nlr = {}\nweight_decay = {}\nbatch = {}\n\
             steps = {}\nseed = {}\nprecision = {}\nno_audio = {}\nmono = {}\nno_teacher = {}\n\
             no_spe = {}\nconcat_fusion = {}\nno_loc_branch = {}\nunfreeze_audio = {}\n\
             visual_spe = {}\n",
            self.width,
            self.frames,
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.widths[3],
            self.tf_layers,
            self.tf_heads,
            self.ffn_mult,
            self.decoder_width,
            self.fusion_heads,
            self.fusion_depth,
            self.m_dft,
            self.conv_filters,
            self.gru_hidden,
            self.fc_width,
            self.n_classes,
            self.lambda_distill,
            self.lambda_dice,
            self.lr,
            self.weight_decay,
            self.batch,
            self.steps,
            self.seed,
            p,
            self.no_audio,
            self.mono,
            self.no_teacher,
            self.no_spe,
            self.concat_fusion,
            self.no_loc_branch,
            self.unfreeze_audio,
            self.visual_spe,
        )
    }
}
