//! Run configuration: model geometry, provider selection and training knobs.
//!
//! Every struct rejects unknown keys so a typo in a config document fails
//! loudly instead of silently falling back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame rate of Whisper encoder states (1500 frames per 30 s chunk).
pub const WHISPER_FRAME_RATE: u32 = 50;
/// 7 s at 16 kHz.
pub const CLIP_SAMPLES_7S: usize = 112_000;
pub const SAMPLE_RATE: u32 = 16_000;

/// How PS, FB and WS streams are joined before the assessment module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConcatMode {
    /// Join along the feature axis at equal frame count.
    #[default]
    Feature,
    /// Stack frames of the three domains along time.
    Temporal,
}

impl std::fmt::Display for ConcatMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConcatMode::Feature => "feature",
            ConcatMode::Temporal => "temporal",
        })
    }
}

impl std::str::FromStr for ConcatMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(ConcatMode::Feature),
            "temporal" => Ok(ConcatMode::Temporal),
            other => Err(Error::Config(format!("unknown concat mode `{other}`"))),
        }
    }
}

/// Geometry of the front-end, FiDo stack and assessment head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub sample_rate: u32,
    /// Every waveform is zero-padded or truncated to this many samples.
    pub clip_samples: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub n_filters: usize,
    pub kernel_len: usize,
    pub mel_bins: usize,
    pub heads: usize,
    pub cnn_channels: Vec<usize>,
    pub lstm_hidden: usize,
    pub dense: usize,
    pub n_classes: usize,
    pub temporal_width: usize,
    pub layer_norm: bool,
    pub concat: ConcatMode,
    pub lfb_low_hz: f64,
    pub lfb_high_hz: f64,
    pub min_low_hz: f64,
    pub min_band_hz: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl ModelConfig {
    /// Full-size model: 7 s clips framed at 50 fps.
    pub fn standard() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            clip_samples: CLIP_SAMPLES_7S,
            n_fft: 512,
            hop: 320,
            n_filters: 128,
            kernel_len: 251,
            mel_bins: 80,
            heads: 8,
            cnn_channels: vec![16, 32, 64, 128],
            lstm_hidden: 128,
            dense: 128,
            n_classes: 10,
            temporal_width: 128,
            layer_norm: false,
            concat: ConcatMode::Feature,
            lfb_low_hz: 30.0,
            lfb_high_hz: 7800.0,
            min_low_hz: 1.0,
            min_band_hz: 50.0,
        }
    }

    /// Four frames, `d_ps = 16`, `d_fb = 8`, two heads. Used for gradient
    /// checks; pair it with `d_ws = 16`.
    pub fn tiny() -> Self {
        Self {
            clip_samples: 64,
            n_fft: 32,
            hop: 16,
            n_filters: 8,
            kernel_len: 9,
            mel_bins: 8,
            heads: 2,
            cnn_channels: vec![2, 2, 3, 4],
            lstm_hidden: 4,
            dense: 4,
            temporal_width: 4,
            ..Self::standard()
        }
    }

    /// Sixteen frames of 64 samples: large enough to see SNR in the spectra,
    /// small enough to train in seconds.
    pub fn small() -> Self {
        Self {
            clip_samples: 1024,
            n_fft: 64,
            hop: 64,
            n_filters: 8,
            kernel_len: 31,
            mel_bins: 16,
            heads: 2,
            cnn_channels: vec![4, 4, 8, 8],
            lstm_hidden: 8,
            dense: 8,
            temporal_width: 8,
            ..Self::standard()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn frames(&self) -> usize {
        self.clip_samples / self.hop
    }

    /// PS width: the Nyquist bin is dropped so the width splits evenly
    /// across heads.
    pub fn d_ps(&self) -> usize {
        self.n_fft / 2
    }

    pub fn d_fb(&self) -> usize {
        self.n_filters
    }

    /// Output width of the CNN, and of the WS adapter that matches it.
    pub fn d_cnn(&self) -> usize {
        *self.cnn_channels.last().unwrap_or(&0)
    }

    /// Width of one channel's fused output.
    pub fn fido_width(&self) -> usize {
        match self.concat {
            ConcatMode::Feature => 2 * self.d_cnn(),
            ConcatMode::Temporal => self.d_cnn(),
        }
    }

    /// Time extent of one channel's fused output.
    pub fn fido_frames(&self) -> usize {
        match self.concat {
            ConcatMode::Feature => self.frames(),
            ConcatMode::Temporal => 3 * self.frames(),
        }
    }

    pub fn validate(&self, d_ws: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hop == 0 || self.clip_samples % self.hop != 0 {
            return fail(format!(
                "hop {} must divide clip length {}",
                self.hop, self.clip_samples
            ));
        }
        if self.n_fft < self.hop || self.n_fft % 2 != 0 {
            return fail(format!("n_fft {} must be even and ≥ hop {}", self.n_fft, self.hop));
        }
        if self.clip_samples <= self.n_fft / 2 {
            return fail("clip too short for centered framing".into());
        }
        if self.heads == 0 {
            return fail("heads must be ≥ 1".into());
        }
        for (name, d) in [("d_ps", self.d_ps()), ("d_fb", self.d_fb()), ("d_ws", d_ws)] {
            if d == 0 || d % self.heads != 0 {
                return fail(format!("{name} = {d} is not divisible by {} heads", self.heads));
            }
        }
        if self.kernel_len % 2 == 0 {
            return fail(format!("kernel_len {} must be odd", self.kernel_len));
        }
        if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
            return fail("cnn_channels must be non-empty and positive".into());
        }
        if self.n_classes < 2 || self.lstm_hidden == 0 || self.dense == 0 {
            return fail("n_classes ≥ 2, lstm_hidden ≥ 1, dense ≥ 1 required".into());
        }
        let nyq = self.sample_rate as f64 / 2.0;
        if !(0.0 < self.lfb_low_hz && self.lfb_low_hz < self.lfb_high_hz && self.lfb_high_hz < nyq)
        {
            return fail("LFB init range must satisfy 0 < low < high < Nyquist".into());
        }
        Ok(())
    }

    /// Whisper encoder states arrive at 50 fps; the PS and FB framing must
    /// land on the same grid.
    pub fn check_whisper_rate(&self) -> Result<()> {
        let sr = self.sample_rate as usize;
        if sr % self.hop != 0 || sr / self.hop != WHISPER_FRAME_RATE as usize {
            return Err(Error::Config(format!(
                "hop {} at {} Hz gives {:.3} frames/s; Whisper alignment needs {WHISPER_FRAME_RATE}",
                self.hop,
                self.sample_rate,
                self.sample_rate as f64 / self.hop as f64
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Precomputed embeddings read from disk.
    File,
    /// Seeded log-mel projection, for tests and desk-scale runs.
    #[default]
    Surrogate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub d_ws: usize,
    pub seed: u64,
    pub embedding_dir: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Surrogate,
            d_ws: 1280,
            seed: 0,
            embedding_dir: None,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_ws == 0 || self.d_ws % 8 != 0 {
            return Err(Error::Config(format!(
                "d_ws = {} must be a positive multiple of 8",
                self.d_ws
            )));
        }
        Ok(())
    }
}

/// Weights of the intelligibility, HASPI and HA-class loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 0.4,
            gamma3: 0.2,
        }
    }
}

impl LossWeights {
    pub fn combine(&self, l_int: f64, l_haspi: f64, l_ce: f64) -> f64 {
        self.gamma1 * l_int + self.gamma2 * l_haspi + self.gamma3 * l_ce
    }

    pub fn validate(&self) -> Result<()> {
        if [self.gamma1, self.gamma2, self.gamma3]
            .iter()
            .any(|g| !(g.is_finite() && *g >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Weight α of the frame-level terms inside the intelligibility and
    /// HASPI losses.
    pub frame_loss_weight: f64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many epochs without a dev RMSE improvement.
    pub patience: Option<usize>,
    pub clip_grad_norm: Option<f64>,
    pub provider: ProviderConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 50,
            batch_size: 1,
            seed: 0,
            loss_weights: LossWeights::default(),
            frame_loss_weight: 1.0,
            checkpoint_dir: None,
            patience: Some(10),
            clip_grad_norm: None,
            provider: ProviderConfig::default(),
            model: ModelConfig::standard(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be ≥ 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.frame_loss_weight >= 0.0) {
            return Err(Error::Config("frame_loss_weight must be ≥ 0".into()));
        }
        self.loss_weights.validate()?;
        self.provider.validate()?;
        self.model.validate(self.provider.d_ws)?;
        if self.provider.kind == ProviderKind::File {
            self.model.check_whisper_rate()?;
        }
        Ok(())
    }

    /// Parses a TOML or JSON document, chosen by file extension.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?,
        };
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}
