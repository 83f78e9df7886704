//! Waveform ingestion and the PS / FB front-ends.

mod lfb;
pub mod mel;
mod stft;
mod wav;

pub use lfb::{init_lfb, lfb_features, lfb_forward, LfbParams};
pub use stft::{power_frames, stft_power, StftConfig};
pub use wav::{ingest, pad_or_truncate, pad_to_7s, resample, write_wav_stereo, Channel, Waveform};

use crate::numerics::Tensor;

/// Acoustic domain a feature matrix belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    /// Power spectrogram.
    Ps,
    /// Learnable filterbank.
    Fb,
    /// Whisper (or surrogate) encoder states.
    Ws,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Ps => "PS",
            Domain::Fb => "FB",
            Domain::Ws => "WS",
        })
    }
}

/// Time-major `T × d` feature matrix tagged with its domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor<S> {
    pub domain: Domain,
    pub data: Tensor<S>,
}

impl<S: crate::Scalar> FeatureTensor<S> {
    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}
