//! Source of the WS features: precomputed encoder states on disk, or the
//! seeded surrogate.

mod embfile;
mod surrogate;

use std::path::{Path, PathBuf};

pub use embfile::{
    decode_embedding, encode_embedding, load_embedding, read_header, write_embedding, EmbeddingHeader,
    LoadedEmbedding, EMB_MAGIC, EMB_VERSION,
};
pub use surrogate::{logmel, surrogate_encode, SurrogateEncoder, LOG_MEL_FLOOR};

use crate::config::{ModelConfig, ProviderConfig, ProviderKind};
use crate::dsp::{Channel, FeatureTensor, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Either provider kind behind one call.
#[derive(Clone, Debug)]
pub enum Provider<S> {
    File { dir: Option<PathBuf>, d_ws: usize },
    Surrogate(SurrogateEncoder<S>),
}

impl<S: Scalar> Provider<S> {
    pub fn new(cfg: &ProviderConfig, model: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            ProviderKind::File => Provider::File {
                dir: cfg.embedding_dir.clone(),
                d_ws: cfg.d_ws,
            },
            ProviderKind::Surrogate => Provider::Surrogate(SurrogateEncoder::new(model.mel_bins, cfg.d_ws, cfg.seed)),
        })
    }

    pub fn d_ws(&self) -> usize {
        match self {
            Provider::File { d_ws, .. } => *d_ws,
            Provider::Surrogate(e) => e.dim(),
        }
    }

    /// Conventional location `<dir>/<id>.<l|r>.femb`.
    pub fn default_path(dir: &Path, id: &str, channel: Channel) -> PathBuf {
        dir.join(format!("{id}.{}.femb", channel.tag()))
    }

    /// WS features for one channel of one utterance. `explicit` overrides the
    /// directory layout when the manifest names a file.
    pub fn embed(
        &self,
        id: &str,
        explicit: Option<&Path>,
        wave: &Waveform<S>,
        model: &ModelConfig,
    ) -> Result<FeatureTensor<S>> {
        match self {
            Provider::Surrogate(enc) => enc.encode(wave, model),
            Provider::File { dir, d_ws } => {
                let path = match (explicit, dir) {
                    (Some(p), _) => p.to_path_buf(),
                    (None, Some(d)) => Self::default_path(d, id, wave.channel),
                    (None, None) => {
                        return Err(Error::Config(format!(
                            "no embedding path for `{id}` and no embedding_dir configured"
                        )))
                    }
                };
                let e = load_embedding(&path, Some(model.frames()))?;
                if e.features.dim() != *d_ws {
                    return Err(Error::Shape(format!(
                        "{}: d = {}, configured d_ws = {d_ws}",
                        path.display(),
                        e.features.dim()
                    )));
                }
                Ok(e.features)
            }
        }
    }
}
