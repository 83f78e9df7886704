use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::dsp::mel::mel_filterbank;
use crate::dsp::{power_frames, Domain, FeatureTensor, StftConfig, Waveform};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const LOG_MEL_FLOOR: f64 = 1e-10;

/// `T × mel_bins` log10 mel energies on the PS frame grid.
pub fn logmel<S: Scalar>(w: &Waveform<S>, cfg: &ModelConfig) -> Result<FeatureTensor<S>> {
    let p = power_frames(&w.samples, &StftConfig::from_model(cfg))?;
    let (t, bins) = p.dims2()?;
    let fb = mel_filterbank(cfg.mel_bins, cfg.n_fft, cfg.sample_rate as f64, 0.0, cfg.sample_rate as f64 / 2.0);
    let mut out = Vec::with_capacity(t * cfg.mel_bins);
    for r in 0..t {
        let row = p.row(r);
        for filt in &fb {
            let e: f64 = (0..bins).map(|k| filt[k] * row[k].as_f64()).sum();
            out.push(S::of(e.max(LOG_MEL_FLOOR).log10()));
        }
    }
    Ok(FeatureTensor {
        domain: Domain::Ps,
        data: Tensor::from_vec(vec![t, cfg.mel_bins], out)?,
    })
}

/// Deterministic stand-in for a speech encoder: seeded random projection of
/// the log-mel frames followed by `tanh`.
#[derive(Clone, Debug)]
pub struct SurrogateEncoder<S> {
    projection: Tensor<S>,
}

impl<S: Scalar> SurrogateEncoder<S> {
    pub fn new(mel_bins: usize, d_ws: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.1 / (mel_bins as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..mel_bins * d_ws).map(|_| S::of(normal.sample(&mut rng))).collect();
        Self {
            projection: Tensor::from_vec(vec![mel_bins, d_ws], data).expect("sized"),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn encode(&self, w: &Waveform<S>, cfg: &ModelConfig) -> Result<FeatureTensor<S>> {
        let mel = logmel(w, cfg)?;
        Ok(FeatureTensor {
            domain: Domain::Ws,
            data: mel.data.matmul(&self.projection)?.map(S::tanh),
        })
    }
}

/// One-shot helper: builds the encoder for `(seed, d_ws)` and encodes `w`.
pub fn surrogate_encode<S: Scalar>(
    w: &Waveform<S>,
    cfg: &ModelConfig,
    d_ws: usize,
    seed: u64,
) -> Result<FeatureTensor<S>> {
    SurrogateEncoder::new(cfg.mel_bins, d_ws, seed).encode(w, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Channel;

    fn std_wave(samples: Vec<f64>) -> Waveform<f64> {
        Waveform::new(samples, 16_000, Channel::Left)
    }

    fn tone(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16_000.0).sin())
            .collect()
    }

    #[test]
    fn zero_input_hits_floor() {
        let cfg = ModelConfig::standard();
        let m = logmel(&std_wave(vec![0.0; 112_000]), &cfg).unwrap();
        assert_eq!(m.data.shape(), &[350, 80]);
        assert!(m.data.data().iter().all(|&v| v == -10.0));

        let ws = surrogate_encode(&std_wave(vec![0.0; 112_000]), &cfg, 64, 3).unwrap();
        let enc = SurrogateEncoder::<f64>::new(80, 64, 3);
        let floor = Tensor::full(&[1, 80], -10.0).matmul(&enc.projection).unwrap().map(f64::tanh);
        for r in 0..350 {
            assert_eq!(ws.data.row(r), floor.data());
        }
    }

    #[test]
    fn tone_has_stable_mel_peak() {
        let cfg = ModelConfig::standard();
        let m = logmel(&std_wave(tone(112_000)), &cfg).unwrap();
        let argmax = |r: &[f64]| (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
        let peak = argmax(m.data.row(5));
        let pts = crate::dsp::mel::mel_edges(0.0, 8000.0, 81);
        assert!(pts[peak] < 1000.0 && 1000.0 < pts[peak + 2], "peak band {peak}");
        for t in 1..349 {
            assert_eq!(argmax(m.data.row(t)), peak);
        }
    }

    #[test]
    fn output_is_bounded_and_deterministic() {
        let cfg = ModelConfig::standard();
        let w = std_wave(tone(112_000));
        let a = surrogate_encode(&w, &cfg, 64, 11).unwrap();
        let b = surrogate_encode(&w, &cfg, 64, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.data.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn framing_is_local() {
        let cfg = ModelConfig::standard();
        let base = tone(112_000);
        let mut other = base.clone();
        for v in &mut other[56_000..] {
            *v = -*v * 0.3 + 0.1;
        }
        let a = surrogate_encode(&std_wave(base), &cfg, 64, 0).unwrap();
        let b = surrogate_encode(&std_wave(other), &cfg, 64, 0).unwrap();
        for t in 0..170 {
            for (x, y) in a.data.row(t).iter().zip(b.data.row(t)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert_ne!(a.data.row(300), b.data.row(300));
    }
}
