use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::config::ModelConfig;
use crate::dsp::{Domain, FeatureTensor, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Framing of the power spectrogram. The window is always periodic Hann and
/// frames are centred (reflect-padded) on multiples of `hop`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub center: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            hop: 320,
            center: true,
        }
    }
}

impl StftConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            n_fft: cfg.n_fft,
            hop: cfg.hop,
            center: true,
        }
    }

    fn check(&self, len: usize) -> Result<usize> {
        if self.hop == 0 || self.n_fft < self.hop || len % self.hop != 0 {
            return Err(Error::Config(format!(
                "STFT n_fft={} hop={} cannot frame {len} samples on an exact grid",
                self.n_fft, self.hop
            )));
        }
        if !self.center {
            return Err(Error::Config(
                "uncentred framing does not align with the encoder frame grid".into(),
            ));
        }
        if len <= self.n_fft / 2 {
            return Err(Error::Config(format!("{len} samples too short for n_fft {}", self.n_fft)));
        }
        Ok(len / self.hop)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Raw power spectrum frames: `len / hop` rows of `n_fft/2 + 1` bins.
///
/// The trailing centred frame is dropped so that a 7 s clip at hop 320
/// yields exactly 350 frames.
pub fn power_frames<S: Scalar>(samples: &[S], cfg: &StftConfig) -> Result<Tensor<S>> {
    let frames = cfg.check(samples.len())?;
    let n_fft = cfg.n_fft;
    let bins = n_fft / 2 + 1;
    let window: Vec<S> = (0..n_fft)
        .map(|i| S::of(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos()))
        .collect();
    let fft = FftPlanner::<S>::new().plan_fft_forward(n_fft);
    let half = (n_fft / 2) as isize;
    let mut out = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(S::zero(), S::zero()); n_fft];
    for t in 0..frames {
        let start = (t * cfg.hop) as isize - half;
        for (j, slot) in buf.iter_mut().enumerate() {
            let v = samples[reflect(start + j as isize, samples.len())];
            *slot = Complex::new(v * window[j], S::zero());
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.re * c.re + c.im * c.im));
    }
    Tensor::from_vec(vec![frames, bins], out)
}

/// Log-compressed power spectrogram, `T × n_fft/2` (Nyquist bin dropped).
pub fn stft_power<S: Scalar>(w: &Waveform<S>, cfg: &StftConfig) -> Result<FeatureTensor<S>> {
    let p = power_frames(&w.samples, cfg)?;
    let (t, bins) = p.dims2()?;
    let d = bins - 1;
    let mut out = Vec::with_capacity(t * d);
    for r in 0..t {
        out.extend(p.row(r)[..d].iter().map(|&v| v.ln_1p()));
    }
    Ok(FeatureTensor {
        domain: Domain::Ps,
        data: Tensor::from_vec(vec![t, d], out)?,
    })
}
