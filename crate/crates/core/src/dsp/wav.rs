use std::path::Path;

use crate::config::{CLIP_SAMPLES_7S, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Left,
    Right,
}

impl Channel {
    /// Suffix used in embedding file names.
    pub fn tag(self) -> &'static str {
        match self {
            Channel::Left => "l",
            Channel::Right => "r",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<S> {
    pub samples: Vec<S>,
    pub sample_rate: u32,
    pub channel: Channel,
}

impl<S: Scalar> Waveform<S> {
    pub fn new(samples: Vec<S>, sample_rate: u32, channel: Channel) -> Self {
        Self {
            samples,
            sample_rate,
            channel,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

const SUPPORTED_RATES: [u32; 4] = [16_000, 32_000, 44_100, 48_000];

/// Reads a PCM WAV and returns `(left, right)` at 16 kHz.
///
/// Mono input is duplicated onto both channels. Audio is peak-normalised only
/// when some sample exceeds full scale.
pub fn ingest<S: Scalar>(path: &Path) -> Result<(Waveform<S>, Waveform<S>)> {
    let audio_err = |msg: String| Error::Audio {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
    let spec = reader.spec();
    if !SUPPORTED_RATES.contains(&spec.sample_rate) {
        return Err(audio_err(format!("unsupported sample rate {}", spec.sample_rate)));
    }
    if !(1..=2).contains(&spec.channels) {
        return Err(audio_err(format!("unsupported channel count {}", spec.channels)));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let full = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full))
                .collect::<std::result::Result<_, _>>()
        }
        (fmt, bits) => return Err(audio_err(format!("unsupported encoding {fmt:?}/{bits} bit"))),
    }
    .map_err(|e| audio_err(e.to_string()))?;
    if interleaved.is_empty() {
        return Err(audio_err("zero-length audio".into()));
    }
    let nch = spec.channels as usize;
    let mut left: Vec<f64> = interleaved.iter().step_by(nch).copied().collect();
    let mut right: Vec<f64> = if nch == 2 {
        interleaved.iter().skip(1).step_by(2).copied().collect()
    } else {
        left.clone()
    };
    if spec.sample_rate != SAMPLE_RATE {
        left = resample(&left, spec.sample_rate, SAMPLE_RATE);
        right = resample(&right, spec.sample_rate, SAMPLE_RATE);
    }
    let peak = left.iter().chain(&right).fold(0.0f64, |m, v| m.max(v.abs()));
    if !peak.is_finite() {
        return Err(audio_err("non-finite samples".into()));
    }
    if peak > 1.0 {
        left.iter_mut().chain(right.iter_mut()).for_each(|v| *v /= peak);
    }
    let conv = |v: Vec<f64>, ch| Waveform::new(v.into_iter().map(S::of).collect(), SAMPLE_RATE, ch);
    Ok((conv(left, Channel::Left), conv(right, Channel::Right)))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

const ZERO_CROSSINGS: f64 = 32.0;
const ROLLOFF: f64 = 0.94;

/// Windowed-sinc polyphase resampling between integer rates.
///
/// Output sample `i` sits at input position `i·from/to`; the fractional
/// offset takes one of `to/g` values, so one tap table per phase is built
/// up front.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    let g = gcd(from as u64, to as u64);
    let up = to as u64 / g;
    let down = from as u64 / g;
    let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);
    let half = (ZERO_CROSSINGS / cutoff).ceil() as i64;
    let taps_per_phase = (2 * half) as usize;
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (0..taps_per_phase)
                .map(|j| {
                    // Tap j multiplies x[n0 - half + 1 + j].
                    let tau = frac + (half - 1 - j as i64) as f64;
                    kernel(tau, cutoff, half as f64)
                })
                .collect()
        })
        .collect();
    let out_len = (x.len() as u64 * up / down) as usize;
    (0..out_len)
        .map(|i| {
            let pos = i as u64 * down;
            let n0 = (pos / up) as i64;
            let taps = &phases[(pos % up) as usize];
            let mut acc = 0.0;
            for (j, &h) in taps.iter().enumerate() {
                let n = n0 - half + 1 + j as i64;
                if n >= 0 && (n as usize) < x.len() {
                    acc += h * x[n as usize];
                }
            }
            acc
        })
        .collect()
}

fn kernel(tau: f64, cutoff: f64, half: f64) -> f64 {
    use std::f64::consts::PI;
    if tau.abs() >= half {
        return 0.0;
    }
    let arg = PI * cutoff * tau;
    let sinc = if arg == 0.0 { 1.0 } else { arg.sin() / arg };
    let win = 0.5 + 0.5 * (PI * tau / half).cos();
    cutoff * sinc * win
}

/// Right-pads with zeros or truncates to exactly `n` samples.
pub fn pad_or_truncate<S: Scalar>(w: &Waveform<S>, n: usize) -> Waveform<S> {
    let mut samples = w.samples.clone();
    samples.resize(n, S::zero());
    Waveform::new(samples, w.sample_rate, w.channel)
}

/// Fixes a 16 kHz waveform at 7 s (112000 samples).
pub fn pad_to_7s<S: Scalar>(w: &Waveform<S>) -> Waveform<S> {
    pad_or_truncate(w, CLIP_SAMPLES_7S)
}

/// Writes a 16-bit PCM stereo WAV.
pub fn write_wav_stereo(path: &Path, left: &[f64], right: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    let q = |v: f64| (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
    for (&l, &r) in left.iter().zip(right) {
        w.write_sample(q(l)).map_err(err)?;
        w.write_sample(q(r)).map_err(err)?;
    }
    w.finalize().map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn downsampled_tone_matches_direct_synthesis() {
        for rate in [32_000u32, 44_100, 48_000] {
            let src = tone(1000.0, rate, rate as usize);
            let y = resample(&src, rate, 16_000);
            assert_eq!(y.len(), 16_000);
            let want = tone(1000.0, 16_000, 16_000);
            // Skip the filter's edge transients.
            let c = corr(&y[200..15_800], &want[200..15_800]);
            assert!(c > 0.999, "rate {rate}: corr {c}");
        }
    }

    #[test]
    fn pad_and_truncate() {
        let w = Waveform::new(vec![0.5f64; 48_000], 16_000, Channel::Left);
        let p = pad_to_7s(&w);
        assert_eq!(p.len(), 112_000);
        assert!(p.samples[48_000..].iter().all(|&v| v == 0.0));
        assert_eq!(&p.samples[..48_000], &w.samples[..]);

        let exact = Waveform::new(tone(300.0, 16_000, 112_000), 16_000, Channel::Left);
        assert_eq!(pad_to_7s(&exact), exact);

        let long = Waveform::new(tone(300.0, 16_000, 144_000), 16_000, Channel::Right);
        let t = pad_to_7s(&long);
        assert_eq!(t.samples, long.samples[..112_000].to_vec());
        assert_eq!(t.channel, Channel::Right);
    }
}
