//! HTK mel scale and triangular filterbanks.

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n + 1` frequencies evenly spaced on the mel scale between `lo` and `hi`.
pub fn mel_edges(lo_hz: f64, hi_hz: f64, n: usize) -> Vec<f64> {
    let (a, b) = (hz_to_mel(lo_hz), hz_to_mel(hi_hz));
    (0..=n)
        .map(|i| mel_to_hz(a + (b - a) * i as f64 / n as f64))
        .collect()
}

/// `n_mels × n_bins` triangular weights over FFT bins `0..=n_fft/2`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64, lo_hz: f64, hi_hz: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let pts = mel_edges(lo_hz, hi_hz, n_mels + 1);
    let bin_hz = sample_rate / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_round_trip() {
        for hz in [0.0, 30.0, 1000.0, 7800.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
    }

    #[test]
    fn filters_peak_at_centres() {
        let fb = mel_filterbank(80, 512, 16000.0, 0.0, 8000.0);
        assert_eq!(fb.len(), 80);
        assert!(fb.iter().all(|row| row.len() == 257));
        assert!(fb.iter().flatten().all(|&w| (0.0..=1.0).contains(&w)));
    }
}
