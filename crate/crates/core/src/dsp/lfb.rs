//! SincNet-style learnable filterbank.

use crate::config::ModelConfig;
use crate::dsp::mel::mel_edges;
use crate::dsp::{Domain, FeatureTensor};
use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, SincBankSpec, Tensor, Var};
use crate::scalar::Scalar;

/// Learnable cutoffs of one filterbank. `low` and `band` hold the raw
/// (unconstrained) values in Hz; see [`Graph::sinc_bank`] for the mapping
/// to valid cutoffs.
#[derive(Clone, Debug)]
pub struct LfbParams {
    pub low: ParamId,
    pub band: ParamId,
    pub spec: SincBankSpec,
    pub hop: usize,
}

impl LfbParams {
    pub fn n_filters<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        store.value(self.low).len()
    }

    /// Effective `(low, high)` cutoffs in Hz after reparameterisation.
    pub fn cutoffs<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<(f64, f64)> {
        let lo = store.value(self.low).data();
        let bd = store.value(self.band).data();
        lo.iter()
            .zip(bd)
            .map(|(&l, &b)| {
                let c = crate::numerics::sinc_cutoffs(l.as_f64(), b.as_f64(), &self.spec);
                (c.low, c.high)
            })
            .collect()
    }
}

/// Registers a filterbank whose bands tile the mel scale between
/// `cfg.lfb_low_hz` and `cfg.lfb_high_hz`. The grid is deterministic.
pub fn init_lfb<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, cfg: &ModelConfig) -> Result<LfbParams> {
    let spec = SincBankSpec {
        kernel_len: cfg.kernel_len,
        sample_rate: cfg.sample_rate as f64,
        min_low_hz: cfg.min_low_hz,
        min_band_hz: cfg.min_band_hz,
    };
    let edges = mel_edges(cfg.lfb_low_hz, cfg.lfb_high_hz, cfg.n_filters);
    let low: Vec<S> = edges[..cfg.n_filters]
        .iter()
        .map(|&f| S::of(f - cfg.min_low_hz))
        .collect();
    let band: Vec<S> = edges
        .windows(2)
        .map(|w| S::of((w[1] - w[0] - cfg.min_band_hz).max(0.0)))
        .collect();
    let n = cfg.n_filters;
    Ok(LfbParams {
        low: store.add(format!("{prefix}.lfb.low_hz"), Tensor::from_vec(vec![n], low)?)?,
        band: store.add(format!("{prefix}.lfb.band_hz"), Tensor::from_vec(vec![n], band)?)?,
        spec,
        hop: cfg.hop,
    })
}

/// `T × K` log frame energies of the waveform through each band-pass.
pub fn lfb_forward<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    p: &LfbParams,
    wave: &Tensor<S>,
) -> Result<Var> {
    let kernels = g.sinc_bank(g.param(store, p.low), g.param(store, p.band), p.spec)?;
    let energy = g.frame_energy(wave, kernels, p.hop)?;
    Ok(g.ln(g.add_scalar(energy, S::one())))
}

/// Evaluates [`lfb_forward`] outside of training.
pub fn lfb_features<S: Scalar>(store: &ParamStore<S>, p: &LfbParams, wave: &Tensor<S>) -> Result<FeatureTensor<S>> {
    let g = Graph::new();
    let v = lfb_forward(&g, store, p, wave)?;
    Ok(FeatureTensor {
        domain: Domain::Fb,
        data: g.value(v),
    })
}
