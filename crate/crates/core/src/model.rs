//! Two-channel model: a FiDo stack per ear, feature-axis fusion, and the
//! shared assessment head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assessment::{blstm_attention_forward, task_forward, BlstmOutput, BlstmParams, HeadParams, Prediction, TaskOutput};
use crate::config::ModelConfig;
use crate::dsp::{pad_or_truncate, stft_power, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::fido::{fido_fuse, ChannelTrace, FidoChannelParams};
use crate::dsp::lfb_forward;
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::provider::Provider;
use crate::scalar::Scalar;

/// Front-end outputs for one ear. FB is not cached: it depends on the
/// trainable filter cutoffs and is rebuilt from `wave` on every pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelInputs<S> {
    /// Clip-length waveform.
    pub wave: Tensor<S>,
    /// `T × d_ps`.
    pub ps: Tensor<S>,
    /// `T × d_ws`.
    pub ws: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceInputs<S> {
    pub left: ChannelInputs<S>,
    pub right: ChannelInputs<S>,
}

impl<S: Scalar> ChannelInputs<S> {
    /// Pads/truncates to the clip length, then builds PS and WS.
    pub fn prepare(
        wave: &Waveform<S>,
        cfg: &ModelConfig,
        provider: &Provider<S>,
        id: &str,
        emb_path: Option<&Path>,
    ) -> Result<Self> {
        let w = pad_or_truncate(wave, cfg.clip_samples);
        let ps = stft_power(&w, &StftConfig::from_model(cfg))?.data;
        let ws = provider.embed(id, emb_path, &w, cfg)?.data;
        Ok(Self {
            wave: Tensor::from_vec(vec![w.samples.len()], w.samples)?,
            ps,
            ws,
        })
    }

    pub fn cast<T: Scalar>(&self) -> ChannelInputs<T> {
        ChannelInputs {
            wave: self.wave.cast(),
            ps: self.ps.cast(),
            ws: self.ws.cast(),
        }
    }
}

impl<S: Scalar> UtteranceInputs<S> {
    pub fn cast<T: Scalar>(&self) -> UtteranceInputs<T> {
        UtteranceInputs {
            left: self.left.cast(),
            right: self.right.cast(),
        }
    }
}

/// Graph handles of a full forward pass.
#[derive(Clone, Debug)]
pub struct ModelTrace {
    pub left: ChannelTrace,
    pub right: ChannelTrace,
    pub blstm: BlstmOutput,
    pub task: TaskOutput,
}

#[derive(Clone, Debug)]
pub struct FidoModel<S> {
    pub config: ModelConfig,
    pub d_ws: usize,
    pub store: ParamStore<S>,
    pub left: FidoChannelParams,
    pub right: FidoChannelParams,
    pub blstm: BlstmParams,
    pub heads: HeadParams,
}

pub type Model32 = FidoModel<f32>;
pub type Model64 = FidoModel<f64>;

impl<S: Scalar> FidoModel<S> {
    pub fn new(config: ModelConfig, d_ws: usize, seed: u64) -> Result<Self> {
        config.validate(d_ws)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let left = FidoChannelParams::init(&mut store, "left", &config, d_ws, &mut rng)?;
        let right = FidoChannelParams::init(&mut store, "right", &config, d_ws, &mut rng)?;
        let blstm = BlstmParams::init(&mut store, 2 * config.fido_width(), &config, &mut rng)?;
        let heads = HeadParams::init(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            d_ws,
            store,
            left,
            right,
            blstm,
            heads,
        })
    }

    /// Forward pass against an explicit parameter set (used by gradient
    /// checks, which perturb a copy of the store).
    pub fn forward_with(&self, g: &Graph<S>, store: &ParamStore<S>, x: &UtteranceInputs<S>) -> Result<ModelTrace> {
        let t = self.config.frames();
        for (side, c) in [("left", &x.left), ("right", &x.right)] {
            if c.ps.rows() != t {
                return Err(Error::Alignment {
                    left: format!("{side} PS"),
                    left_frames: c.ps.rows(),
                    right: "configured grid".into(),
                    right_frames: t,
                });
            }
        }
        let channel = |p: &FidoChannelParams, c: &ChannelInputs<S>| -> Result<ChannelTrace> {
            let fb = lfb_forward(g, store, &p.lfb, &c.wave)?;
            fido_fuse(g, store, p, g.constant(c.ps.clone()), fb, g.constant(c.ws.clone()))
        };
        let left = channel(&self.left, &x.left)?;
        let right = channel(&self.right, &x.right)?;
        let fused = g.concat_cols(&[left.out, right.out])?;
        let blstm = blstm_attention_forward(g, store, &self.blstm, fused)?;
        let task = task_forward(g, store, &self.heads, blstm.frames, blstm.pooled)?;
        Ok(ModelTrace {
            left,
            right,
            blstm,
            task,
        })
    }

    pub fn forward(&self, g: &Graph<S>, x: &UtteranceInputs<S>) -> Result<ModelTrace> {
        self.forward_with(g, &self.store, x)
    }

    pub fn predict(&self, x: &UtteranceInputs<S>) -> Result<Prediction<S>> {
        let g = Graph::new();
        let tr = self.forward(&g, x)?;
        Ok(Prediction::from_graph(&g, &tr.task))
    }

    /// Overwrites parameter values by name. Every parameter must be
    /// supplied with its exact shape.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<S>)>) -> Result<()> {
        let expected = self.store.len();
        let mut seen = 0usize;
        for (name, t) in values {
            let id = self
                .store
                .id(&name)
                .ok_or_else(|| Error::Shape(format!("checkpoint has unknown parameter `{name}`")))?;
            let p = self.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: checkpoint shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
            seen += 1;
        }
        if seen != expected {
            return Err(Error::Shape(format!("checkpoint has {seen} parameters, model has {expected}")));
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> FidoModel<T> {
        FidoModel {
            config: self.config.clone(),
            d_ws: self.d_ws,
            store: self.store.cast(),
            left: self.left.clone(),
            right: self.right.clone(),
            blstm: self.blstm.clone(),
            heads: self.heads.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn random_inputs(cfg: &ModelConfig, d_ws: usize, seed: u64) -> UtteranceInputs<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = cfg.frames();
        let mut r = |shape: &[usize], lo: f64, hi: f64| {
            let n = shape.iter().product();
            Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let mut ch = || ChannelInputs {
            wave: r(&[cfg.clip_samples], -0.5, 0.5),
            ps: r(&[t, cfg.d_ps()], 0.0, 2.0),
            ws: r(&[t, d_ws], -1.0, 1.0),
        };
        UtteranceInputs { left: ch(), right: ch() }
    }

    #[test]
    fn deterministic_and_bounded() {
        let cfg = ModelConfig::tiny();
        let m = Model64::new(cfg.clone(), 16, 3).unwrap();
        let x = random_inputs(&cfg, 16, 1);
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=100.0).contains(&a.intelligibility));
        assert!((0.0..=1.0).contains(&a.haspi));
        assert_eq!(a.frame_int.len(), cfg.frames());
        assert_eq!(a.class_probs.len(), 10);
    }

    #[test]
    fn channel_parameters_are_disjoint() {
        let m = Model64::new(ModelConfig::tiny(), 16, 0).unwrap();
        let left: Vec<_> = m.store.iter().filter(|(_, p)| p.name.starts_with("left.")).map(|(id, _)| id).collect();
        let right: Vec<_> = m.store.iter().filter(|(_, p)| p.name.starts_with("right.")).map(|(id, _)| id).collect();
        assert_eq!(left.len(), right.len());
        assert!(left.iter().all(|id| !right.contains(id)));
    }

    #[test]
    fn misaligned_ws_is_rejected() {
        let cfg = ModelConfig::tiny();
        let m = Model64::new(cfg.clone(), 16, 0).unwrap();
        let mut x = random_inputs(&cfg, 16, 2);
        x.right.ws = Tensor::zeros(&[cfg.frames() + 1, 16]);
        let e = m.predict(&x).unwrap_err();
        assert!(matches!(e, Error::Alignment { .. }), "{e}");
    }

    #[test]
    fn load_values_names_bad_parameter() {
        let cfg = ModelConfig::tiny();
        let small = Model64::new(cfg.clone(), 8, 0).unwrap();
        let mut big = Model64::new(cfg, 16, 0).unwrap();
        let vals = small.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        let msg = big.load_values(vals).unwrap_err().to_string();
        assert!(msg.contains("left.mhsa_ws.w_q"), "{msg}");
    }
}
