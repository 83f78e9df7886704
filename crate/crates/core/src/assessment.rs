//! BLSTM + attention over the fused two-channel features, with frame-level
//! intelligibility / HASPI scorers and the hearing-aid class head.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fido::DenseParams;
use crate::numerics::{xavier, Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// One LSTM direction. Gate column order is `i, f, g, o`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    fn init<S: Scalar, R: Rng>(store: &mut ParamStore<S>, prefix: &str, d_in: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let h4 = 4 * hidden;
        let mut b = Tensor::zeros(&[h4]);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = S::one());
        Ok(Self {
            w_ih: store.add(format!("{prefix}.w_ih"), xavier(rng, &[d_in, h4], d_in, h4))?,
            w_hh: store.add(format!("{prefix}.w_hh"), xavier(rng, &[hidden, h4], hidden, h4))?,
            b: store.add(format!("{prefix}.b"), b)?,
            hidden,
        })
    }

    /// Hidden states `T × H`, in input order regardless of direction.
    fn run<S: Scalar>(&self, g: &Graph<S>, store: &ParamStore<S>, x: Var, reverse: bool) -> Result<Var> {
        let t_len = g.shape(x)[0];
        let hd = self.hidden;
        let xw = g.add_row_bias(g.matmul(x, g.param(store, self.w_ih))?, g.param(store, self.b))?;
        let w_hh = g.param(store, self.w_hh);
        let mut h = g.constant(Tensor::zeros(&[1, hd]));
        let mut c = g.constant(Tensor::zeros(&[1, hd]));
        let mut outs = vec![h; t_len];
        let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for t in order {
            let z = g.add(g.slice_rows(xw, t, 1)?, g.matmul(h, w_hh)?)?;
            let i = g.sigmoid(g.slice_cols(z, 0, hd)?);
            let f = g.sigmoid(g.slice_cols(z, hd, hd)?);
            let gg = g.tanh(g.slice_cols(z, 2 * hd, hd)?);
            let o = g.sigmoid(g.slice_cols(z, 3 * hd, hd)?);
            c = g.add(g.mul(f, c)?, g.mul(i, gg)?)?;
            h = g.mul(o, g.tanh(c))?;
            outs[t] = h;
        }
        g.concat_rows(&outs)
    }
}

#[derive(Clone, Debug)]
pub struct BlstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub dense: DenseParams,
    /// Frame-attention scorer: `tanh(F·W + b)·v`.
    pub att: DenseParams,
    pub att_v: ParamId,
}

impl BlstmParams {
    pub fn init<S: Scalar, R: Rng>(store: &mut ParamStore<S>, d_in: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let h = cfg.lstm_hidden;
        let d = cfg.dense;
        Ok(Self {
            fwd: LstmParams::init(store, "blstm.fwd", d_in, h, rng)?,
            bwd: LstmParams::init(store, "blstm.bwd", d_in, h, rng)?,
            dense: DenseParams::init(store, "blstm.dense", 2 * h, d, rng)?,
            att: DenseParams::init(store, "attention.proj", d, d, rng)?,
            att_v: store.add("attention.v", xavier(rng, &[d, 1], d, 1))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BlstmOutput {
    /// `T × D` frame embeddings.
    pub frames: Var,
    /// `1 × T` attention weights over time.
    pub weights: Var,
    /// `1 × D` attention-pooled embedding.
    pub pooled: Var,
}

pub fn blstm_attention_forward<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    p: &BlstmParams,
    x: Var,
) -> Result<BlstmOutput> {
    if g.shape(x)[0] == 0 {
        return Err(Error::Shape("assessment input has zero frames".into()));
    }
    let hf = p.fwd.run(g, store, x, false)?;
    let hb = p.bwd.run(g, store, x, true)?;
    let frames = g.relu(p.dense.forward(g, store, g.concat_cols(&[hf, hb])?)?);
    let scores = g.matmul(g.tanh(p.att.forward(g, store, frames)?), g.param(store, p.att_v))?;
    let weights = g.softmax_rows(g.transpose(scores)?)?;
    let pooled = g.matmul(weights, frames)?;
    Ok(BlstmOutput { frames, weights, pooled })
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub int: DenseParams,
    pub haspi: DenseParams,
    pub class: DenseParams,
}

impl HeadParams {
    pub fn init<S: Scalar, R: Rng>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            int: DenseParams::init(store, "head.int", cfg.dense, 1, rng)?,
            haspi: DenseParams::init(store, "head.haspi", cfg.dense, 1, rng)?,
            class: DenseParams::init(store, "head.class", cfg.dense, cfg.n_classes, rng)?,
        })
    }
}

/// Graph handles of the task outputs.
#[derive(Clone, Debug)]
pub struct TaskOutput {
    /// `T × 1`, on 0–100.
    pub frame_int: Var,
    /// `T × 1`, on 0–1.
    pub frame_haspi: Var,
    pub utt_int: Var,
    pub utt_haspi: Var,
    /// `1 × C` log-probabilities.
    pub class_logp: Var,
}

pub fn task_forward<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    p: &HeadParams,
    frames: Var,
    pooled: Var,
) -> Result<TaskOutput> {
    let frame_int = g.scale(g.sigmoid(p.int.forward(g, store, frames)?), S::of(100.0));
    let frame_haspi = g.sigmoid(p.haspi.forward(g, store, frames)?);
    Ok(TaskOutput {
        frame_int,
        frame_haspi,
        utt_int: g.mean(frame_int),
        utt_haspi: g.mean(frame_haspi),
        class_logp: g.log_softmax_rows(p.class.forward(g, store, pooled)?)?,
    })
}

/// Plain-value prediction for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S> {
    pub intelligibility: S,
    pub haspi: S,
    pub class_probs: Vec<S>,
    pub frame_int: Vec<S>,
    pub frame_haspi: Vec<S>,
}

impl<S: Scalar> Prediction<S> {
    pub fn from_graph(g: &Graph<S>, t: &TaskOutput) -> Self {
        Self {
            intelligibility: g.scalar_value(t.utt_int),
            haspi: g.scalar_value(t.utt_haspi),
            class_probs: g.value(t.class_logp).data().iter().map(|v| v.exp()).collect(),
            frame_int: g.value(t.frame_int).into_data(),
            frame_haspi: g.value(t.frame_haspi).into_data(),
        }
    }

    pub fn class(&self) -> usize {
        (0..self.class_probs.len())
            .max_by(|&a, &b| self.class_probs[a].partial_cmp(&self.class_probs[b]).unwrap())
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelConfig {
        ModelConfig {
            lstm_hidden: 3,
            dense: 4,
            n_classes: 3,
            ..ModelConfig::tiny()
        }
    }

    fn build(d_in: usize, seed: u64) -> (ParamStore<f64>, BlstmParams, HeadParams, ChaCha8Rng) {
        let cfg = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let b = BlstmParams::init(&mut s, d_in, &cfg, &mut rng).unwrap();
        let h = HeadParams::init(&mut s, &cfg, &mut rng).unwrap();
        (s, b, h, rng)
    }

    fn input(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor<f64> {
        Tensor::from_vec(vec![t, d], (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn predict(s: &ParamStore<f64>, b: &BlstmParams, h: &HeadParams, x: &Tensor<f64>) -> (Prediction<f64>, Tensor<f64>) {
        let g = Graph::new();
        let o = blstm_attention_forward(&g, s, b, g.constant(x.clone())).unwrap();
        let t = task_forward(&g, s, h, o.frames, o.pooled).unwrap();
        (Prediction::from_graph(&g, &t), g.value(o.weights))
    }

    #[test]
    fn zero_heads_give_midpoints_and_uniform_classes() {
        let (mut s, b, h, mut rng) = build(5, 0);
        for d in [&h.int, &h.haspi, &h.class] {
            let (rw, rb) = (s.value(d.w).shape().to_vec(), s.value(d.b).shape().to_vec());
            s.get_mut(d.w).value = Tensor::zeros(&rw);
            s.get_mut(d.b).value = Tensor::zeros(&rb);
        }
        let (p, _) = predict(&s, &b, &h, &input(&mut rng, 4, 5));
        assert_eq!(p.intelligibility, 50.0);
        assert_eq!(p.haspi, 0.5);
        for &c in &p.class_probs {
            assert!((c - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn utterance_is_frame_mean_and_weights_sum_to_one() {
        let (s, b, h, mut rng) = build(5, 1);
        let (p, w) = predict(&s, &b, &h, &input(&mut rng, 7, 5));
        let m = p.frame_int.iter().sum::<f64>() / 7.0;
        assert!((p.intelligibility - m).abs() < 1e-6);
        assert!((w.sum() - 1.0).abs() < 1e-6);
        assert!((p.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(p.frame_int.len(), 7);
    }

    #[test]
    fn single_frame_pools_to_itself() {
        let (s, b, _, mut rng) = build(5, 2);
        let g = Graph::new();
        let o = blstm_attention_forward(&g, &s, &b, g.constant(input(&mut rng, 1, 5))).unwrap();
        assert_eq!(g.value(o.pooled).data(), g.value(o.frames).data());
    }

    #[test]
    fn raising_scorer_bias_raises_score() {
        let (mut s, b, h, mut rng) = build(5, 3);
        let x = input(&mut rng, 5, 5);
        let (before, _) = predict(&s, &b, &h, &x);
        s.get_mut(h.int.b).value.data_mut()[0] += 0.3;
        let (after, _) = predict(&s, &b, &h, &x);
        assert!(after.intelligibility > before.intelligibility);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut s, b, h, mut rng) = build(4, 4);
        let x = input(&mut rng, 3, 4);
        let report = grad_check(
            &mut s,
            |g: &Graph<f64>, s: &ParamStore<f64>| {
                let o = blstm_attention_forward(g, s, &b, g.constant(x.clone()))?;
                let t = task_forward(g, s, &h, o.frames, o.pooled)?;
                let l = g.add(g.scale(t.utt_int, 0.01), t.utt_haspi)?;
                let ce = g.pick(t.class_logp, 1)?;
                Ok(g.sub(l, ce)?)
            },
            1e-4,
            64,
            9,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
