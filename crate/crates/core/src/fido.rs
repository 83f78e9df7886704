//! Per-channel feature-importance stack: self-attention on each domain,
//! PS+FB fusion through a CNN, an adapter on WS, and the final join.

use rand::Rng;

use crate::config::{ConcatMode, ModelConfig};
use crate::dsp::{init_lfb, lfb_forward, Domain, LfbParams};
use crate::error::{Error, Result};
use crate::numerics::{xavier, Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub layer_norm: bool,
}

impl MhsaParams {
    pub fn init<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        dim: usize,
        heads: usize,
        layer_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{prefix}: width {dim} is not divisible by {heads} heads")));
        }
        let mut w = |n: &str| store.add(format!("{prefix}.{n}"), xavier(rng, &[dim, dim], dim, dim));
        Ok(Self {
            wq: w("w_q")?,
            wk: w("w_k")?,
            wv: w("w_v")?,
            wo: w("w_o")?,
            heads,
            dim,
            layer_norm,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Output of one attention block plus each head's `T × T` weights.
#[derive(Clone, Debug)]
pub struct MhsaOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

pub fn mhsa_forward<S: Scalar>(g: &Graph<S>, store: &ParamStore<S>, p: &MhsaParams, x: Var) -> Result<MhsaOutput> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != p.dim {
        return Err(Error::Shape(format!("attention expects T×{}, got {shape:?}", p.dim)));
    }
    let x = if p.layer_norm {
        g.layer_norm_rows(x, S::of(LN_EPS))?
    } else {
        x
    };
    let q = g.matmul(x, g.param(store, p.wq))?;
    let k = g.matmul(x, g.param(store, p.wk))?;
    let v = g.matmul(x, g.param(store, p.wv))?;
    let dk = p.head_dim();
    let scale = S::of(1.0 / (dk as f64).sqrt());
    let mut heads = Vec::with_capacity(p.heads);
    let mut attention = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let a = g.softmax_rows(g.scale(g.matmul_nt(qh, kh)?, scale))?;
        heads.push(g.matmul(a, vh)?);
        attention.push(a);
    }
    let out = g.matmul(g.concat_cols(&heads)?, g.param(store, p.wo))?;
    Ok(MhsaOutput { out, attention })
}

/// Feature-axis join of two equally long streams, `a` first.
pub fn concat_features<S: Scalar>(g: &Graph<S>, a: (Domain, Var), b: (Domain, Var)) -> Result<Var> {
    let (ta, tb) = (g.shape(a.1)[0], g.shape(b.1)[0]);
    if ta != tb {
        return Err(Error::Alignment {
            left: a.0.to_string(),
            left_frames: ta,
            right: b.0.to_string(),
            right_frames: tb,
        });
    }
    g.concat_cols(&[a.1, b.1])
}

#[derive(Clone, Debug)]
pub struct CnnParams {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl CnnParams {
    pub fn init<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(channels.len());
        let mut cin = 1;
        for (i, &co) in channels.iter().enumerate() {
            let w = store.add(format!("{prefix}.conv{i}.w"), xavier(rng, &[co, cin, 3, 3], cin * 9, co * 9))?;
            let b = store.add(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[co]))?;
            layers.push((w, b));
            cin = co;
        }
        Ok(Self { layers })
    }
}

/// `T × F` → `T × C_last`: 3×3 convolutions with stride 2 along features,
/// ReLU, then a mean over what is left of the feature axis.
pub fn cnn_forward<S: Scalar>(g: &Graph<S>, store: &ParamStore<S>, p: &CnnParams, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let mut h = g.reshape(x, &[1, s[0], s[1]])?;
    for &(w, b) in &p.layers {
        h = g.relu(g.conv2d(h, g.param(store, w), g.param(store, b), 2)?);
    }
    g.channel_mean_pool(h)
}

#[derive(Clone, Debug)]
pub struct DenseParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseParams {
    pub fn init<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{prefix}.w"), xavier(rng, &[d_in, d_out], d_in, d_out))?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        g.linear(x, g.param(store, self.w), g.param(store, self.b))
    }
}

/// `ReLU(x·W + b)`, bringing WS down to the CNN width.
pub fn adapter_forward<S: Scalar>(g: &Graph<S>, store: &ParamStore<S>, p: &DenseParams, x: Var) -> Result<Var> {
    Ok(g.relu(p.forward(g, store, x)?))
}

/// Per-domain projections used only by the temporal-concat variant.
#[derive(Clone, Debug)]
pub struct TemporalParams {
    pub ps: DenseParams,
    pub fb: DenseParams,
    pub ws: DenseParams,
}

#[derive(Clone, Debug)]
pub struct FidoChannelParams {
    pub mhsa_ps: MhsaParams,
    pub mhsa_fb: MhsaParams,
    pub mhsa_ws: MhsaParams,
    pub cnn: CnnParams,
    /// Present in feature-concat mode.
    pub adapter: Option<DenseParams>,
    /// Present in temporal-concat mode.
    pub temporal: Option<TemporalParams>,
    pub lfb: LfbParams,
    pub concat: ConcatMode,
}

impl FidoChannelParams {
    pub fn init<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cfg: &ModelConfig,
        d_ws: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(d_ws)?;
        let ln = cfg.layer_norm;
        let lfb = init_lfb(store, prefix, cfg)?;
        let mhsa_ps = MhsaParams::init(store, &format!("{prefix}.mhsa_ps"), cfg.d_ps(), cfg.heads, ln, rng)?;
        let mhsa_fb = MhsaParams::init(store, &format!("{prefix}.mhsa_fb"), cfg.d_fb(), cfg.heads, ln, rng)?;
        let mhsa_ws = MhsaParams::init(store, &format!("{prefix}.mhsa_ws"), d_ws, cfg.heads, ln, rng)?;
        let cnn = CnnParams::init(store, &format!("{prefix}.cnn"), &cfg.cnn_channels, rng)?;
        let (adapter, temporal) = match cfg.concat {
            ConcatMode::Feature => (
                Some(DenseParams::init(store, &format!("{prefix}.adapter"), d_ws, cfg.d_cnn(), rng)?),
                None,
            ),
            ConcatMode::Temporal => {
                let tw = cfg.temporal_width;
                let mut proj = |n: &str, d: usize| DenseParams::init(store, &format!("{prefix}.proj_{n}"), d, tw, rng);
                let t = TemporalParams {
                    ps: proj("ps", cfg.d_ps())?,
                    fb: proj("fb", cfg.d_fb())?,
                    ws: proj("ws", d_ws)?,
                };
                (None, Some(t))
            }
        };
        Ok(Self {
            mhsa_ps,
            mhsa_fb,
            mhsa_ws,
            cnn,
            adapter,
            temporal,
            lfb,
            concat: cfg.concat,
        })
    }
}

/// Intermediate handles of one channel's forward pass.
#[derive(Clone, Debug)]
pub struct ChannelTrace {
    pub out: Var,
    pub ps_in: Var,
    pub ps_attended: Var,
    pub attention: Vec<(Domain, Vec<Var>)>,
}

/// Runs the stack on already-built PS, FB and WS nodes.
pub fn fido_fuse<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    p: &FidoChannelParams,
    ps: Var,
    fb: Var,
    ws: Var,
) -> Result<ChannelTrace> {
    let t = g.shape(ps)[0];
    for (d, v) in [(Domain::Fb, fb), (Domain::Ws, ws)] {
        let tv = g.shape(v)[0];
        if tv != t {
            return Err(Error::Alignment {
                left: Domain::Ps.to_string(),
                left_frames: t,
                right: d.to_string(),
                right_frames: tv,
            });
        }
    }
    let a_ps = mhsa_forward(g, store, &p.mhsa_ps, ps)?;
    let a_fb = mhsa_forward(g, store, &p.mhsa_fb, fb)?;
    let a_ws = mhsa_forward(g, store, &p.mhsa_ws, ws)?;
    let out = match (&p.adapter, &p.temporal) {
        (Some(adapter), _) => {
            let joined = concat_features(g, (Domain::Ps, a_ps.out), (Domain::Fb, a_fb.out))?;
            let c = cnn_forward(g, store, &p.cnn, joined)?;
            let a = adapter_forward(g, store, adapter, a_ws.out)?;
            g.concat_cols(&[c, a])?
        }
        (None, Some(tp)) => {
            let stacked = g.concat_rows(&[
                tp.ps.forward(g, store, a_ps.out)?,
                tp.fb.forward(g, store, a_fb.out)?,
                tp.ws.forward(g, store, a_ws.out)?,
            ])?;
            cnn_forward(g, store, &p.cnn, stacked)?
        }
        (None, None) => return Err(Error::Config("channel has neither adapter nor temporal projections".into())),
    };
    Ok(ChannelTrace {
        out,
        ps_in: ps,
        ps_attended: a_ps.out,
        attention: vec![
            (Domain::Ps, a_ps.attention),
            (Domain::Fb, a_fb.attention),
            (Domain::Ws, a_ws.attention),
        ],
    })
}

/// Full channel pass: FB is computed in-graph from the waveform so the
/// filter cutoffs receive gradients.
pub fn fido_channel_forward<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    p: &FidoChannelParams,
    ps: &Tensor<S>,
    wave: &Tensor<S>,
    ws: &Tensor<S>,
) -> Result<ChannelTrace> {
    let fb = lfb_forward(g, store, &p.lfb, wave)?;
    fido_fuse(g, store, p, g.constant(ps.clone()), fb, g.constant(ws.clone()))
}

/// Alias kept for the ablation harness; dispatch happens on `p.concat`.
pub fn temporal_concat_forward<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    p: &FidoChannelParams,
    ps: Var,
    fb: Var,
    ws: Var,
) -> Result<ChannelTrace> {
    if p.temporal.is_none() {
        return Err(Error::Config("parameters were built for feature concat".into()));
    }
    fido_fuse(g, store, p, ps, fb, ws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mhsa(dim: usize, heads: usize) -> (ParamStore<f64>, MhsaParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let p = MhsaParams::init(&mut s, "m", dim, heads, false, &mut rng).unwrap();
        (s, p, rng)
    }

    // Literal per-element evaluation with scalar loops.
    fn mhsa_oracle(x: &Tensor<f64>, s: &ParamStore<f64>, p: &MhsaParams) -> Vec<Vec<f64>> {
        let (t, d) = x.dims2().unwrap();
        let mm = |a: &Vec<Vec<f64>>, w: &Tensor<f64>| -> Vec<Vec<f64>> {
            a.iter()
                .map(|r| (0..d).map(|j| (0..d).map(|i| r[i] * w.at(i, j)).sum()).collect())
                .collect()
        };
        let xr: Vec<Vec<f64>> = (0..t).map(|i| x.row(i).to_vec()).collect();
        let (q, k, v) = (mm(&xr, s.value(p.wq)), mm(&xr, s.value(p.wk)), mm(&xr, s.value(p.wv)));
        let dk = p.head_dim();
        let mut cat = vec![vec![0.0; d]; t];
        for h in 0..p.heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in cols.clone() {
                    cat[i][c] = (0..t).map(|j| (logits[j] - m).exp() / z * v[j][c]).sum();
                }
            }
        }
        mm(&cat, s.value(p.wo))
    }

    #[test]
    fn mhsa_matches_literal_oracle() {
        let (s, p, mut rng) = mhsa(8, 2);
        let x = rand_t(&mut rng, &[4, 8]);
        let g = Graph::new();
        let o = mhsa_forward(&g, &s, &p, g.constant(x.clone())).unwrap();
        let got = g.value(o.out);
        let want = mhsa_oracle(&x, &s, &p);
        for i in 0..4 {
            for j in 0..8 {
                assert!((got.at(i, j) - want[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_qk_gives_column_means() {
        let (mut s, p, mut rng) = mhsa(8, 2);
        s.get_mut(p.wq).value = Tensor::zeros(&[8, 8]);
        s.get_mut(p.wk).value = Tensor::zeros(&[8, 8]);
        s.get_mut(p.wv).value = Tensor::eye(8);
        s.get_mut(p.wo).value = Tensor::eye(8);
        let x = rand_t(&mut rng, &[5, 8]);
        let g = Graph::new();
        let out = g.value(mhsa_forward(&g, &s, &p, g.constant(x.clone())).unwrap().out);
        for j in 0..8 {
            let mean = (0..5).map(|i| x.at(i, j)).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.at(i, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_frame_is_value_projection() {
        let (s, p, mut rng) = mhsa(8, 4);
        let x = rand_t(&mut rng, &[1, 8]);
        let g = Graph::new();
        let out = g.value(mhsa_forward(&g, &s, &p, g.constant(x.clone())).unwrap().out);
        let want = x.matmul(s.value(p.wv)).unwrap().matmul(s.value(p.wo)).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_head_count_rejected() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MhsaParams::init(&mut s, "m", 10, 3, false, &mut rng).is_err());
    }

    #[test]
    fn concat_layout_and_alignment_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_t(&mut rng, &[6, 3]);
        let b = rand_t(&mut rng, &[6, 5]);
        let g = Graph::new();
        let c = g.value(concat_features(&g, (Domain::Ps, g.constant(a.clone())), (Domain::Fb, g.constant(b.clone()))).unwrap());
        assert_eq!(c.shape(), &[6, 8]);
        for _ in 0..20 {
            let (t, j) = (rng.gen_range(0..6), rng.gen_range(0..5));
            assert_eq!(c.at(t, 3 + j), b.at(t, j));
        }
        let e = g.constant(Tensor::zeros(&[6, 0]));
        let same = g.value(concat_features(&g, (Domain::Ps, g.constant(a.clone())), (Domain::Fb, e)).unwrap());
        assert_eq!(same, a);

        let short = g.constant(Tensor::zeros(&[5, 2]));
        let msg = concat_features(&g, (Domain::Ps, g.constant(a)), (Domain::Ws, short))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("PS") && msg.contains("WS"), "{msg}");
    }

    #[test]
    fn cnn_geometry_and_zero_fixpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::<f64>::new();
        let p = CnnParams::init(&mut s, "c", &[16, 32, 64, 128], &mut rng).unwrap();
        let g = Graph::new();
        let out = cnn_forward(&g, &s, &p, g.constant(Tensor::zeros(&[350, 384]))).unwrap();
        assert_eq!(g.shape(out), vec![350, 128]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::<f64>::new();
        let p = DenseParams::init(&mut s, "a", 6, 4, &mut rng).unwrap();
        s.get_mut(p.b).value = rand_t(&mut rng, &[4]);
        let x = rand_t(&mut rng, &[3, 6]);
        let g = Graph::new();
        let out = g.value(adapter_forward(&g, &s, &p, g.constant(x.clone())).unwrap());
        let (w, b) = (s.value(p.w), s.value(p.b));
        for i in 0..3 {
            for j in 0..4 {
                let z: f64 = (0..6).map(|k| x.at(i, k) * w.at(k, j)).sum::<f64>() + b.data()[j];
                assert!((out.at(i, j) - z.max(0.0)).abs() < 1e-10);
            }
        }
        s.get_mut(p.w).value = Tensor::zeros(&[6, 4]);
        s.get_mut(p.b).value = Tensor::zeros(&[4]);
        let g = Graph::new();
        assert!(g.value(adapter_forward(&g, &s, &p, g.constant(x)).unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn temporal_stacking_order() {
        let cfg = ModelConfig {
            concat: ConcatMode::Temporal,
            ..ModelConfig::tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::<f64>::new();
        let p = FidoChannelParams::init(&mut s, "left", &cfg, 16, &mut rng).unwrap();
        let t = cfg.frames();
        let g = Graph::new();
        let ps = g.constant(rand_t(&mut rng, &[t, cfg.d_ps()]));
        let fb = g.constant(rand_t(&mut rng, &[t, cfg.d_fb()]));
        let ws = g.constant(rand_t(&mut rng, &[t, 16]));
        let tr = fido_fuse(&g, &s, &p, ps, fb, ws).unwrap();
        assert_eq!(g.shape(tr.out), vec![3 * t, cfg.d_cnn()]);

        // Rows of the stacked input: PS block, then FB, then WS.
        let tp = p.temporal.as_ref().unwrap();
        let mut parts = Vec::new();
        for (m, proj, x) in [(&p.mhsa_ps, &tp.ps, ps), (&p.mhsa_fb, &tp.fb, fb), (&p.mhsa_ws, &tp.ws, ws)] {
            let a = mhsa_forward(&g, &s, m, x).unwrap().out;
            parts.push(g.value(proj.forward(&g, &s, a).unwrap()));
        }
        let stacked = g.concat_rows(&parts.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>()).unwrap();
        let direct = g.value(cnn_forward(&g, &s, &p.cnn, stacked).unwrap());
        assert_eq!(direct, g.value(tr.out));
    }

    #[test]
    fn channel_output_width_and_zero_case() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = ParamStore::<f64>::new();
        let p = FidoChannelParams::init(&mut s, "left", &cfg, 16, &mut rng).unwrap();
        let t = cfg.frames();
        let g = Graph::new();
        let tr = fido_channel_forward(
            &g,
            &s,
            &p,
            &Tensor::zeros(&[t, cfg.d_ps()]),
            &Tensor::zeros(&[cfg.clip_samples]),
            &Tensor::zeros(&[t, 16]),
        )
        .unwrap();
        assert_eq!(g.shape(tr.out), vec![t, 2 * cfg.d_cnn()]);
        assert!(g.value(tr.out).data().iter().all(|&v| v == 0.0));
    }
}
