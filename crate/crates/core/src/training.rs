//! Multi-task loss, the training loop and checkpoint files.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::assessment::{Prediction, TaskOutput};
use crate::config::{LossWeights, TrainConfig};
use crate::dataset::{batches, Manifest, UtteranceRecord, N_HA_CLASSES};
use crate::dsp::ingest;
use crate::error::{Error, Result};
use crate::model::{ChannelInputs, FidoModel, UtteranceInputs};
use crate::numerics::{AdamConfig, AdamState, Gradients, Graph, ParamStore, Tensor, Var};
use crate::provider::Provider;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Labels {
    pub intelligibility: f64,
    pub haspi: f64,
    pub class: usize,
}

impl Labels {
    pub fn new(intelligibility: f64, haspi: f64, class: usize) -> Result<Self> {
        if !(0.0..=100.0).contains(&intelligibility) {
            return Err(Error::Label(format!("intelligibility {intelligibility} outside [0, 100]")));
        }
        if !(0.0..=1.0).contains(&haspi) {
            return Err(Error::Label(format!("haspi {haspi} outside [0, 1]")));
        }
        if class >= N_HA_CLASSES {
            return Err(Error::Label(format!("class {class} outside 0..{}", N_HA_CLASSES - 1)));
        }
        Ok(Self {
            intelligibility,
            haspi,
            class,
        })
    }

    pub fn of(r: &UtteranceRecord) -> Result<Self> {
        Self::new(r.intelligibility, r.haspi, r.ha_class)
    }
}

/// Loss value and its three components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_int: f64,
    pub l_haspi: f64,
    pub l_ce: f64,
}

impl LossBreakdown {
    pub fn from_parts(w: &LossWeights, l_int: f64, l_haspi: f64, l_ce: f64) -> Self {
        Self {
            total: w.combine(l_int, l_haspi, l_ce),
            l_int,
            l_haspi,
            l_ce,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l_int: Var,
    pub l_haspi: Var,
    pub l_ce: Var,
}

/// `(u − y)² + α·mean_t (f_t − y)²` on already normalised values.
fn regression_term<S: Scalar>(g: &Graph<S>, utt: Var, frames: Var, y: f64, alpha: f64) -> Result<Var> {
    let u = g.square(g.add_scalar(utt, S::of(-y)));
    let f = g.mean(g.square(g.add_scalar(frames, S::of(-y))));
    g.add(u, g.scale(f, S::of(alpha)))
}

/// In-graph multi-task loss. Intelligibility is moved to [0, 1] first.
pub fn multitask_loss_graph<S: Scalar>(
    g: &Graph<S>,
    t: &TaskOutput,
    y: &Labels,
    w: &LossWeights,
    alpha: f64,
) -> Result<LossVars> {
    let hundredth = S::of(0.01);
    let l_int = regression_term(
        g,
        g.scale(t.utt_int, hundredth),
        g.scale(t.frame_int, hundredth),
        y.intelligibility / 100.0,
        alpha,
    )?;
    let l_haspi = regression_term(g, t.utt_haspi, t.frame_haspi, y.haspi, alpha)?;
    let l_ce = g.scale(g.pick(t.class_logp, y.class)?, -S::one());
    let total = g.add(
        g.add(g.scale(l_int, S::of(w.gamma1)), g.scale(l_haspi, S::of(w.gamma2)))?,
        g.scale(l_ce, S::of(w.gamma3)),
    )?;
    Ok(LossVars {
        total,
        l_int,
        l_haspi,
        l_ce,
    })
}

/// Same loss evaluated on a finished prediction.
pub fn multitask_loss<S: Scalar>(p: &Prediction<S>, y: &Labels, w: &LossWeights, alpha: f64) -> Result<LossBreakdown> {
    if y.class >= p.class_probs.len() {
        return Err(Error::Label(format!("class {} but model has {} classes", y.class, p.class_probs.len())));
    }
    let reg = |utt: f64, frames: &[S], scale: f64, target: f64| {
        let f = frames.iter().map(|v| (v.as_f64() * scale - target).powi(2)).sum::<f64>() / frames.len().max(1) as f64;
        (utt * scale - target).powi(2) + alpha * f
    };
    let l_int = reg(p.intelligibility.as_f64(), &p.frame_int, 0.01, y.intelligibility / 100.0);
    let l_haspi = reg(p.haspi.as_f64(), &p.frame_haspi, 1.0, y.haspi);
    let l_ce = -p.class_probs[y.class].as_f64().ln();
    Ok(LossBreakdown::from_parts(w, l_int, l_haspi, l_ce))
}

/// A record with its front-end features resolved.
#[derive(Clone, Debug)]
pub struct Example<S> {
    pub id: String,
    pub track: u8,
    pub inputs: UtteranceInputs<S>,
    pub labels: Labels,
}

/// Ingests audio and resolves PS / WS for every record. Failures are
/// collected so one error lists every offending id.
pub fn load_examples<S: Scalar>(manifest: &Manifest, cfg: &TrainConfig) -> Result<Vec<Example<S>>> {
    let provider = Provider::<S>::new(&cfg.provider, &cfg.model)?;
    let results: Vec<(String, Result<Example<S>>)> = manifest
        .records
        .par_iter()
        .map(|r| (r.id.clone(), load_one(manifest, r, cfg, &provider)))
        .collect();
    let mut ok = Vec::with_capacity(results.len());
    let mut missing = Vec::new();
    for (id, r) in results {
        match r {
            Ok(e) => ok.push(e),
            Err(e) => {
                log::error!("{id}: {e}");
                missing.push(id);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFeatures { ids: missing });
    }
    Ok(ok)
}

fn load_one<S: Scalar>(m: &Manifest, r: &UtteranceRecord, cfg: &TrainConfig, provider: &Provider<S>) -> Result<Example<S>> {
    let (l, rr) = ingest::<S>(&m.resolve(&r.audio))?;
    let emb = |p: &Option<PathBuf>| p.as_ref().map(|p| m.resolve(p));
    let (el, er) = (emb(&r.emb_l), emb(&r.emb_r));
    Ok(Example {
        id: r.id.clone(),
        track: r.track,
        inputs: UtteranceInputs {
            left: ChannelInputs::prepare(&l, &cfg.model, provider, &r.id, el.as_deref())?,
            right: ChannelInputs::prepare(&rr, &cfg.model, provider, &r.id, er.as_deref())?,
        },
        labels: Labels::of(r)?,
    })
}

/// Loss and gradients of one example under `store`.
pub fn example_gradients<S: Scalar>(
    model: &FidoModel<S>,
    store: &ParamStore<S>,
    ex: &Example<S>,
    w: &LossWeights,
    alpha: f64,
) -> Result<(LossBreakdown, Gradients<S>)> {
    let g = Graph::new();
    let tr = model.forward_with(&g, store, &ex.inputs)?;
    let l = multitask_loss_graph(&g, &tr.task, &ex.labels, w, alpha)?;
    let v = |x: Var| g.scalar_value(x).as_f64();
    let b = LossBreakdown {
        total: v(l.total),
        l_int: v(l.l_int),
        l_haspi: v(l.l_haspi),
        l_ce: v(l.l_ce),
    };
    if !b.total.is_finite() {
        return Err(Error::NonFinite(format!("loss of `{}` ({})", ex.id, b.total)));
    }
    Ok((b, g.backward(l.total)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: LossBreakdown,
}

pub const TRACE_HEADER: &str = "step,total,L_int,L_haspi,L_ce";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let l = r.loss;
        s.push_str(&format!("{},{},{},{},{}\n", r.step, l.total, l.l_int, l.l_haspi, l.l_ce));
    }
    s
}

/// Intelligibility RMSE (0–100 scale) of `model` over `examples`.
pub fn rmse_on<S: Scalar>(model: &FidoModel<S>, examples: &[Example<S>]) -> Result<f64> {
    let preds: Vec<f64> = examples
        .par_iter()
        .map(|e| model.predict(&e.inputs).map(|p| p.intelligibility.as_f64()))
        .collect::<Result<_>>()?;
    let labels: Vec<f64> = examples.iter().map(|e| e.labels.intelligibility).collect();
    crate::metrics::rmse(&preds, &labels)
}

/// Mean loss over a set, without updating anything.
pub fn mean_loss<S: Scalar>(model: &FidoModel<S>, examples: &[Example<S>], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let parts: Vec<LossBreakdown> = examples
        .par_iter()
        .map(|e| {
            let p = model.predict(&e.inputs)?;
            multitask_loss(&p, &e.labels, &cfg.loss_weights, cfg.frame_loss_weight)
        })
        .collect::<Result<_>>()?;
    let n = parts.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    Ok(LossBreakdown {
        total: sum(|b| b.total),
        l_int: sum(|b| b.l_int),
        l_haspi: sum(|b| b.l_haspi),
        l_ce: sum(|b| b.l_ce),
    })
}

pub struct TrainOutcome<S> {
    /// Parameters of the epoch with the lowest selection RMSE.
    pub best: FidoModel<S>,
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    /// Selection RMSE after each epoch (dev, or train when dev is empty).
    pub epoch_rmse: Vec<f64>,
}

/// Runs the configured number of epochs. Examples inside a batch are
/// processed in parallel; their gradients are reduced in batch order.
pub fn train<S: Scalar>(cfg: &TrainConfig, train_set: &[Example<S>], dev_set: &[Example<S>]) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    log::info!("resolved config: {}", cfg.to_json());
    let mut model = FidoModel::<S>::new(cfg.model.clone(), cfg.provider.d_ws, cfg.seed)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let select_on = if dev_set.is_empty() { train_set } else { dev_set };
    let mut trace = Vec::new();
    let mut epoch_rmse = Vec::new();
    let mut best = (f64::INFINITY, model.store.clone(), 0usize);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for batch in batches(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64) {
            let results: Vec<(LossBreakdown, Gradients<S>)> = batch
                .par_iter()
                .map(|&i| example_gradients(&model, &model.store, &train_set[i], &cfg.loss_weights, cfg.frame_loss_weight))
                .collect::<Result<_>>()?;
            let scale = S::of(1.0 / batch.len() as f64);
            let mut mean = LossBreakdown::default();
            for (b, g) in &results {
                model.store.accumulate(g, scale)?;
                let k = 1.0 / batch.len() as f64;
                mean.total += b.total * k;
                mean.l_int += b.l_int * k;
                mean.l_haspi += b.l_haspi * k;
                mean.l_ce += b.l_ce * k;
            }
            if let Some(max) = cfg.clip_grad_norm {
                let n = model.store.grad_norm().as_f64();
                if n > max {
                    let c = S::of(max / n);
                    for p in model.store.iter_mut() {
                        if let Some(g) = p.grad.as_mut() {
                            g.scale_in_place(c);
                        }
                    }
                }
            }
            adam.step(&mut model.store)?;
            trace.push(TraceRow { step, loss: mean });
            step += 1;
        }
        let r = rmse_on(&model, select_on)?;
        log::info!("epoch {epoch}: selection RMSE {r:.4}");
        epoch_rmse.push(r);
        if r < best.0 {
            best = (r, model.store.clone(), epoch);
        } else if cfg.patience.is_some_and(|p| epoch - best.2 >= p) {
            log::info!("no improvement for {} epochs, stopping", epoch - best.2);
            break;
        }
    }
    model.store = best.1;
    let checkpoint = Checkpoint::from_model(&model, cfg, best.2, &trace, Some(best.0));
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint.save(&dir.join("best.ckpt"))?;
        let p = dir.join("trace.csv");
        std::fs::write(&p, trace_csv(&trace)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome {
        best: model,
        checkpoint,
        trace,
        epoch_rmse,
    })
}

pub const CKPT_MAGIC: &[u8; 8] = b"FIDOCKPT";
pub const CKPT_VERSION: u32 = 1;

/// Serialised model. Tensors are little-endian `f32`, each prefixed by its
/// name and shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub trace: Vec<TraceRow>,
    pub dev_rmse: Option<f64>,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(
        model: &FidoModel<S>,
        cfg: &TrainConfig,
        epoch: usize,
        trace: &[TraceRow],
        dev_rmse: Option<f64>,
    ) -> Self {
        let mut config = cfg.clone();
        config.model = model.config.clone();
        config.provider.d_ws = model.d_ws;
        Self {
            config,
            epoch: epoch as u64,
            trace: trace.to_vec(),
            dev_rmse,
            params: model
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec(), p.value.data().iter().map(|v| v.as_f32()).collect()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CKPT_MAGIC);
        b.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let cfg = self.config.to_json();
        b.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.dev_rmse.unwrap_or(f64::NAN).to_le_bytes());
        b.extend_from_slice(&(self.trace.len() as u64).to_le_bytes());
        for r in &self.trace {
            b.extend_from_slice(&r.step.to_le_bytes());
            for v in [r.loss.total, r.loss.l_int, r.loss.l_haspi, r.loss.l_ce] {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::format(path, format!("checkpoint version {version}, expected {CKPT_VERSION}")));
        }
        let n = r.u64()? as usize;
        let cfg_text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        let config: TrainConfig =
            serde_json::from_str(cfg_text).map_err(|e| Error::format(path, format!("config: {e}")))?;
        let epoch = r.u64()?;
        let dev = r.f64()?;
        let n_trace = r.u64()? as usize;
        let mut trace = Vec::with_capacity(n_trace.min(1 << 20));
        for _ in 0..n_trace {
            let step = r.u64()?;
            let (total, l_int, l_haspi, l_ce) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            trace.push(TraceRow {
                step,
                loss: LossBreakdown {
                    total,
                    l_int,
                    l_haspi,
                    l_ce,
                },
            });
        }
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params.min(1 << 16));
        for _ in 0..n_params {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::format(path, "shape overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            epoch,
            trace,
            dev_rmse: if dev.is_nan() { None } else { Some(dev) },
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    /// Rebuilds the model described by the stored config and fills in the
    /// stored values.
    pub fn to_model<S: Scalar>(&self) -> Result<FidoModel<S>> {
        self.to_model_with(&self.config)
    }

    /// Like [`Checkpoint::to_model`], but against a caller-supplied config;
    /// shape disagreements name the offending parameter.
    pub fn to_model_with<S: Scalar>(&self, cfg: &TrainConfig) -> Result<FidoModel<S>> {
        let mut m = FidoModel::new(cfg.model.clone(), cfg.provider.d_ws, cfg.seed)?;
        let values = self
            .params
            .iter()
            .map(|(n, s, d)| {
                let t = Tensor::from_vec(s.clone(), d.iter().map(|&v| S::of(v as f64)).collect())?;
                Ok((n.clone(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        m.load_values(values)?;
        Ok(m)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.path,
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
