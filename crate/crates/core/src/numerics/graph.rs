//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every op records its inputs on the tape and computes its value eagerly.
//! [`Graph::backward`] walks the tape in reverse and accumulates adjoints
//! into the parameters that were pulled in with [`Graph::param`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of the constrained sinc band-pass bank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SincBankSpec {
    pub kernel_len: usize,
    pub sample_rate: f64,
    pub min_low_hz: f64,
    pub min_band_hz: f64,
}

impl SincBankSpec {
    fn max_high_hz(&self) -> f64 {
        self.sample_rate / 2.0 - self.min_low_hz
    }
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    Pick { x: Var, index: usize },
    Conv2d { x: Var, w: Var, b: Var, stride_f: usize, cols: Tensor<S> },
    ChannelMeanPool(Var),
    LayerNormRows { x: Var, inv_std: Vec<S> },
    SincBank { low: Var, band: Var, spec: SincBankSpec },
    FrameEnergy { wave: Tensor<S>, kernels: Var, hop: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
pub struct Graph<S> {
    nodes: RefCell<Vec<Node<S>>>,
    params: RefCell<BTreeMap<ParamId, Var>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Clone of a node's value.
    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Single element of a one-element tensor.
    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.nodes.borrow()[a.0].value)
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor<S>, &Tensor<S>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    /// Input that gradients never flow into.
    pub fn constant(&self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Pulls a parameter onto the tape; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.params.borrow_mut().insert(id, v);
        v
    }

    fn unary(&self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.with1(x, |t| t.map(f));
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = self.with2(a, b, |x, y| x.matmul_t(ta, y, tb))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| x.zip_map(y, |p, q| p + q))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| x.zip_map(y, |p, q| p - q))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| x.zip_map(y, |p, q| p * q))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `r × n` matrix.
    pub fn add_row_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let out = self.with2(x, bias, |t, b| {
            let (r, c) = t.dims2()?;
            if b.len() != c {
                return shape_err(format!(
                    "bias of {} values for rows of width {c}",
                    b.len()
                ));
            }
            let mut d = t.data().to_vec();
            for i in 0..r {
                for (v, &bv) in d[i * c..(i + 1) * c].iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            Tensor::from_vec(vec![r, c], d)
        })?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    /// `x · W + b` for `W` stored as `in × out`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn scale(&self, x: Var, c: S) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: S) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, S::tanh, Op::Tanh(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, S::exp, Op::Exp(x))
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, S::ln, Op::Ln(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, num_traits::Float::abs, Op::Abs(x))
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let out = self.with1(x, softmax_rows)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&self, x: Var) -> Result<Var> {
        let out = self.with1(x, log_softmax_rows)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmaxRows(x), rg))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = self.with1(x, Tensor::transpose)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.with1(x, |t| {
            let (r, c) = t.dims2()?;
            if start + len > c {
                return shape_err(format!("column slice {start}..{} of width {c}", start + len));
            }
            let mut d = Vec::with_capacity(r * len);
            for i in 0..r {
                d.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
            }
            Tensor::from_vec(vec![r, len], d)
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let ts: Vec<&Tensor<S>> = parts.iter().map(|v| &nodes[v.0].value).collect();
            let dims = ts.iter().map(|t| t.dims2()).collect::<Result<Vec<_>>>()?;
            let r = dims.first().map_or(0, |d| d.0);
            if dims.iter().any(|d| d.0 != r) {
                return shape_err(format!("row counts differ in column concat: {dims:?}"));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut d = Vec::with_capacity(r * total);
            for i in 0..r {
                for (t, &(_, c)) in ts.iter().zip(&dims) {
                    d.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::from_vec(vec![r, total], d)?
        };
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.with1(x, |t| {
            let (r, c) = t.dims2()?;
            if start + len > r {
                return shape_err(format!("row slice {start}..{} of {r} rows", start + len));
            }
            Tensor::from_vec(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let ts: Vec<&Tensor<S>> = parts.iter().map(|v| &nodes[v.0].value).collect();
            let dims = ts.iter().map(|t| t.dims2()).collect::<Result<Vec<_>>>()?;
            let c = dims.first().map_or(0, |d| d.1);
            if dims.iter().any(|d| d.1 != c) {
                return shape_err(format!("widths differ in row concat: {dims:?}"));
            }
            let r: usize = dims.iter().map(|d| d.0).sum();
            let mut d = Vec::with_capacity(r * c);
            for t in &ts {
                d.extend_from_slice(t.data());
            }
            Tensor::from_vec(vec![r, c], d)?
        };
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.with1(x, |t| t.clone().reshape(shape))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = self.with1(x, |t| Tensor::scalar(t.sum()));
        let rg = self.rg(&[x]);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let out = self.with1(x, |t| Tensor::scalar(t.sum() / S::of(t.len().max(1) as f64)));
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanAll(x), rg)
    }

    /// Column means of an `r × n` matrix as a `1 × n` row.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let out = self.with1(x, |t| {
            let (r, c) = t.dims2()?;
            if r == 0 {
                return shape_err("mean over zero rows".into());
            }
            let mut d = vec![S::zero(); c];
            for i in 0..r {
                for (acc, &v) in d.iter_mut().zip(t.row(i)) {
                    *acc += v;
                }
            }
            let inv = S::one() / S::of(r as f64);
            d.iter_mut().for_each(|v| *v *= inv);
            Tensor::from_vec(vec![1, c], d)
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    /// Element at a flat index as a one-element tensor.
    pub fn pick(&self, x: Var, index: usize) -> Result<Var> {
        let out = self.with1(x, |t| {
            t.data()
                .get(index)
                .map(|&v| Tensor::scalar(v))
                .ok_or_else(|| Error::Shape(format!("index {index} out of {}", t.len())))
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Pick { x, index }, rg))
    }

    /// 3×3 convolution over a `[C_in, T, F]` map with `[C_out, C_in, 3, 3]`
    /// weights. Time is zero-padded to keep `T`; the feature axis uses
    /// padding 1 and the given stride, giving `ceil(F / stride)` outputs for
    /// stride 2.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride_f: usize) -> Result<Var> {
        let (out, cols) = {
            let nodes = self.nodes.borrow();
            let (xt, wt, bt) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let &[cin, t, f] = xt.shape() else {
                return shape_err(format!("conv input must be [C,T,F], got {:?}", xt.shape()));
            };
            let &[cout, wcin, 3, 3] = wt.shape() else {
                return shape_err(format!("conv weight must be [Co,Ci,3,3], got {:?}", wt.shape()));
            };
            if wcin != cin || bt.len() != cout || stride_f == 0 {
                return shape_err(format!(
                    "conv weight {:?} / bias {:?} incompatible with input {:?}",
                    wt.shape(),
                    bt.shape(),
                    xt.shape()
                ));
            }
            let fo = conv_out_len(f, stride_f);
            let cols = im2col(xt.data(), cin, t, f, fo, stride_f);
            let wmat = Tensor::from_vec(vec![cout, cin * 9], wt.data().to_vec())?;
            let mut y = wmat.matmul(&cols)?.into_data();
            let plane = t * fo;
            for (co, chunk) in y.chunks_mut(plane).enumerate() {
                let bv = bt.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
            (Tensor::from_vec(vec![cout, t, fo], y)?, cols)
        };
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride_f, cols }, rg))
    }

    /// `[C, T, F]` → `[T, C]` by averaging over the feature axis.
    pub fn channel_mean_pool(&self, x: Var) -> Result<Var> {
        let out = self.with1(x, |xt| {
            let &[c, t, f] = xt.shape() else {
                return shape_err(format!("pool input must be [C,T,F], got {:?}", xt.shape()));
            };
            let mut d = vec![S::zero(); t * c];
            let inv = S::one() / S::of(f.max(1) as f64);
            for ci in 0..c {
                for ti in 0..t {
                    let base = (ci * t + ti) * f;
                    d[ti * c + ci] = xt.data()[base..base + f].iter().copied().sum::<S>() * inv;
                }
            }
            Tensor::from_vec(vec![t, c], d)
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ChannelMeanPool(x), rg))
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm_rows(&self, x: Var, eps: S) -> Result<Var> {
        let (out, inv_std) = self.with1(x, |xt| {
            let (r, c) = xt.dims2()?;
            let n = S::of(c as f64);
            let mut d = Vec::with_capacity(r * c);
            let mut inv_std = Vec::with_capacity(r);
            for i in 0..r {
                let row = xt.row(i);
                let mu = row.iter().copied().sum::<S>() / n;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
                let is = S::one() / (var + eps).sqrt();
                inv_std.push(is);
                d.extend(row.iter().map(|&v| (v - mu) * is));
            }
            Ok::<_, Error>((Tensor::from_vec(vec![r, c], d)?, inv_std))
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LayerNormRows { x, inv_std }, rg))
    }

    /// Builds a `[K, L]` bank of normalised, Hamming-windowed sinc band-pass
    /// kernels from raw low-cutoff and bandwidth parameters (both in Hz).
    ///
    /// Cutoffs are reparameterised as `low = min_low + |low_raw|` and
    /// `high = low + min_band + |band_raw|`, then clamped below Nyquist.
    pub fn sinc_bank(&self, low: Var, band: Var, spec: SincBankSpec) -> Result<Var> {
        let out = self.with2(low, band, |lt, bt| {
            if lt.len() != bt.len() {
                return shape_err("low/band cutoff vectors differ in length".into());
            }
            if spec.kernel_len % 2 == 0 {
                return Err(Error::Config("sinc kernel length must be odd".into()));
            }
            let k = lt.len();
            let l = spec.kernel_len;
            let mut d = Vec::with_capacity(k * l);
            for i in 0..k {
                let c = sinc_cutoffs(lt.data()[i].as_f64(), bt.data()[i].as_f64(), &spec);
                d.extend(sinc_kernel(&c, &spec).into_iter().map(|(h, _, _)| S::of(h)));
            }
            Tensor::from_vec(vec![k, l], d)
        })?;
        let rg = self.rg(&[low, band]);
        Ok(self.push(out, Op::SincBank { low, band, spec }, rg))
    }

    /// Convolves a constant waveform with each kernel row ("same" alignment)
    /// and returns the mean squared response over non-overlapping frames of
    /// `hop` samples as a `[T, K]` matrix.
    pub fn frame_energy(&self, wave: &Tensor<S>, kernels: Var, hop: usize) -> Result<Var> {
        let out = self.with1(kernels, |kt| {
            let (k, l) = kt.dims2()?;
            let n = wave.len();
            if hop == 0 || n % hop != 0 {
                return shape_err(format!("waveform of {n} samples is not a multiple of hop {hop}"));
            }
            let t = n / hop;
            let xp = pad_wave(wave.data(), l);
            let per_filter: Vec<Vec<S>> = (0..k)
                .into_par_iter()
                .map(|ki| {
                    let h = &kt.data()[ki * l..(ki + 1) * l];
                    let mut e = vec![S::zero(); t];
                    for (ti, slot) in e.iter_mut().enumerate() {
                        let mut acc = S::zero();
                        for nn in ti * hop..(ti + 1) * hop {
                            let y = dot(h, &xp[nn..nn + l]);
                            acc += y * y;
                        }
                        *slot = acc / S::of(hop as f64);
                    }
                    e
                })
                .collect();
            let mut d = vec![S::zero(); t * k];
            for (ki, e) in per_filter.iter().enumerate() {
                for (ti, &v) in e.iter().enumerate() {
                    d[ti * k + ki] = v;
                }
            }
            Tensor::from_vec(vec![t, k], d)
        })?;
        let rg = self.rg(&[kernels]);
        Ok(self.push(
            out,
            Op::FrameEnergy {
                wave: wave.clone(),
                kernels,
                hop,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), S::one()));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, &mut grads, node, g, &mut out)?;
        }
        out.by_param.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = t.dims2()?;
    let mut d = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row(i);
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let start = d.len();
        d.extend(row.iter().map(|&v| (v - m).exp()));
        let s: S = d[start..].iter().copied().sum();
        d[start..].iter_mut().for_each(|v| *v /= s);
    }
    Tensor::from_vec(vec![r, c], d)
}

pub fn log_softmax_rows<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = t.dims2()?;
    let mut d = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row(i);
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
        d.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::from_vec(vec![r, c], d)
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn pad_wave<S: Scalar>(x: &[S], kernel_len: usize) -> Vec<S> {
    let c = (kernel_len - 1) / 2;
    let mut xp = vec![S::zero(); x.len() + kernel_len - 1];
    xp[c..c + x.len()].copy_from_slice(x);
    xp
}

fn conv_out_len(f: usize, stride: usize) -> usize {
    (f + 2 - 3) / stride + 1
}

fn im2col<S: Scalar>(x: &[S], cin: usize, t: usize, f: usize, fo: usize, stride: usize) -> Tensor<S> {
    let rows = cin * 9;
    let cols = t * fo;
    let mut d = vec![S::zero(); rows * cols];
    for ci in 0..cin {
        for dt in 0..3 {
            for df in 0..3 {
                let r = (ci * 3 + dt) * 3 + df;
                let dst = &mut d[r * cols..(r + 1) * cols];
                for ti in 0..t {
                    let st = ti as isize + dt as isize - 1;
                    if st < 0 || st >= t as isize {
                        continue;
                    }
                    let src = &x[(ci * t + st as usize) * f..(ci * t + st as usize + 1) * f];
                    for fi in 0..fo {
                        let sf = (fi * stride) as isize + df as isize - 1;
                        if sf >= 0 && (sf as usize) < f {
                            dst[ti * fo + fi] = src[sf as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![rows, cols], d).expect("sized above")
}

fn col2im_add<S: Scalar>(
    dcols: &Tensor<S>,
    dx: &mut [S],
    cin: usize,
    t: usize,
    f: usize,
    fo: usize,
    stride: usize,
) {
    let cols = t * fo;
    for ci in 0..cin {
        for dt in 0..3 {
            for df in 0..3 {
                let r = (ci * 3 + dt) * 3 + df;
                let src = &dcols.data()[r * cols..(r + 1) * cols];
                for ti in 0..t {
                    let st = ti as isize + dt as isize - 1;
                    if st < 0 || st >= t as isize {
                        continue;
                    }
                    let base = (ci * t + st as usize) * f;
                    for fi in 0..fo {
                        let sf = (fi * stride) as isize + df as isize - 1;
                        if sf >= 0 && (sf as usize) < f {
                            dx[base + sf as usize] += src[ti * fo + fi];
                        }
                    }
                }
            }
        }
    }
}

/// Constrained cutoffs of one sinc filter plus the derivatives of
/// `(low, high)` with respect to the raw `(low, band)` parameters.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SincCutoffs {
    pub low: f64,
    pub high: f64,
    pub dlow_dlow: f64,
    pub dhigh_dlow: f64,
    pub dhigh_dband: f64,
}

pub(crate) fn sinc_cutoffs(low_raw: f64, band_raw: f64, spec: &SincBankSpec) -> SincCutoffs {
    let max_high = spec.max_high_hz();
    let max_low = max_high - spec.min_band_hz;
    let sl = signum0(low_raw);
    let sb = signum0(band_raw);
    let mut low = spec.min_low_hz + low_raw.abs();
    let mut dlow_dlow = sl;
    if low > max_low {
        low = max_low;
        dlow_dlow = 0.0;
    }
    let mut high = low + spec.min_band_hz + band_raw.abs();
    let (mut dhigh_dlow, mut dhigh_dband) = (dlow_dlow, sb);
    if high > max_high {
        high = max_high;
        dhigh_dlow = 0.0;
        dhigh_dband = 0.0;
    }
    SincCutoffs {
        low,
        high,
        dlow_dlow,
        dhigh_dlow,
        dhigh_dband,
    }
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Kernel taps `h[n]` with `dh/dlow_hz` and `dh/dhigh_hz`.
pub(crate) fn sinc_kernel(c: &SincCutoffs, spec: &SincBankSpec) -> Vec<(f64, f64, f64)> {
    use std::f64::consts::PI;
    let l = spec.kernel_len;
    let half = (l - 1) / 2;
    let w_hz = 2.0 * PI / spec.sample_rate;
    let a1 = w_hz * c.low;
    let a2 = w_hz * c.high;
    let span = a2 - a1;
    (0..l)
        .map(|j| {
            let n = j as f64 - half as f64;
            let win = if l == 1 {
                1.0
            } else {
                0.54 - 0.46 * (2.0 * PI * j as f64 / (l - 1) as f64).cos()
            };
            let (g, dg1, dg2) = if n == 0.0 {
                (win * span / PI, -win / PI, win / PI)
            } else {
                (
                    win * ((a2 * n).sin() - (a1 * n).sin()) / (PI * n),
                    -win * (a1 * n).cos() / PI,
                    win * (a2 * n).cos() / PI,
                )
            };
            let h = g * PI / span;
            let dh_da1 = PI * (dg1 * span + g) / (span * span);
            let dh_da2 = PI * (dg2 * span - g) / (span * span);
            (h, dh_da1 * w_hz, dh_da2 * w_hz)
        })
        .collect()
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    v: Var,
    g: Tensor<S>,
) -> Result<()> {
    if !nodes[v.0].requires_grad {
        return Ok(());
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Lazily allocates a zero buffer for `v` and hands it to `f`.
fn accumulate_with<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    v: Var,
    f: impl FnOnce(&mut Tensor<S>),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
    f(buf);
}

fn backprop<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    node: &Node<S>,
    g: Tensor<S>,
    out: &mut Gradients<S>,
) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Param(id) => out.by_param.push((*id, g)),
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let (da, db) = match (ta, tb) {
                (false, false) => (g.matmul_t(false, bv, true)?, av.matmul_t(true, &g, false)?),
                (false, true) => (g.matmul(bv)?, g.matmul_t(true, av, false)?),
                (true, false) => (bv.matmul_t(false, &g, true)?, av.matmul(&g)?),
                (true, true) => (bv.matmul_t(true, &g, true)?, g.matmul_t(true, av, true)?),
            };
            accumulate(nodes, grads, *a, da)?;
            accumulate(nodes, grads, *b, db)?;
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g)?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *b, g.map(|v| -v))?;
            accumulate(nodes, grads, *a, g)?;
        }
        Op::Mul(a, b) => {
            let da = g.zip_map(val(*b), |p, q| p * q)?;
            let db = g.zip_map(val(*a), |p, q| p * q)?;
            accumulate(nodes, grads, *a, da)?;
            accumulate(nodes, grads, *b, db)?;
        }
        Op::AddRowBias(x, b) => {
            let (r, c) = g.dims2()?;
            let mut db = vec![S::zero(); c];
            for i in 0..r {
                for (acc, &v) in db.iter_mut().zip(g.row(i)) {
                    *acc += v;
                }
            }
            let db = Tensor::from_vec(val(*b).shape().to_vec(), db)?;
            accumulate(nodes, grads, *b, db)?;
            accumulate(nodes, grads, *x, g)?;
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g.map(|v| v * *c))?,
        Op::AddScalar(x) | Op::Reshape(x) => {
            let g = g.reshape(val(*x).shape())?;
            accumulate(nodes, grads, *x, g)?
        }
        Op::Relu(x) => {
            let d = g.zip_map(val(*x), |gv, xv| if xv > S::zero() { gv } else { S::zero() })?;
            accumulate(nodes, grads, *x, d)?
        }
        Op::Sigmoid(x) => {
            let d = g.zip_map(y, |gv, yv| gv * yv * (S::one() - yv))?;
            accumulate(nodes, grads, *x, d)?
        }
        Op::Tanh(x) => {
            let d = g.zip_map(y, |gv, yv| gv * (S::one() - yv * yv))?;
            accumulate(nodes, grads, *x, d)?
        }
        Op::Exp(x) => accumulate(nodes, grads, *x, g.zip_map(y, |gv, yv| gv * yv)?)?,
        Op::Ln(x) => accumulate(nodes, grads, *x, g.zip_map(val(*x), |gv, xv| gv / xv)?)?,
        Op::Abs(x) => {
            let d = g.zip_map(val(*x), |gv, xv| {
                if xv > S::zero() {
                    gv
                } else if xv < S::zero() {
                    -gv
                } else {
                    S::zero()
                }
            })?;
            accumulate(nodes, grads, *x, d)?
        }
        Op::Square(x) => {
            let d = g.zip_map(val(*x), |gv, xv| S::of(2.0) * xv * gv)?;
            accumulate(nodes, grads, *x, d)?
        }
        Op::SoftmaxRows(x) => {
            let (r, c) = y.dims2()?;
            let mut d = Vec::with_capacity(r * c);
            for i in 0..r {
                let (gr, yr) = (g.row(i), y.row(i));
                let s = dot(gr, yr);
                d.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - s)));
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(vec![r, c], d)?)?
        }
        Op::LogSoftmaxRows(x) => {
            let (r, c) = y.dims2()?;
            let mut d = Vec::with_capacity(r * c);
            for i in 0..r {
                let (gr, yr) = (g.row(i), y.row(i));
                let s: S = gr.iter().copied().sum();
                d.extend(gr.iter().zip(yr).map(|(&gv, &yv)| gv - yv.exp() * s));
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(vec![r, c], d)?)?
        }
        Op::Transpose(x) => accumulate(nodes, grads, *x, g.transpose()?)?,
        Op::SliceCols { x, start } => {
            let (r, len) = g.dims2()?;
            let start = *start;
            accumulate_with(nodes, grads, *x, |buf| {
                let c = buf.cols();
                let d = buf.data_mut();
                for i in 0..r {
                    for j in 0..len {
                        d[i * c + start + j] += g.data()[i * len + j];
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let (r, c) = g.dims2()?;
            let mut off = 0;
            for p in parts {
                let pc = val(*p).cols();
                let mut d = Vec::with_capacity(r * pc);
                for i in 0..r {
                    d.extend_from_slice(&g.data()[i * c + off..i * c + off + pc]);
                }
                accumulate(nodes, grads, *p, Tensor::from_vec(vec![r, pc], d)?)?;
                off += pc;
            }
        }
        Op::SliceRows { x, start } => {
            let start = *start;
            accumulate_with(nodes, grads, *x, |buf| {
                let c = buf.cols();
                let dst = &mut buf.data_mut()[start * c..start * c + g.len()];
                for (a, &b) in dst.iter_mut().zip(g.data()) {
                    *a += b;
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(*p).len();
                let part = Tensor::from_vec(val(*p).shape().to_vec(), g.data()[off..off + n].to_vec())?;
                accumulate(nodes, grads, *p, part)?;
                off += n;
            }
        }
        Op::SumAll(x) => accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), g.data()[0]))?,
        Op::MeanAll(x) => {
            let n = S::of(val(*x).len().max(1) as f64);
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), g.data()[0] / n))?
        }
        Op::MeanRows(x) => {
            let (r, c) = val(*x).dims2()?;
            let inv = S::one() / S::of(r as f64);
            let mut d = Vec::with_capacity(r * c);
            for _ in 0..r {
                d.extend(g.data().iter().map(|&v| v * inv));
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(vec![r, c], d)?)?
        }
        Op::Pick { x, index } => {
            let index = *index;
            accumulate_with(nodes, grads, *x, |buf| buf.data_mut()[index] += g.data()[0]);
        }
        Op::Conv2d { x, w, b, stride_f, cols } => {
            let (xs, ws) = (val(*x).shape(), val(*w).shape());
            let (cin, t, f) = (xs[0], xs[1], xs[2]);
            let cout = ws[0];
            let fo = conv_out_len(f, *stride_f);
            let gm = g.clone().reshape(&[cout, t * fo])?;
            let mut db = vec![S::zero(); cout];
            for (co, acc) in db.iter_mut().enumerate() {
                *acc = gm.row(co).iter().copied().sum();
            }
            accumulate(nodes, grads, *b, Tensor::from_vec(val(*b).shape().to_vec(), db)?)?;
            if nodes[w.0].requires_grad {
                let dw = gm.matmul_t(false, cols, true)?.reshape(ws)?;
                accumulate(nodes, grads, *w, dw)?;
            }
            if nodes[x.0].requires_grad {
                let wmat = Tensor::from_vec(vec![cout, cin * 9], val(*w).data().to_vec())?;
                let dcols = wmat.matmul_t(true, &gm, false)?;
                let stride = *stride_f;
                accumulate_with(nodes, grads, *x, |buf| {
                    col2im_add(&dcols, buf.data_mut(), cin, t, f, fo, stride)
                });
            }
        }
        Op::ChannelMeanPool(x) => {
            let xs = val(*x).shape();
            let (c, t, f) = (xs[0], xs[1], xs[2]);
            let inv = S::one() / S::of(f.max(1) as f64);
            let mut d = vec![S::zero(); c * t * f];
            for ci in 0..c {
                for ti in 0..t {
                    let gv = g.data()[ti * c + ci] * inv;
                    d[(ci * t + ti) * f..(ci * t + ti + 1) * f].fill(gv);
                }
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(xs.to_vec(), d)?)?
        }
        Op::LayerNormRows { x, inv_std } => {
            let (r, c) = y.dims2()?;
            let n = S::of(c as f64);
            let mut d = Vec::with_capacity(r * c);
            for i in 0..r {
                let (gr, yr) = (g.row(i), y.row(i));
                let mg = gr.iter().copied().sum::<S>() / n;
                let mgy = dot(gr, yr) / n;
                d.extend(
                    gr.iter()
                        .zip(yr)
                        .map(|(&gv, &yv)| inv_std[i] * (gv - mg - yv * mgy)),
                );
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(vec![r, c], d)?)?
        }
        Op::SincBank { low, band, spec } => {
            let (lt, bt) = (val(*low), val(*band));
            let k = lt.len();
            let l = spec.kernel_len;
            let mut dlow = vec![S::zero(); k];
            let mut dband = vec![S::zero(); k];
            for i in 0..k {
                let c = sinc_cutoffs(lt.data()[i].as_f64(), bt.data()[i].as_f64(), spec);
                let taps = sinc_kernel(&c, spec);
                let (mut gl, mut gh) = (0.0, 0.0);
                for (j, (_, dl, dh)) in taps.iter().enumerate() {
                    let gv = g.data()[i * l + j].as_f64();
                    gl += gv * dl;
                    gh += gv * dh;
                }
                dlow[i] = S::of(gl * c.dlow_dlow + gh * c.dhigh_dlow);
                dband[i] = S::of(gh * c.dhigh_dband);
            }
            accumulate(nodes, grads, *low, Tensor::from_vec(lt.shape().to_vec(), dlow)?)?;
            accumulate(nodes, grads, *band, Tensor::from_vec(bt.shape().to_vec(), dband)?)?;
        }
        Op::FrameEnergy { wave, kernels, hop } => {
            let kt = val(*kernels);
            let (k, l) = kt.dims2()?;
            let hop = *hop;
            let t = wave.len() / hop;
            let xp = pad_wave(wave.data(), l);
            let scale = S::of(2.0) / S::of(hop as f64);
            let per_filter: Vec<Vec<S>> = (0..k)
                .into_par_iter()
                .map(|ki| {
                    let h = &kt.data()[ki * l..(ki + 1) * l];
                    let mut dh = vec![S::zero(); l];
                    for ti in 0..t {
                        let ge = g.data()[ti * k + ki] * scale;
                        for nn in ti * hop..(ti + 1) * hop {
                            let seg = &xp[nn..nn + l];
                            let dy = ge * dot(h, seg);
                            for (a, &xv) in dh.iter_mut().zip(seg) {
                                *a += dy * xv;
                            }
                        }
                    }
                    dh
                })
                .collect();
            let dk = Tensor::from_vec(vec![k, l], per_filter.concat())?;
            accumulate(nodes, grads, *kernels, dk)?;
        }
    }
    Ok(())
}
