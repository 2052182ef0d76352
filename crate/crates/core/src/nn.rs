//! Parameter storage and the small set of layers the model is built from.
//!
//! Convolutions are lowered to im2col + matmul on top of tensor ops, which
//! keeps the backward pass on the fast matmul path.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal { std: f64 },
    Uniform { bound: f64 },
    Const(f64),
}

impl Init {
    /// GAN-standard weight init.
    pub const GAN: Init = Init::Normal { std: 0.02 };
    pub const ZERO: Init = Init::Const(0.0);

    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform { bound } => {
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| rng.sample(dist)).collect()
            }
            Init::Const(v) => vec![v; n],
        }
    }
}

/// Ordered, named collection of trainable tensors.
///
/// Names are unique; iteration order is lexicographic so hashes and
/// serialization are stable.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let n = shape.iter().product();
        let t = Tensor::from_vec(init.sample(n, rng), shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.insert(name, t)
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies `values` into existing parameters, checking names and shapes.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Deep copy of all parameter values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(tensor_bytes(var.as_tensor())?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Config(format!("unsupported dtype {other:?}"))),
    })
}

/// A trainable tensor held by a layer.
#[derive(Debug, Clone)]
pub struct Param(Var);

impl Param {
    pub fn var(&self) -> &Var {
        &self.0
    }

    pub fn t(&self) -> &Tensor {
        self.0.as_tensor()
    }
}

impl From<Var> for Param {
    fn from(v: Var) -> Self {
        Param(v)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Param,
    bias: Param,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.create(&format!("{prefix}.weight"), &[out_ch, in_ch, kernel, kernel], init, rng)?;
        let bias = store.create(&format!("{prefix}.bias"), &[out_ch], Init::ZERO, rng)?;
        Ok(Self {
            weight: weight.into(),
            bias: bias.into(),
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Var {
        self.weight.var()
    }

    pub fn bias(&self) -> &Var {
        self.bias.var()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.t().dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, self.weight.t(), Some(self.bias.t()), self.stride, self.padding)
    }
}

/// Cross-correlation of `x (b, c, h, w)` with `weight (o, c, k, k)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Shape(format!(
            "conv kernel {k} stride {stride} does not fit {h}x{w}"
        )));
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;

    // Channels lead and batch joins the spatial axes, so the product is a
    // single `(o, c·k·k) × (c·k·k, b·ho·wo)` matmul and the only strided
    // copies are activation-sized.
    let xc = x.transpose(0, 1)?.contiguous()?;
    let cols = if k == 1 && stride == 1 && padding == 0 {
        xc.reshape((c, b * h * w))?
    } else {
        xc.apply_op1(Im2Col {
            dims: [c, b, h, w],
            kernel: k,
            stride,
            padding,
            out: [ho, wo],
        })?
    };
    let mut y = weight.reshape((o, c * k * k))?.matmul(&cols)?;
    if let Some(bias) = bias {
        y = y.broadcast_add(&bias.reshape((o, 1))?)?;
    }
    Ok(y.reshape((o, b, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

/// Unfolds a channel-major `(c, b, h, w)` tensor into the
/// `(c·k·k, b·ho·wo)` patch matrix; out-of-bounds taps read zero.
struct Im2Col {
    dims: [usize; 4],
    kernel: usize,
    stride: usize,
    padding: usize,
    out: [usize; 2],
}

impl Im2Col {
    /// Calls `f(column_index, source_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [c, b, h, w] = self.dims;
        let [ho, wo] = self.out;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = b * ho * wo;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * plane;
                    for bi in 0..b {
                        let src_base = (ci * b + bi) * h * w;
                        for oy in 0..ho {
                            let y = (oy * s + ki) as isize - p as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let dst = row + (bi * ho + oy) * wo;
                            let src = src_base + y as usize * w;
                            for ox in 0..wo {
                                let xx = (ox * s + kj) as isize - p as isize;
                                if xx >= 0 && xx < w as isize {
                                    f(dst + ox, src + xx as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn rows(&self) -> usize {
        self.dims[0] * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.dims[1] * self.out[0] * self.out[1]
    }

    fn unfold<T: candle_core::WithDType>(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows() * self.cols()];
        self.for_each_tap(|d, s| out[d] = x[s]);
        out
    }

    fn fold<T: candle_core::WithDType>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dims.iter().product()];
        self.for_each_tap(|d, s| out[s] += cols[d]);
        out
    }
}

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("im2col needs a contiguous input".into()))?;
        let storage = match storage {
            candle_core::CpuStorage::F32(v) => candle_core::CpuStorage::F32(self.unfold(&v[start..end])),
            candle_core::CpuStorage::F64(v) => candle_core::CpuStorage::F64(self.unfold(&v[start..end])),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((storage, (self.rows(), self.cols()).into()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad.flatten_all()?;
        let folded = match grad.dtype() {
            DType::F32 => Tensor::from_vec(self.fold(&grad.to_vec1::<f32>()?), arg.shape(), &Device::Cpu)?,
            _ => Tensor::from_vec(self.fold(&grad.to_vec1::<f64>()?), arg.shape(), &Device::Cpu)?,
        };
        Ok(Some(folded))
    }
}

/// Per-sample, per-channel normalisation over the spatial axes (no affine).
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * LEAKY_SLOPE)?)?)
}

/// Logistic sigmoid through `tanh`, which stays finite for large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// One LSTM layer, PyTorch gate order `(input, forget, cell, output)`.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    w_ih: Param,
    w_hh: Param,
    b_ih: Param,
    b_hh: Param,
    hidden: usize,
}

impl LstmLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let init = Init::Uniform {
            bound: 1.0 / (hidden as f64).sqrt(),
        };
        Ok(Self {
            w_ih: store.create(&format!("{prefix}.weight_ih"), &[4 * hidden, input], init, rng)?.into(),
            w_hh: store.create(&format!("{prefix}.weight_hh"), &[4 * hidden, hidden], init, rng)?.into(),
            b_ih: store.create(&format!("{prefix}.bias_ih"), &[4 * hidden], init, rng)?.into(),
            b_hh: store.create(&format!("{prefix}.bias_hh"), &[4 * hidden], init, rng)?.into(),
            hidden,
        })
    }

    /// Runs the layer over `steps` (each `(b, input)`) from zero state and
    /// returns the hidden output at every step.
    pub fn forward(&self, steps: &[Tensor]) -> Result<Vec<Tensor>> {
        let first = steps
            .first()
            .ok_or_else(|| Error::Shape("empty LSTM input".into()))?;
        let b = first.dims()[0];
        // `W · xᵀ` keeps the weight gradient contiguous; transposing a 4H×H
        // matrix costs more than the product itself.
        let bias = (self.b_ih.t() + self.b_hh.t())?;
        let x = Tensor::cat(steps, 0)?;
        let input = self.w_ih.t().matmul(&x.t()?)?.t()?.broadcast_add(&bias)?.contiguous()?;
        let recurrence = LstmRecurrence {
            steps: steps.len(),
            batch: b,
            hidden: self.hidden,
        };
        let hidden = input.apply_op2(self.w_hh.t(), recurrence)?;
        (0..steps.len()).map(|t| Ok(hidden.narrow(0, t * b, b)?)).collect()
    }
}

/// The recurrent part of an LSTM layer as one autograd node. Inputs are the
/// stacked input projections `(T·b, 4H)` (bias included) and `W_hh`; the
/// output is the stacked hidden states `(T·b, H)`. The backward pass
/// recomputes the forward trace and runs backpropagation through time,
/// accumulating the `W_hh` gradient in a single product.
struct LstmRecurrence {
    steps: usize,
    batch: usize,
    hidden: usize,
}

/// Activations of one step.
struct LstmStep {
    i: Tensor,
    f: Tensor,
    g: Tensor,
    o: Tensor,
    c: Tensor,
    tanh_c: Tensor,
    h: Tensor,
}

impl LstmRecurrence {
    fn trace(&self, input: &Tensor, w_hh: &Tensor) -> candle_core::Result<Vec<LstmStep>> {
        let (b, hd) = (self.batch, self.hidden);
        let mut trace: Vec<LstmStep> = Vec::with_capacity(self.steps);
        for t in 0..self.steps {
            let mut gates = input.narrow(0, t * b, b)?;
            if let Some(prev) = trace.last() {
                gates = (gates + w_hh.matmul(&prev.h.t()?)?.t()?)?;
            }
            let chunk = |k: usize| gates.narrow(1, k * hd, hd);
            let gate = |k: usize| -> candle_core::Result<Tensor> { ((chunk(k)? * 0.5)?.tanh()? + 1.0)? * 0.5 };
            let (i, f, o) = (gate(0)?, gate(1)?, gate(3)?);
            let g = chunk(2)?.tanh()?;
            let c = match trace.last() {
                Some(prev) => ((&f * &prev.c)? + (&i * &g)?)?,
                None => (&i * &g)?,
            };
            let tanh_c = c.tanh()?;
            let h = (&o * &tanh_c)?;
            trace.push(LstmStep { i, f, g, o, c, tanh_c, h });
        }
        Ok(trace)
    }
}

fn contiguous_tensor(s: &candle_core::CpuStorage, l: &candle_core::Layout) -> candle_core::Result<Tensor> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("LSTM recurrence needs contiguous inputs".into()))?;
    match s {
        candle_core::CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], l.shape(), &Device::Cpu),
        candle_core::CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], l.shape(), &Device::Cpu),
        _ => Err(candle_core::Error::Msg("LSTM recurrence supports f32 and f64".into())),
    }
}

impl candle_core::CustomOp2 for LstmRecurrence {
    fn name(&self) -> &'static str {
        "lstm-recurrence"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let input = contiguous_tensor(s1, l1)?;
        let w_hh = contiguous_tensor(s2, l2)?;
        let hs: Vec<Tensor> = self.trace(&input, &w_hh)?.into_iter().map(|s| s.h).collect();
        let out = Tensor::cat(&hs, 0)?;
        let shape = out.shape().clone();
        let storage = match out.dtype() {
            DType::F32 => candle_core::CpuStorage::F32(out.flatten_all()?.to_vec1()?),
            _ => candle_core::CpuStorage::F64(out.flatten_all()?.to_vec1()?),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        input: &Tensor,
        w_hh: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (input, w_hh, grad) = (input.detach(), w_hh.detach(), grad.detach());
        let b = self.batch;
        let trace = self.trace(&input, &w_hh)?;
        let mut d_gates = vec![None; self.steps];
        let mut dh_next: Option<Tensor> = None;
        let mut dc_next: Option<Tensor> = None;
        for t in (0..self.steps).rev() {
            let s = &trace[t];
            let mut dh = grad.narrow(0, t * b, b)?;
            if let Some(d) = &dh_next {
                dh = (dh + d)?;
            }
            let d_o = (&dh * &s.tanh_c)?;
            let mut dc = ((&dh * &s.o)? * (1.0 - s.tanh_c.sqr()?)?)?;
            if let Some(d) = &dc_next {
                dc = (dc + d)?;
            }
            let d_i = (&dc * &s.g)?;
            let d_g = (&dc * &s.i)?;
            let sig = |d: &Tensor, y: &Tensor| -> candle_core::Result<Tensor> { d * (y * (1.0 - y)?)? };
            let d_f = match t {
                0 => s.f.zeros_like()?,
                _ => sig(&(&dc * &trace[t - 1].c)?, &s.f)?,
            };
            let pre = Tensor::cat(&[sig(&d_i, &s.i)?, d_f, (d_g * (1.0 - s.g.sqr()?)?)?, sig(&d_o, &s.o)?], 1)?;
            if t > 0 {
                dh_next = Some(pre.matmul(&w_hh)?);
                dc_next = Some((&dc * &s.f)?);
            }
            d_gates[t] = Some(pre);
        }
        let d_gates: Vec<Tensor> = d_gates.into_iter().map(|d| d.expect("every step visited")).collect();
        let d_input = Tensor::cat(&d_gates, 0)?;
        let d_w_hh = if self.steps > 1 {
            let later = d_input.narrow(0, b, (self.steps - 1) * b)?;
            let hs: Vec<Tensor> = trace[..self.steps - 1].iter().map(|s| s.h.clone()).collect();
            later.t()?.matmul(&Tensor::cat(&hs, 0)?)?
        } else {
            w_hh.zeros_like()?
        };
        Ok((Some(d_input), Some(d_w_hh)))
    }
}

/// Stacked LSTM: each layer consumes the previous layer's output sequence.
#[derive(Debug, Clone)]
pub struct Lstm {
    layers: Vec<LstmLayer>,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|l| {
                let in_dim = if l == 0 { input } else { hidden };
                LstmLayer::new(store, &format!("{prefix}.l{l}"), in_dim, hidden, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, steps: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut seq = steps.to_vec();
        for layer in &self.layers {
            seq = layer.forward(&seq)?;
        }
        Ok(seq)
    }
}
