//! Named trainable parameters and the small set of layers built on them.
//!
//! Initial values come from a ChaCha stream keyed by the store seed and the
//! parameter name, so a model is reproducible independently of the order in
//! which its layers are constructed.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Owns every trainable tensor of one network, keyed by dotted name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} defined twice")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Gaussian-initialized parameter.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.insert(name, shape, values)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    /// Flattened values of one parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .var(name)?
            .as_tensor()
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    /// Overwrites one parameter in place; shape is kept.
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self.var(name)?;
        if values.len() != var.elem_count() {
            return Err(Error::invalid(format!(
                "parameter {name} has {} elements, got {}",
                var.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, var.shape(), &Device::Cpu)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Copies of every parameter, for before/after comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .keys()
            .map(|name| Ok((name.clone(), self.values(name)?)))
            .collect()
    }
}

fn map_storage(
    s: &CpuStorage,
    l: &Layout,
    f: impl Fn(usize, f64) -> f64,
) -> candle_core::Result<CpuStorage> {
    let Some((a, b)) = l.contiguous_offsets() else {
        candle_core::bail!("expected a contiguous tensor")
    };
    Ok(match s {
        CpuStorage::F32(v) => CpuStorage::F32(v[a..b].iter().enumerate().map(|(i, &x)| f(i, x as f64) as f32).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(v[a..b].iter().enumerate().map(|(i, &x)| f(i, x)).collect()),
        _ => candle_core::bail!("leaky relu supports f32 and f64 only"),
    })
}

struct LeakyRelu(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let slope = self.0;
        let out = map_storage(s, l, |_, x| if x > 0.0 { x } else { slope * x })?;
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = arg
            .contiguous()?
            .apply_op2_no_bwd(&grad_res.contiguous()?, &LeakyReluGrad(self.0))?;
        Ok(Some(g))
    }
}

/// `(x, g)` to `g` where `x > 0`, `slope * g` elsewhere.
struct LeakyReluGrad(f64);

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let slope = self.0;
        let Some((a, b)) = l1.contiguous_offsets() else {
            candle_core::bail!("expected a contiguous tensor")
        };
        let positive: Vec<bool> = match s1 {
            CpuStorage::F32(v) => v[a..b].iter().map(|&x| x > 0.0).collect(),
            CpuStorage::F64(v) => v[a..b].iter().map(|&x| x > 0.0).collect(),
            _ => candle_core::bail!("leaky relu supports f32 and f64 only"),
        };
        let out = map_storage(s2, l2, |i, g| if positive[i] { g } else { slope * g })?;
        Ok((out, l1.shape().clone()))
    }
}

/// `x` for positive inputs, `slope * x` otherwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LeakyRelu(slope))?)
}

/// Samples after zero-insertion upsampling: `x[t]` lands at `t * rate`.
pub fn zero_insert(x: &Tensor, rate: usize) -> Result<Tensor> {
    if rate == 1 {
        return Ok(x.clone());
    }
    let (b, c, t) = x.dims3()?;
    let zeros = Tensor::zeros((b, c, t, rate - 1), x.dtype(), x.device())?;
    Ok(Tensor::cat(&[&x.unsqueeze(3)?, &zeros], 3)?.reshape((b, c, t * rate))?)
}

/// 1-D convolution over `(B, C, T)` with optional asymmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    dilation: usize,
    pad: (usize, usize),
}

impl Conv1d {
    /// Length-preserving convolution (`stride` 1, odd kernel).
    pub fn same(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, dilation: usize) -> Result<Self> {
        let p = dilation * (k - 1) / 2;
        Self::new(store, name, c_in, c_out, k, 1, dilation, (p, p))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        pad: (usize, usize),
    ) -> Result<Self> {
        let std = (1.0 / (c_in * k) as f64).sqrt();
        Self::with_std(store, name, c_in, c_out, k, stride, dilation, pad, std)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        pad: (usize, usize),
        std: f64,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.normal(&format!("{name}.weight"), &[c_out, c_in, k], std)?,
            bias: store.zeros(&format!("{name}.bias"), &[c_out])?,
            stride,
            dilation,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv1d(x, &self.weight, self.stride, self.dilation, self.pad)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Unbiased 1-D convolution of `x (B, C_in, T)` with `w (C_out, C_in, k)`
/// as a gather of kernel windows and one matmul. Candle's own conv1d
/// backward returns wrong weight gradients whenever the convolution is
/// padded, and wrong input gradients on some unpadded shapes, so it is not
/// used.
fn conv1d(x: &Tensor, w: &Tensor, stride: usize, dilation: usize, pad: (usize, usize)) -> Result<Tensor> {
    let (l, r) = pad;
    let (c_out, c_in, k) = w.dims3()?;
    let (b, _, n) = x.dims3()?;
    let w2 = w.reshape((c_out, c_in * k))?;
    if k == 1 && stride == 1 && l == 0 && r == 0 {
        return Ok(w2.broadcast_matmul(x)?);
    }
    if k == stride && l == 0 && r == 0 && dilation == 1 {
        // Non-overlapping frames: a reshape and one matmul.
        let frames = n / k;
        if frames == 0 {
            return Err(Error::invalid(format!("{n} samples is shorter than the {k}-tap kernel")));
        }
        return Ok(x
            .narrow(2, 0, frames * k)?
            .reshape((b, c_in, frames, k))?
            .permute((0, 2, 1, 3))?
            .reshape((b, frames, c_in * k))?
            .broadcast_matmul(&w2.t()?)?
            .transpose(1, 2)?);
    }
    let span = dilation * (k - 1) + 1;
    if n + l + r < span {
        return Err(Error::invalid(format!("{n} samples is shorter than the kernel span {span}")));
    }
    let len = (n + l + r - span) / stride + 1;
    let xp = if l + r > 0 { x.pad_with_zeros(2, l, r)? } else { x.clone() };
    let idx: Vec<u32> = (0..k)
        .flat_map(|j| (0..len).map(move |t| (t * stride + j * dilation) as u32))
        .collect();
    let idx = Tensor::from_vec(idx, k * len, x.device())?;
    let cols = xp.index_select(&idx, 2)?.reshape((b, c_in * k, len))?;
    Ok(w2.broadcast_matmul(&cols)?)
}

/// Learned upsampling by an integer factor: zero insertion followed by a
/// `2 * rate` tap convolution, the same operator as a strided transposed
/// convolution. Output length is exactly `T * rate`.
///
/// Evaluated in polyphase form: output phase `p` only sees two taps, so the
/// weight is regrouped into a 3-tap kernel with `rate * c_out` channels and
/// the phases are interleaved afterwards.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv1d,
    rate: usize,
    /// Tap index per (phase, position); `2 * rate` selects an appended zero.
    taps: Tensor,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rate: usize) -> Result<Self> {
        // Only two taps of every 2*rate see a non-zero input.
        let std = (1.0 / (2 * c_in) as f64).sqrt();
        let k = 2 * rate;
        let conv = Conv1d::with_std(store, name, c_in, c_out, k, 1, 1, (rate, rate - 1), std)?;
        let zero = (2 * rate) as u32;
        let r = rate as u32;
        let taps: Vec<u32> = (0..r)
            .flat_map(|p| if p == 0 { [0, r, zero] } else { [zero, r - p, 2 * r - p] })
            .collect();
        let taps = Tensor::from_vec(taps, 3 * rate, &Device::Cpu)?;
        Ok(Self { conv, rate, taps })
    }

    /// Reference form: explicit zero insertion and the full convolution.
    #[cfg(test)]
    fn forward_direct(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&zero_insert(x, self.rate)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, t) = x.dims3()?;
        let r = self.rate;
        let (c_out, c_in, _) = self.conv.weight.dims3()?;
        let w = self.conv.weight.pad_with_zeros(2, 0, 1)?;
        let w = w
            .index_select(&self.taps, 2)?
            .reshape((c_out, c_in, r, 3))?
            .permute((2, 0, 1, 3))?
            .reshape((r * c_out, c_in, 3))?;
        let y = conv1d(x, &w, 1, 1, (1, 1))?
            .reshape((b, r, c_out, t))?
            .permute((0, 2, 3, 1))?
            .reshape((b, c_out, t * r))?;
        Ok(y.broadcast_add(&self.conv.bias.reshape((1, (), 1))?)?)
    }
}

/// 2-D convolution over `(B, C, H, W)` with square kernel and stride.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    k: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let std = (1.0 / (c_in * k * k) as f64).sqrt();
        Ok(Self {
            weight: store.normal(&format!("{name}.weight"), &[c_out, c_in, k, k], std)?,
            bias: store.zeros(&format!("{name}.bias"), &[c_out])?,
            k,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.stride > 1 {
            // The strided backward pass derives one output padding from the
            // height and applies it to both axes, so make both spans divide
            // evenly by the stride.
            let (_, _, h, w) = x.dims4()?;
            let extra = |n: usize| {
                let span = n + 2 * self.padding - self.k;
                (self.stride - span % self.stride) % self.stride
            };
            x.pad_with_zeros(2, 0, extra(h))?.pad_with_zeros(3, 0, extra(w))?
        } else {
            x.clone()
        };
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Lookup table mapping `(B, T)` ids to `(B, dim, T)` vectors.
#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, dim: usize, std: f64) -> Result<Self> {
        Ok(Self {
            table: store.normal(name, &[n, dim], std)?,
        })
    }

    pub fn n_entries(&self) -> usize {
        self.table.dims()[0]
    }

    /// `ids` is a `(B, T)` `u32` tensor.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let rows = self.table.index_select(&ids.flatten_all()?, 0)?;
        Ok(rows.reshape((b, t, ()))?.transpose(1, 2)?.contiguous()?)
    }

    /// Rows for a `(B,)` `u32` id tensor, shaped `(B, dim)`.
    pub fn rows(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(self.table.index_select(ids, 0)?)
    }
}

/// Mean over every element, as a scalar tensor.
pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_all()?.mean(D::Minus1)?)
}
