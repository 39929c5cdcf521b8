//! Minimal layer toolkit over candle: a named parameter store with
//! deterministic initialization, and the handful of layers both networks use.
//!
//! Parameters live in `Var`s; layers keep clones of the underlying tensors, so
//! an optimizer updating a `Var` in place is visible to every layer (and every
//! generator) that shares it.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    /// He normal with the given fan-in.
    Kaiming { fan_in: usize },
    /// Symmetric uniform with bound `1/sqrt(fan_in)`.
    UniformFanIn { fan_in: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

#[derive(Clone)]
struct Entry {
    var: Var,
    kind: ParamKind,
}

/// Host-side copy of one named tensor, always stored as f32.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl HostTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.dims().to_vec();
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Ok(Self { shape, data })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    rng: Mutex<ChaCha8Rng>,
    entries: Mutex<BTreeMap<String, Entry>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("params", &self.entries.lock().unwrap().len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope { store: self, prefix: String::new() }
    }

    fn create(&self, name: String, shape: &[usize], init: Init, kind: ParamKind) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = {
            let mut rng = self.rng.lock().unwrap();
            match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Const(c) => vec![c; numel],
                Init::Normal(std) => sample_normal(&mut *rng, std, numel),
                Init::Kaiming { fan_in } => {
                    sample_normal(&mut *rng, (2.0 / fan_in.max(1) as f64).sqrt(), numel)
                }
                Init::UniformFanIn { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound)
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    (0..numel).map(|_| dist.sample(&mut *rng)).collect()
                }
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        entries.insert(name, Entry { var: var.clone(), kind });
        Ok(var)
    }

    /// Trainable variables sorted by name.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.filtered(|_, e| e.kind == ParamKind::Trainable)
    }

    /// Trainable variables whose names start with any of `prefixes`.
    pub fn trainable_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.filtered(|name, e| {
            e.kind == ParamKind::Trainable && prefixes.iter().any(|p| name.starts_with(p))
        })
    }

    fn filtered(&self, keep: impl Fn(&str, &Entry) -> bool) -> Vec<(String, Var)> {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .filter(|(n, e)| keep(n, e))
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.lock().unwrap().keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries.lock().unwrap().get(name).map(|e| e.var.clone())
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.lock().unwrap().get(name).map(|e| e.kind)
    }

    /// Overwrites a parameter in place; the shape must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn export(&self) -> Result<BTreeMap<String, HostTensor>> {
        let entries = self.entries.lock().unwrap();
        entries
            .iter()
            .map(|(n, e)| Ok((n.clone(), HostTensor::from_tensor(e.var.as_tensor())?)))
            .collect()
    }

    /// Loads every parameter from `tensors`. Refuses (without modifying
    /// anything) when names or shapes disagree, listing each discrepancy.
    pub fn import(&self, tensors: &BTreeMap<String, HostTensor>) -> Result<()> {
        let entries = self.entries.lock().unwrap();
        let mut problems = Vec::new();
        for (name, e) in entries.iter() {
            match tensors.get(name) {
                None => problems.push(format!("missing tensor `{name}`")),
                Some(h) if h.shape.as_slice() != e.var.dims() => problems.push(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    h.shape,
                    e.var.dims()
                )),
                Some(h) if h.data.len() != h.numel() => problems.push(format!(
                    "tensor `{name}` holds {} values for shape {:?}",
                    h.data.len(),
                    h.shape
                )),
                _ => {}
            }
        }
        for name in tensors.keys() {
            if !entries.contains_key(name) {
                problems.push(format!("unexpected tensor `{name}`"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems));
        }
        for (name, e) in entries.iter() {
            e.var.set(&tensors[name].to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }

    /// Loads the parameters under `prefix` from `tensors`, ignoring other
    /// names there. Every parameter under `prefix` must be present.
    pub fn import_subset(&self, tensors: &BTreeMap<String, HostTensor>, prefix: &str) -> Result<usize> {
        let wanted: BTreeMap<String, HostTensor> = tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let entries = self.entries.lock().unwrap();
        let mut problems = Vec::new();
        for (name, e) in entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            match wanted.get(name) {
                None => problems.push(format!("missing tensor `{name}`")),
                Some(h) if h.shape.as_slice() != e.var.dims() || h.data.len() != h.numel() => problems.push(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    h.shape,
                    e.var.dims()
                )),
                _ => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems));
        }
        let mut loaded = 0;
        for (name, e) in entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            e.var.set(&wanted[name].to_tensor(self.dtype, &self.device)?)?;
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Total number of scalar trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

fn sample_normal(rng: &mut impl Rng, std: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, part: impl AsRef<str>) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            part.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, part.as_ref())
        };
        Scope { store: self.store, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let var = self.store.create(self.full(name), shape, init, ParamKind::Trainable)?;
        Ok(var.as_tensor().clone())
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.full(name), shape, init, ParamKind::Buffer)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        Self { kernel, stride: 1, padding: kernel / 2, bias: true }
    }

    pub fn strided(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding, bias: true }
    }

    pub fn no_bias(self) -> Self {
        Self { bias: false, ..self }
    }
}

impl Conv2d {
    pub fn new(vs: &Scope, c_in: usize, c_out: usize, spec: ConvSpec, init: Init) -> Result<Self> {
        let k = spec.kernel;
        let weight = vs.param("weight", &[c_out, c_in, k, k], init)?;
        let bias = if spec.bias {
            Some(vs.param("bias", &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride: spec.stride, padding: spec.padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

/// Fractionally-strided convolution; weight layout is `(c_in, c_out, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    /// Upsamples by exactly `stride` with a 3x3 kernel.
    pub fn upsample(vs: &Scope, c_in: usize, c_out: usize, stride: usize, init: Init) -> Result<Self> {
        let weight = vs.param("weight", &[c_in, c_out, 3, 3], init)?;
        let bias = vs.param("bias", &[c_out], Init::Zeros)?;
        Ok(Self { weight, bias, stride, padding: 1, output_padding: stride - 1 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, self.output_padding, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(vs: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = vs.param("weight", &[d_out, d_in], Init::UniformFanIn { fan_in: d_in })?;
        let bias = vs.param("bias", &[d_out], Init::UniformFanIn { fan_in: d_in })?;
        Ok(Self { weight, bias })
    }

    pub fn with_init(vs: &Scope, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        let weight = vs.param("weight", &[d_out, d_in], init)?;
        let bias = vs.param("bias", &[d_out], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    /// `x`: `(n, d_in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// Per-sample, per-channel normalization over spatial positions; no affine.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let y = centered.broadcast_div(&(var + EPS)?.sqrt()?)?;
    Ok(y.reshape((n, c, h, w))?)
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    const EPS: f64 = 1e-5;
    const MOMENTUM: f64 = 0.1;

    pub fn new(vs: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: vs.param("weight", &[channels], Init::Ones)?,
            beta: vs.param("bias", &[channels], Init::Zeros)?,
            running_mean: vs.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: vs.buffer("running_var", &[channels], Init::Ones)?,
        })
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { (&var * (count / (count - 1.0)))? } else { var.clone() };
            let m = Self::MOMENTUM;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.flatten_all()?.detach() * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()?.detach() * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean.reshape(shape)?, var.reshape(shape)?)
        } else {
            (
                self.running_mean.as_tensor().detach().reshape(shape)?,
                self.running_var.as_tensor().detach().reshape(shape)?,
            )
        };
        let y = x.broadcast_sub(&mean)?.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(y
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Inverted dropout with a caller-supplied generator; identity when `rng` is `None`.
pub fn dropout(x: &Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let Some(rng) = rng else { return Ok(x.clone()) };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// 3x3 max pool with stride 2 and padding 1 on even-sized maps, built from
/// strided slices so the backward pass routes each gradient to its argmax
/// (candle's pooling backward scales it by 1/k^2).
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pool needs even spatial dims, got {h}x{w}")));
    }
    // shift so every real value is >= 1 and zero padding never wins
    let lo = (x.min_all()?.detach() - 1.0)?;
    let shifted = x.broadcast_sub(&lo)?;
    let padded = shifted.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut out: Option<Tensor> = None;
    for di in 0..3 {
        for dj in 0..3 {
            let tap = padded
                .narrow(2, di, h)?
                .narrow(3, dj, w)?
                .reshape((n, c, h / 2, 2, w / 2, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((n, c, h / 2, w / 2))?;
            out = Some(match out {
                None => tap,
                Some(acc) => acc.maximum(&tap)?,
            });
        }
    }
    Ok(out.expect("nine taps").broadcast_add(&lo)?)
}

/// Read a scalar tensor as `f64` regardless of dtype.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
