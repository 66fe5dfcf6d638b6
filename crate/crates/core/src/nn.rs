//! Parameter storage and the handful of layers the model is built from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted module path. Fresh
//! weights are drawn from a seeded ChaCha stream so that model construction
//! is reproducible; candle's own CPU generator cannot be seeded.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Standard deviation used for every freshly initialized weight.
pub const INIT_STD: f64 = 0.01;

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Shared, thread-safe parameter container.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            device,
            dtype,
        }
    }

    pub fn root(&self) -> ParamPath {
        ParamPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// All variables in path order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().vars.get(name).cloned()
    }

    pub fn len(&self) -> usize {
        self.lock().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parameter_count(&self) -> usize {
        self.lock().vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites one variable in place; every layer holding it sees the change.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "parameter `{name}` has shape {:?}, stored tensor has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_device(&self.device)?.to_dtype(self.dtype)?)?;
        Ok(())
    }

    fn create(&self, name: String, shape: &[usize], std: Option<f64>) -> Result<Tensor> {
        let mut inner = self.lock();
        if let Some(existing) = inner.vars.get(&name) {
            return Ok(existing.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match std {
            Some(std) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut inner.rng)).collect()
            }
            None => vec![0.0; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }
}

/// A view of the store under a path prefix.
#[derive(Clone)]
pub struct ParamPath {
    store: ParamStore,
    prefix: String,
}

impl ParamPath {
    pub fn pp(&self, segment: impl AsRef<str>) -> ParamPath {
        ParamPath {
            store: self.store.clone(),
            prefix: self.path(segment.as_ref()),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn gaussian(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.store.create(self.path(name), shape, Some(INIT_STD))
    }

    pub fn zeros(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.store.create(self.path(name), shape, None)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

/// Square-kernel convolution with bias, padding `k / 2`.
pub fn conv(
    p: &ParamPath,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
) -> Result<Conv2d> {
    let weight = p.gaussian("weight", &[out_ch, in_ch / groups, kernel, kernel])?;
    let bias = p.zeros("bias", &[out_ch])?;
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        stride,
        dilation: 1,
        groups,
        cudnn_fwd_algo: None,
    };
    Ok(Conv2d::new(weight, Some(bias), cfg))
}

pub fn conv1x1(p: &ParamPath, in_ch: usize, out_ch: usize) -> Result<Conv2d> {
    conv(p, in_ch, out_ch, 1, 1, 1)
}

pub fn conv3x3(p: &ParamPath, in_ch: usize, out_ch: usize, stride: usize) -> Result<Conv2d> {
    conv(p, in_ch, out_ch, 3, stride, 1)
}

pub fn linear(p: &ParamPath, in_dim: usize, out_dim: usize) -> Result<candle_nn::Linear> {
    let weight = p.gaussian("weight", &[out_dim, in_dim])?;
    let bias = p.zeros("bias", &[out_dim])?;
    Ok(candle_nn::Linear::new(weight, Some(bias)))
}

pub fn conv_relu(layer: &Conv2d, x: &Tensor) -> Result<Tensor> {
    Ok(layer.forward(x)?.relu()?)
}

/// Row-stochastic `(out, in)` matrix for 1-D linear interpolation with
/// half-pixel centres.
pub fn interpolation_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        let f = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - f;
        m[o * in_len + i1] += f;
    }
    m
}

/// Bilinear resize of an NCHW tensor, written as two matrix products so it
/// differentiates like any other op.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let mh = Tensor::from_vec(interpolation_matrix(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let mw = Tensor::from_vec(interpolation_matrix(out_w, w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let rows = x.broadcast_matmul(&mw.t()?.contiguous()?)?;
    Ok(mh.broadcast_matmul(&rows)?)
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, 1)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Spatial mean, `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
