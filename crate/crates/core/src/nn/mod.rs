//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters are created from a seeded ChaCha stream so that a network built
//! twice with the same seed is bitwise identical, in either precision.

mod unfold;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use unfold::{conv2d, Col2Im, ConvGeometry, Im2Col};

use crate::error::{Error, Result};

pub const IN_EPS: f64 = 1e-5;

/// Named trainable variables plus non-trainable buffers of one network.
pub struct ParamStore {
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn tensor_from(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        let t = self.tensor_from(values, shape)?;
        self.register(name.into(), t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let t = self.tensor_from(vec![value; n], shape)?;
        self.register(name.into(), t)
    }

    pub fn normal_buffer(&mut self, name: impl Into<String>, len: usize) -> Result<Var> {
        let values: Vec<f64> = (0..len)
            .map(|_| {
                // Box-Muller keeps us on the same ChaCha stream.
                let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = self.rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let values = values.into_iter().map(|v| v / norm).collect();
        let var = Var::from_tensor(&self.tensor_from(values, &[len])?)?;
        self.buffers.push((name.into(), var.clone()));
        Ok(var)
    }

    fn register(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        debug_assert!(self.params.iter().all(|(n, _)| n != &name), "duplicate param {name}");
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.push((name, var));
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    /// Parameters followed by buffers, in creation order.
    pub fn all_named(&self) -> impl Iterator<Item = &(String, Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.all_named().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Overwrites every named tensor from `lookup`; all names must be present.
    pub fn load_from(&self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (name, var) in self.all_named() {
            let t = lookup(name).ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} != expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names and values, used for stage-isolation checks.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.all_named() {
            h.update(name.as_bytes());
            let values: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Anything that owns a [`ParamStore`].
pub trait Network {
    fn store(&self) -> &ParamStore;
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = (in_c * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[out_c, in_c, kernel, kernel], bound)?;
        let bias = Some(store.uniform(format!("{name}.bias"), &[out_c], bound)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding: (kernel - 1) / 2,
        })
    }

    /// Zero weights and a constant bias; used for residual heads that must start at identity.
    pub fn new_constant(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        bias: f64,
    ) -> Result<Self> {
        let weight = store.constant(format!("{name}.weight"), &[out_c, in_c, kernel, kernel], 0.0)?;
        let bias = Some(store.constant(format!("{name}.bias"), &[out_c], bias)?);
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: (kernel - 1) / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// Convolution whose weight is divided by its largest singular value,
/// estimated with one power-iteration step per training forward pass.
pub struct SpectralConv2d {
    conv: Conv2d,
    u: Var,
}

impl SpectralConv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, name, in_c, out_c, kernel, stride)?;
        let u = store.normal_buffer(format!("{name}.sn_u"), out_c)?;
        Ok(Self { conv, u })
    }

    fn normalized_weight(&self, update: bool) -> Result<Tensor> {
        let w = &self.conv.weight;
        let out_c = w.dim(0)?;
        let w_mat = w.reshape((out_c, ()))?;
        let w_det = w_mat.detach();
        let mut u = self.u.as_tensor().detach().reshape((out_c, 1))?;
        let v = l2_normalize_col(&w_det.t()?.matmul(&u)?)?;
        if update {
            u = l2_normalize_col(&w_det.matmul(&v)?)?;
            self.u.set(&u.reshape(out_c)?)?;
        }
        let sigma = u.t()?.matmul(&w_mat.matmul(&v)?)?.reshape(())?;
        Ok(w.broadcast_div(&sigma)?)
    }

    pub fn forward(&self, x: &Tensor, update: bool) -> Result<Tensor> {
        let w = self.normalized_weight(update)?;
        let y = conv2d(x, &w, self.conv.stride, self.conv.padding)?;
        Ok(match &self.conv.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

fn l2_normalize_col(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_all()?.sqrt()?;
    let n = (n + 1e-12)?;
    Ok(x.broadcast_div(&n)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_f: usize, out_f: usize) -> Result<Self> {
        let bound = 1.0 / (in_f as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[out_f, in_f], bound)?,
            bias: store.uniform(format!("{name}.bias"), &[out_f], bound)?,
        })
    }

    /// `[B, in] -> [B, out]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.relu()?,
            Activation::LeakyRelu => leaky_relu(x, 0.2)?,
            Activation::Tanh => x.tanh()?,
        })
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Per-sample, per-channel normalization over the spatial axes, no affine.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let y = centered.broadcast_div(&(var + IN_EPS)?.sqrt()?)?;
    Ok(y.reshape((b, c, h, w))?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

/// Global average over the spatial axes: `[B, C, H, W] -> [B, C]`.
pub fn global_avg(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Interpolation taps for resizing `n_in` samples to `n_out` with half-pixel
/// centers: each output index gets `(i0, i1, frac)` meaning
/// `(1 - frac) * x[i0] + frac * x[i1]`.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            if n_in == n_out {
                return (d, d, 0.0);
            }
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn interpolation_matrix(n_in: usize, n_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; n_out * n_in];
    for (o, (i0, i1, f)) in bilinear_taps(n_in, n_out).into_iter().enumerate() {
        m[o * n_in + i0] += 1.0 - f;
        m[o * n_in + i1] += f;
    }
    Ok(Tensor::from_vec(m, (n_out, n_in), device)?.to_dtype(dtype)?)
}

/// Differentiable bilinear resize of `[B, C, H, W]` via two interpolation matrices.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rh = interpolation_matrix(h, out_h, x.dtype(), x.device())?;
    let rw = interpolation_matrix(w, out_w, x.dtype(), x.device())?;
    let y = rh.broadcast_matmul(&x.contiguous()?)?;
    Ok(y.broadcast_matmul(&rw.t()?)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn max_abs(t: &Tensor) -> Result<f64> {
    Ok(t.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
