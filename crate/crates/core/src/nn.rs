//! Small neural-network toolkit on top of candle.
//!
//! Parameters are created through a [`ParamStore`] which draws initial values
//! from a seeded stream, so two models built from the same seed are
//! bit-identical. Convolutions go through an explicit im2col + matmul path:
//! the autograd graph then only contains a matmul and a cheap scatter, which
//! is several times faster on CPU than candle's transposed-convolution
//! backward.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

/// A named parameter array, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Owns every trainable variable of a model, in creation order.
pub struct ParamStore {
    vars: Vec<(String, Var)>,
    rng: Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: Vec::new(),
            rng: seeded(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if self.vars.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.push((name.to_string(), var));
        Ok(handle)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                (z * std) as f32
            })
            .collect();
        self.register(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![value; n])
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn export(&self) -> Result<Vec<NamedArray>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                Ok(NamedArray {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    data: var.as_tensor().flatten_all()?.to_vec1::<f32>()?,
                })
            })
            .collect()
    }

    /// Overwrite every parameter with the array of the same name.
    pub fn import(&self, arrays: &[NamedArray]) -> Result<()> {
        for (name, var) in &self.vars {
            let arr = arrays
                .iter()
                .find(|a| &a.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if arr.shape != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    var.dims(),
                    arr.shape
                )));
            }
            let t = Tensor::from_vec(arr.data.clone(), arr.shape.as_slice(), &self.device)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        Ok(Self {
            weight: store.normal(&format!("{name}.weight"), &[d_out, d_in], std)?,
            bias: store.constant(&format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    /// Zero-initialised layer, used for residual output projections.
    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[d_out, d_in], 0.0)?,
            bias: store.constant(&format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

pub struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            shift: store.constant(&format!("{name}.shift"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        let gain = store.constant(&format!("{name}.gain"), &[channels], 1.0)?;
        let shift = store.constant(&format!("{name}.shift"), &[channels], 0.0)?;
        Ok(Self {
            inner: candle_nn::GroupNorm::new(gain, shift, channels, groups, 1e-5)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        use candle_nn::Module;
        Ok(self.inner.forward(x)?)
    }
}

/// Square-kernel 2-D convolution with "same" padding (`k / 2`).
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Ok(Self {
            weight: store.normal(&format!("{name}.weight"), &[c_out, fan_in], std)?,
            bias: store.constant(&format!("{name}.bias"), &[c_out], 0.0)?,
            kernel,
            stride,
        })
    }

    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[c_out, c_in * kernel * kernel], 0.0)?,
            bias: store.constant(&format!("{name}.bias"), &[c_out], 0.0)?,
            kernel,
            stride: 1,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let c_out = self.bias.dim(0)?;
        let pad = self.kernel / 2;
        let ho = (h + 2 * pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * pad - self.kernel) / self.stride + 1;
        let cols = if self.kernel == 1 && self.stride == 1 {
            x.reshape((b, c, h * w))?
        } else {
            x.contiguous()?.apply_op1(Im2Col {
                kernel: self.kernel,
                stride: self.stride,
                pad,
            })?
        };
        let y = self.weight.broadcast_matmul(&cols)?;
        let y = y.broadcast_add(&self.bias.reshape((1, c_out, 1))?)?;
        Ok(y.reshape((b, c_out, ho, wo))?)
    }
}

fn out_extent(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

/// `(B, C, H, W) -> (B, C·k·k, Ho·Wo)` patch unrolling.
struct Im2Col {
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let src = match layout.contiguous_offsets() {
            Some((start, end)) => &storage.as_slice::<f32>()?[start..end],
            None => candle_core::bail!("im2col expects a contiguous input"),
        };
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let ho = out_extent(h, k, s, p);
        let wo = out_extent(w, k, s, p);
        let rows = c * k * k;
        let mut out = vec![0f32; b * rows * ho * wo];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let dst = &mut out[(bi * rows + row) * ho * wo..(bi * rows + row + 1) * ho * wo];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, rows, ho * wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let grad = grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im {
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            channels: arg.dim(1)?,
            height: h,
            width: w,
        })?;
        Ok(Some(grad))
    }
}

/// Adjoint of [`Im2Col`]: scatter-add patches back onto the image grid.
struct Col2Im {
    kernel: usize,
    stride: usize,
    pad: usize,
    channels: usize,
    height: usize,
    width: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, rows, _) = layout.shape().dims3()?;
        let src = match layout.contiguous_offsets() {
            Some((start, end)) => &storage.as_slice::<f32>()?[start..end],
            None => candle_core::bail!("col2im expects a contiguous input"),
        };
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let (c, h, w) = (self.channels, self.height, self.width);
        let ho = out_extent(h, k, s, p);
        let wo = out_extent(w, k, s, p);
        let mut out = vec![0f32; b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let col = &src[(bi * rows + row) * ho * wo..(bi * rows + row + 1) * ho * wo];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    plane[iy as usize * w + ix as usize] += col[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, h, w))))
    }
}

/// Multi-head scaled dot-product attention.
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query: (B, Nq, d)`, `context: (B, Nk, d)`.
    pub fn forward(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, nq, d) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, nq, d))?;
        self.out.forward(&mixed)
    }
}

/// Sinusoidal embedding of scalar positions, `(N,) -> (N, dim)`.
pub fn sinusoidal_embedding(positions: &[f64], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        for i in 0..dim {
            let freq = (-(10_000f64.ln()) * (i % half) as f64 / half.max(1) as f64).exp();
            let v = if i < half { (pos * freq).sin() } else { (pos * freq).cos() };
            data.push(v as f32);
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), device)?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn to_f32(t: &Tensor) -> Result<Tensor> {
    Ok(t.to_dtype(DType::F32)?)
}
