//! Building blocks: im2col convolutions, linear maps, group norm, FiLM,
//! residual blocks and spatial self-attention.
//!
//! Activations are `(B, C, H, W)`. Convolution weights are stored as
//! `(C_out, 9 C_in)` matrices so that a 3x3 convolution is one batched matmul
//! against the 3x3 patches of the input. Weights are materialized per batch
//! element before the matmul: the CPU backend mishandles zero-stride batch
//! dimensions.

use candle_core::Tensor;

use crate::params::ParamStore;
use crate::Result;

pub struct Conv3 {
    w: Tensor,
    b: Tensor,
    stride: usize,
}

impl Conv3 {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((9 * cin) as f64).sqrt();
        Ok(Conv3 {
            w: ps.uniform(&format!("{name}.w"), &[cout, 9 * cin], bound)?,
            b: ps.uniform(&format!("{name}.b"), &[cout, 1], bound)?,
            stride,
        })
    }

    pub fn zeroed(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Conv3 {
            w: ps.constant(&format!("{name}.w"), &[cout, 9 * cin], 0.0)?,
            b: ps.constant(&format!("{name}.b"), &[cout, 1], 0.0)?,
            stride: 1,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let (ho, wo) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let col = crate::ops::im2col3x3(x, self.stride)?;
        let wb = Tensor::cat(&[&self.w, &self.b], 1)?;
        let y = wb.broadcast_left(b)?.contiguous()?.matmul(&col)?;
        Ok(y.reshape((b, self.w.dim(0)?, ho, wo))?)
    }
}

/// Pointwise (1x1) convolution.
pub struct Conv1 {
    w: Tensor,
    b: Tensor,
}

impl Conv1 {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let bound = 1.0 / (cin as f64).sqrt();
        Ok(Conv1 {
            w: ps.uniform(&format!("{name}.w"), &[cout, cin], bound)?,
            b: ps.uniform(&format!("{name}.b"), &[cout, 1], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let y = self
            .w
            .broadcast_left(b)?
            .contiguous()?
            .matmul(&x.reshape((b, c, h * w))?)?
            .broadcast_add(&self.b)?;
        Ok(y.reshape((b, self.w.dim(0)?, h, w))?)
    }
}

pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Linear {
            w: ps.uniform(&format!("{name}.w"), &[din, dout], bound)?,
            b: ps.uniform(&format!("{name}.b"), &[dout], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.broadcast_add(&self.b)?)
    }
}

/// Largest group count from {8, 4, 2, 1} dividing `c` with at least two
/// channels per group.
pub fn num_groups(c: usize) -> usize {
    [8, 4, 2].into_iter().find(|&g| c % g == 0 && c / g >= 2).unwrap_or(1)
}

pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(GroupNorm {
            gamma: ps.constant(&format!("{name}.gamma"), &[c], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[c], 0.0)?,
            groups: num_groups(c),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::ops::group_norm(x, &self.gamma, &self.beta, self.groups, 1e-5)?)
    }
}

/// `(1 + gamma) h + delta` with `gamma`, `delta` of shape `(B, C)`.
pub fn film_apply(h: &Tensor, gamma: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = h.dims4()?;
    if gamma.dims() != [b, c] || delta.dims() != [b, c] {
        return Err(crate::Error::Config(format!(
            "FiLM parameters {:?}/{:?} do not match features with {c} channels",
            gamma.dims(),
            delta.dims()
        )));
    }
    Ok(crate::ops::film(h, gamma, delta)?)
}

/// Maps the step embedding to per-channel scale and shift.
pub struct Film {
    proj: Linear,
    channels: usize,
}

impl Film {
    pub fn new(ps: &mut ParamStore, name: &str, emb_dim: usize, channels: usize) -> Result<Self> {
        Ok(Film {
            proj: Linear::new(ps, name, emb_dim, 2 * channels)?,
            channels,
        })
    }

    pub fn forward(&self, h: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let gd = self.proj.forward(&emb.silu()?)?;
        let gamma = gd.narrow(1, 0, self.channels)?;
        let delta = gd.narrow(1, self.channels, self.channels)?;
        film_apply(h, &gamma, &delta)
    }
}

pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3,
    film: Film,
    norm2: GroupNorm,
    conv2: Conv3,
    skip: Option<Conv1>,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, emb_dim: usize) -> Result<Self> {
        Ok(ResBlock {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin)?,
            conv1: Conv3::new(ps, &format!("{name}.conv1"), cin, cout, 1)?,
            film: Film::new(ps, &format!("{name}.film"), emb_dim, cout)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout)?,
            conv2: Conv3::new(ps, &format!("{name}.conv2"), cout, cout, 1)?,
            skip: if cin != cout {
                Some(Conv1::new(ps, &format!("{name}.skip"), cin, cout)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.film.forward(&h, emb)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

/// Single-head self-attention over all spatial positions, pre-norm, residual.
pub struct Attention {
    norm: GroupNorm,
    qkv: Conv1,
    proj: Conv1,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Attention {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c)?,
            qkv: Conv1::new(ps, &format!("{name}.qkv"), c, 3 * c)?,
            proj: Conv1::new(ps, &format!("{name}.proj"), c, c)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((b, 3 * c, h * w))?;
        let q = (qkv.narrow(1, 0, c)?.transpose(1, 2)? / (c as f64).sqrt())?;
        let k = qkv.narrow(1, c, c)?;
        let v = qkv.narrow(1, 2 * c, c)?.transpose(1, 2)?;
        let attn = crate::ops::softmax_last(&q.contiguous()?.matmul(&k.contiguous()?)?)?;
        // (B, N, N) x (B, N, C) -> (B, N, C)
        let out = attn.matmul(&v.contiguous()?)?.transpose(1, 2)?.contiguous()?;
        let out = self.proj.forward(&out.reshape((b, c, h, w))?)?;
        Ok((x + out)?)
    }
}

/// Sinusoidal embedding of a step index: interleaved pairs
/// `(sin(t w_j), cos(t w_j))` with `w_j = 10000^(-2j/dim)`.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(crate::Error::Config(format!("embedding dimension must be even and positive, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * j as f64 / dim as f64);
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    Ok(out)
}

/// Reflect-pads the two trailing dimensions on the high side only.
pub fn reflect_pad_hw(x: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    let mut x = x.clone();
    for (dim, p) in [(2usize, ph), (3usize, pw)] {
        if p == 0 {
            continue;
        }
        let n = x.dim(dim)?;
        if p >= n {
            return Err(crate::Error::Config(format!("cannot reflect-pad {p} onto extent {n}")));
        }
        let idx: Vec<u32> = (0..n).chain((0..p).map(|k| n - 2 - k)).map(|i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), x.device())?;
        x = x.index_select(&idx, dim)?;
    }
    Ok(x)
}
