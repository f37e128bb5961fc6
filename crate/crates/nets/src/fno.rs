//! Two-dimensional Fourier neural operator over the space-time grid.
//!
//! The spectral convolution is written with explicit DFT matrices so that it
//! is differentiable with plain matmuls. Along `x` the transform is real
//! (the lowest `modes_x` frequencies of an rfft); along `t` the lowest and
//! highest `modes_t` frequencies are kept. Retained modes are mixed by a
//! learned complex `(in, out)` matrix per mode; the rest are zeroed.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::layers::Conv1;
use crate::params::ParamStore;
use crate::{Error, Result};

/// Kept temporal frequencies: `0..m` and `n-m..n`, or all of them.
fn kept_t_modes(n: usize, m: usize) -> Vec<usize> {
    if 2 * m >= n {
        (0..n).collect()
    } else {
        (0..m).chain(n - m..n).collect()
    }
}

fn matrix(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
    Ok(Tensor::from_vec(v, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

/// DFT matrices for one grid shape.
struct Basis {
    kt: usize,
    /// `(nx, mx)`: `cos(2 pi k n / nx)` and `sin(...)`.
    cx: Tensor,
    sx: Tensor,
    /// `(kt, nt)` forward and `(nt, kt)` inverse along t.
    ct: Tensor,
    st: Tensor,
    ct_inv: Tensor,
    st_inv: Tensor,
    /// `(mx, nx)` inverse real transform with Hermitian weights and `1/nx`.
    icx: Tensor,
    isx: Tensor,
}

impl Basis {
    fn new(nt: usize, nx: usize, mt: usize, mx: usize, dtype: DType) -> Result<Self> {
        let ks = kept_t_modes(nt, mt);
        let kt = ks.len();
        let ang_x = |n: usize, k: usize| 2.0 * PI * ((k * n) % nx) as f64 / nx as f64;
        let ang_t = |k: usize, n: usize| 2.0 * PI * ((ks[k] * n) % nt) as f64 / nt as f64;
        let weight = |k: usize| if k == 0 || 2 * k == nx { 1.0 } else { 2.0 };
        Ok(Basis {
            kt,
            cx: matrix(nx, mx, |n, k| ang_x(n, k).cos(), dtype)?,
            sx: matrix(nx, mx, |n, k| ang_x(n, k).sin(), dtype)?,
            ct: matrix(kt, nt, |k, n| ang_t(k, n).cos(), dtype)?,
            st: matrix(kt, nt, |k, n| ang_t(k, n).sin(), dtype)?,
            ct_inv: matrix(nt, kt, |n, k| ang_t(k, n).cos() / nt as f64, dtype)?,
            st_inv: matrix(nt, kt, |n, k| ang_t(k, n).sin() / nt as f64, dtype)?,
            icx: matrix(mx, nx, |k, n| weight(k) * ang_x(n, k).cos() / nx as f64, dtype)?,
            isx: matrix(mx, nx, |k, n| weight(k) * ang_x(n, k).sin() / nx as f64, dtype)?,
        })
    }
}

/// `m (B, W, R, C)` right-multiplied by `a (C, C')`.
fn right_mul(m: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (b, w, r, c) = m.dims4()?;
    let y = m.contiguous()?.reshape((b * w * r, c))?.matmul(a)?;
    Ok(y.reshape((b, w, r, a.dim(1)?))?)
}

/// `m (B, W, R, C)` left-multiplied by `a (R', R)` along dim 2.
fn left_mul(a: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (b, w, r, c) = m.dims4()?;
    let flat = m.permute((2, 0, 1, 3))?.contiguous()?.reshape((r, b * w * c))?;
    let y = a.matmul(&flat)?.reshape((a.dim(0)?, b, w, c))?;
    Ok(y.permute((1, 2, 0, 3))?.contiguous()?)
}

pub struct SpectralConv2d {
    in_w: usize,
    out_w: usize,
    modes_t: usize,
    modes_x: usize,
    /// `(modes, in, out)` real and imaginary parts, modes ordered (k_t, k_x).
    wr: Tensor,
    wi: Tensor,
}

impl SpectralConv2d {
    pub fn new(ps: &mut ParamStore, name: &str, in_w: usize, out_w: usize, modes_t: usize, modes_x: usize) -> Result<Self> {
        if modes_t == 0 || modes_x == 0 {
            return Err(Error::Config("spectral layer needs at least one mode per axis".into()));
        }
        let bound = 1.0 / (in_w * out_w) as f64;
        let n = 2 * modes_t * modes_x;
        Ok(SpectralConv2d {
            in_w,
            out_w,
            modes_t,
            modes_x,
            wr: ps.uniform(&format!("{name}.wr"), &[n, in_w, out_w], bound)?,
            wi: ps.uniform(&format!("{name}.wi"), &[n, in_w, out_w], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, w, nt, nx) = x.dims4()?;
        if w != self.in_w {
            return Err(Error::Config(format!("spectral layer expects {} channels, got {w}", self.in_w)));
        }
        if self.modes_x > nx / 2 + 1 {
            return Err(Error::Config(format!("{} x-modes exceed nx/2+1 for nx = {nx}", self.modes_x)));
        }
        let mx = self.modes_x;
        let basis = Basis::new(nt, nx, self.modes_t, mx, x.dtype())?;
        let kt = basis.kt;
        // rfft along x: (B, W, nt, mx)
        let xr = right_mul(x, &basis.cx)?;
        let xi = right_mul(x, &basis.sx)?.neg()?;
        // DFT along t on the kept modes: (B, W, kt, mx)
        let yr = (left_mul(&basis.ct, &xr)? + left_mul(&basis.st, &xi)?)?;
        let yi = (left_mul(&basis.ct, &xi)? - left_mul(&basis.st, &xr)?)?;
        // per-mode complex mixing
        let modes = kt * mx;
        let to_modes = |y: &Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, w, modes))?.permute((2, 0, 1))?.contiguous()?)
        };
        let (yr, yi) = (to_modes(&yr)?, to_modes(&yi)?);
        let (wr, wi) = (self.weights_for(&self.wr, nt, kt)?, self.weights_for(&self.wi, nt, kt)?);
        let or = (yr.matmul(&wr)? - yi.matmul(&wi)?)?;
        let oi = (yr.matmul(&wi)? + yi.matmul(&wr)?)?;
        let from_modes = |o: &Tensor| -> Result<Tensor> {
            Ok(o.permute((1, 2, 0))?.reshape((b, self.out_w, kt, mx))?)
        };
        let (or, oi) = (from_modes(&or)?, from_modes(&oi)?);
        // inverse along t: (B, out, nt, mx)
        let zr = (left_mul(&basis.ct_inv, &or)? - left_mul(&basis.st_inv, &oi)?)?;
        let zi = (left_mul(&basis.ct_inv, &oi)? + left_mul(&basis.st_inv, &or)?)?;
        // inverse real transform along x
        Ok((right_mul(&zr, &basis.icx)? - right_mul(&zi, &basis.isx)?)?)
    }

    /// Selects the weight rows for the kept temporal modes. When every
    /// temporal mode is kept, modes beyond the stored `2 modes_t` reuse zeros.
    fn weights_for(&self, w: &Tensor, nt: usize, kt: usize) -> Result<Tensor> {
        let mx = self.modes_x;
        let stored = 2 * self.modes_t;
        if kt == stored {
            return Ok(w.clone());
        }
        // row index in storage for each kept temporal mode
        let ks = kept_t_modes(nt, self.modes_t);
        let mut rows: Vec<Tensor> = Vec::with_capacity(kt);
        let zero = Tensor::zeros((mx, self.in_w, self.out_w), w.dtype(), w.device())?;
        for &k in &ks {
            let slot = if k < self.modes_t {
                Some(k)
            } else if k + self.modes_t >= nt {
                Some(self.modes_t + (k + self.modes_t - nt))
            } else {
                None
            };
            rows.push(match slot {
                Some(s) if s < stored => w.narrow(0, s * mx, mx)?,
                _ => zero.clone(),
            });
        }
        Ok(Tensor::cat(&rows, 0)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnoConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub layers: usize,
    pub modes_t: usize,
    pub modes_x: usize,
    pub proj_width: usize,
}

impl FnoConfig {
    /// Width 32, four layers, 16 modes per axis, clamped to the grid.
    pub fn for_grid(nt: usize, nx: usize, in_channels: usize, out_channels: usize) -> Self {
        let requested = 16;
        let modes_x = requested.min(nx / 2);
        if modes_x < requested {
            log::warn!("clamping x-modes from {requested} to {modes_x} for nx = {nx}");
        }
        FnoConfig {
            in_channels,
            out_channels,
            width: 32,
            layers: 4,
            modes_t: requested.min(nt / 2).max(1),
            modes_x: modes_x.max(1),
            proj_width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 || self.layers == 0 {
            return Err(Error::Config("FNO dimensions must be positive".into()));
        }
        Ok(())
    }
}

pub struct Fno {
    cfg: FnoConfig,
    params: ParamStore,
    lift: Conv1,
    spectral: Vec<SpectralConv2d>,
    pointwise: Vec<Conv1>,
    proj1: Conv1,
    proj2: Conv1,
}

impl Fno {
    pub fn new(cfg: FnoConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let w = cfg.width;
        let lift = Conv1::new(&mut ps, "lift", cfg.in_channels, w)?;
        let mut spectral = Vec::new();
        let mut pointwise = Vec::new();
        for l in 0..cfg.layers {
            spectral.push(SpectralConv2d::new(&mut ps, &format!("spec{l}"), w, w, cfg.modes_t, cfg.modes_x)?);
            pointwise.push(Conv1::new(&mut ps, &format!("pw{l}"), w, w)?);
        }
        let proj1 = Conv1::new(&mut ps, "proj1", w, cfg.proj_width)?;
        let proj2 = Conv1::new(&mut ps, "proj2", cfg.proj_width, cfg.out_channels)?;
        Ok(Fno {
            cfg,
            params: ps,
            lift,
            spectral,
            pointwise,
            proj1,
            proj2,
        })
    }

    pub fn config(&self) -> &FnoConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `(B, in_channels, nt, nx)` to `(B, out_channels, nt, nx)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Config(format!("FNO expects {} channels, got {c}", self.cfg.in_channels)));
        }
        let mut h = self.lift.forward(&x.to_dtype(self.params.dtype())?)?;
        let last = self.cfg.layers - 1;
        for (l, (s, p)) in self.spectral.iter().zip(&self.pointwise).enumerate() {
            let y = (s.forward(&h)? + p.forward(&h)?)?;
            h = if l < last { y.gelu()? } else { y };
        }
        self.proj2.forward(&self.proj1.forward(&h)?.gelu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut r = compdiff_core::seeds::rng(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Full complex 2-D DFT, truncation, per-mode mixing, Hermitian
    /// completion and complex inverse, all by direct summation.
    fn oracle(layer: &SpectralConv2d, x: &Tensor) -> Vec<f64> {
        let (b, w, nt, nx) = x.dims4().unwrap();
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let wr: Vec<f64> = layer.wr.flatten_all().unwrap().to_vec1().unwrap();
        let wi: Vec<f64> = layer.wi.flatten_all().unwrap().to_vec1().unwrap();
        let (mt, mx, ow) = (layer.modes_t, layer.modes_x, layer.out_w);
        let ks = kept_t_modes(nt, mt);
        let e = |a: f64| Complex64::new(a.cos(), a.sin());
        let mut out = vec![0.0; b * ow * nt * nx];
        for n in 0..b {
            // spectrum of each input channel
            let mut spec = vec![vec![Complex64::new(0.0, 0.0); nt * nx]; w];
            for (c, s) in spec.iter_mut().enumerate() {
                for kt in 0..nt {
                    for kx in 0..nx {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for t in 0..nt {
                            for xx in 0..nx {
                                let v = xv[((n * w + c) * nt + t) * nx + xx];
                                let ang = -2.0 * PI * (kt as f64 * t as f64 / nt as f64 + kx as f64 * xx as f64 / nx as f64);
                                acc += v * e(ang);
                            }
                        }
                        s[kt * nx + kx] = acc;
                    }
                }
            }
            for o in 0..ow {
                let mut f = vec![Complex64::new(0.0, 0.0); nt * nx];
                for (slot, &kt) in ks.iter().enumerate() {
                    for kx in 0..mx {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for c in 0..w {
                            let wi_ = ((slot * mx + kx) * w + c) * ow + o;
                            acc += spec[c][kt * nx + kx] * Complex64::new(wr[wi_], wi[wi_]);
                        }
                        f[kt * nx + kx] = acc;
                    }
                }
                // Hermitian completion of the negative x-frequencies
                for &kt in &ks {
                    for kx in 1..mx {
                        if 2 * kx == nx {
                            continue;
                        }
                        f[((nt - kt) % nt) * nx + (nx - kx)] = f[kt * nx + kx].conj();
                    }
                }
                for t in 0..nt {
                    for xx in 0..nx {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for kt in 0..nt {
                            for kx in 0..nx {
                                let ang = 2.0 * PI * (kt as f64 * t as f64 / nt as f64 + kx as f64 * xx as f64 / nx as f64);
                                acc += f[kt * nx + kx] * e(ang);
                            }
                        }
                        out[((n * ow + o) * nt + t) * nx + xx] = acc.re / (nt * nx) as f64;
                    }
                }
            }
        }
        out
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn matches_brute_force_dft_oracle() {
        for &(mt, mx) in &[(2usize, 3usize), (4, 5), (1, 1)] {
            let mut ps = ParamStore::new(DType::F64, 7);
            let layer = SpectralConv2d::new(&mut ps, "s", 2, 3, mt, mx).unwrap();
            let x = randn(&[2, 2, 8, 8], 11);
            let got: Vec<f64> = layer.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let want = oracle(&layer, &x);
            assert!(max_diff(&got, &want) < 1e-6, "modes ({mt}, {mx}): {}", max_diff(&got, &want));
        }
    }

    #[test]
    fn is_linear() {
        let mut ps = ParamStore::new(DType::F64, 2);
        let layer = SpectralConv2d::new(&mut ps, "s", 3, 3, 2, 3).unwrap();
        let (x, y) = (randn(&[1, 3, 8, 8], 1), randn(&[1, 3, 8, 8], 2));
        let (a, b) = (0.7, -1.9);
        let lhs = layer.forward(&((&x * a).unwrap() + (&y * b).unwrap()).unwrap()).unwrap();
        let rhs = ((layer.forward(&x).unwrap() * a).unwrap() + (layer.forward(&y).unwrap() * b).unwrap()).unwrap();
        let d = max_diff(&lhs.flatten_all().unwrap().to_vec1().unwrap(), &rhs.flatten_all().unwrap().to_vec1().unwrap());
        assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn filters_out_high_frequencies() {
        // a pure high x-frequency input is annihilated
        let mut ps = ParamStore::new(DType::F64, 2);
        let layer = SpectralConv2d::new(&mut ps, "s", 1, 1, 4, 2).unwrap();
        let v: Vec<f64> = (0..64).map(|i| (2.0 * PI * 3.0 * (i % 8) as f64 / 8.0).cos()).collect();
        let x = Tensor::from_vec(v, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let y: Vec<f64> = layer.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn projection_is_idempotent_with_identity_weights() {
        // identity mixing projects onto the kept modes; applying twice changes
        // nothing. The kept temporal band is not symmetric under k -> -k, so
        // the x-mean (where the real part mixes k and -k) is removed first.
        let mut ps = ParamStore::new(DType::F64, 2);
        let layer = SpectralConv2d::new(&mut ps, "s", 1, 1, 2, 3).unwrap();
        let n = layer.wr.elem_count();
        let one = Tensor::ones(n, DType::F64, &Device::Cpu).unwrap().reshape(layer.wr.dims()).unwrap();
        ps.get("s.wr").unwrap().set(&one).unwrap();
        ps.get("s.wi").unwrap().set(&one.zeros_like().unwrap()).unwrap();
        let x = randn(&[1, 1, 8, 8], 3);
        let x = x.broadcast_sub(&x.mean_keepdim(3).unwrap()).unwrap();
        let p1 = layer.forward(&x).unwrap();
        let p2 = layer.forward(&p1).unwrap();
        let d = max_diff(&p1.flatten_all().unwrap().to_vec1().unwrap(), &p2.flatten_all().unwrap().to_vec1().unwrap());
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn full_retention_reproduces_input() {
        let mut ps = ParamStore::new(DType::F64, 2);
        let layer = SpectralConv2d::new(&mut ps, "s", 1, 1, 4, 5).unwrap();
        let one = Tensor::ones(layer.wr.dims(), DType::F64, &Device::Cpu).unwrap();
        ps.get("s.wr").unwrap().set(&one).unwrap();
        ps.get("s.wi").unwrap().set(&one.zeros_like().unwrap()).unwrap();
        let x = randn(&[1, 1, 8, 8], 4);
        let y = layer.forward(&x).unwrap();
        let d = max_diff(&x.flatten_all().unwrap().to_vec1().unwrap(), &y.flatten_all().unwrap().to_vec1().unwrap());
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn fno_shapes_and_mode_clamping() {
        let cfg = FnoConfig::for_grid(64, 20, 4, 2);
        assert_eq!(cfg.modes_x, 10);
        assert_eq!(cfg.modes_t, 16);
        let small = FnoConfig {
            width: 4,
            layers: 2,
            modes_t: 2,
            modes_x: 2,
            proj_width: 8,
            ..cfg
        };
        let net = Fno::new(small, DType::F32, 0).unwrap();
        let x = Tensor::zeros((3, 4, 8, 12), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(net.forward(&x).unwrap().dims(), &[3, 2, 8, 12]);
    }
}
