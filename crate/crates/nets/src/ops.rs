//! Fused CPU kernels with hand-written backward passes for the hot spots of
//! training: patch extraction for 3x3 convolutions, softmax and group norm.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

fn contiguous<'a, T>(src: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&src[a..b]),
        None => candle_core::bail!("fused op needs a contiguous input"),
    }
}

macro_rules! dispatch {
    ($storage:expr, $layout:expr, $f:ident $(, $arg:expr)*) => {
        match $storage {
            CpuStorage::F32(s) => $f(contiguous(s, $layout)? $(, $arg)*),
            CpuStorage::F64(s) => $f(contiguous(s, $layout)? $(, $arg)*),
            _ => candle_core::bail!("fused ops support f32 and f64 only"),
        }
    };
}

/// Patch geometry of a zero-padded 3x3 window with stride 1 or 2.
#[derive(Debug, Clone, Copy)]
struct Patches {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
}

impl Patches {
    /// Column rows per batch element: nine taps per channel plus a row of
    /// ones that carries the bias through the matmul.
    fn rows(&self) -> usize {
        9 * self.c + 1
    }

    fn out_hw(&self) -> (usize, usize) {
        (self.h.div_ceil(self.stride), self.w.div_ceil(self.stride))
    }

    /// Calls `f(input_offset, column_offset, len)` for every run of
    /// in-bounds taps along a row; consecutive taps are `stride` apart in
    /// the input and adjacent in the columns.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let (h, w, s) = (self.h as isize, self.w as isize, self.stride as isize);
        for bi in 0..self.b {
            for tap in 0..9 {
                let (dy, dx) = ((tap / 3) as isize - 1, (tap % 3) as isize - 1);
                // output columns j with 0 <= j s + dx < w
                let j0 = if dx < 0 { 1 } else { 0 };
                let j1 = ((w - 1 - dx) / s + 1).min(wo as isize) as usize;
                if j1 <= j0 {
                    continue;
                }
                for ci in 0..self.c {
                    let src = (bi * self.c + ci) * self.h * self.w;
                    let dst = (bi * self.rows() + tap * self.c + ci) * ho * wo;
                    for i in 0..ho {
                        let y = i as isize * s + dy;
                        if y < 0 || y >= h {
                            continue;
                        }
                        let x0 = (j0 as isize * s + dx) as usize;
                        f(src + y as usize * self.w + x0, dst + i * wo + j0, j1 - j0);
                    }
                }
            }
        }
    }
}

struct Im2Col(Patches);
struct Col2Im(Patches);

fn im2col<T: WithDType>(x: &[T], p: Patches) -> candle_core::Result<(CpuStorage, Shape)> {
    let (ho, wo) = p.out_hw();
    let hw = ho * wo;
    let mut out = vec![T::zero(); p.b * p.rows() * hw];
    for bi in 0..p.b {
        let o = (bi * p.rows() + 9 * p.c) * hw;
        out[o..o + hw].fill(T::one());
    }
    if p.stride == 1 {
        p.for_each_run(|s, d, n| out[d..d + n].copy_from_slice(&x[s..s + n]));
    } else {
        p.for_each_run(|s, d, n| {
            for k in 0..n {
                out[d + k] = x[s + k * p.stride];
            }
        });
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((p.b, p.rows(), hw))))
}

fn col2im<T: WithDType>(g: &[T], p: Patches) -> candle_core::Result<(CpuStorage, Shape)> {
    let mut out = vec![T::zero(); p.b * p.c * p.h * p.w];
    if p.stride == 1 {
        p.for_each_run(|s, d, n| {
            for (o, &v) in out[s..s + n].iter_mut().zip(&g[d..d + n]) {
                *o += v;
            }
        });
    } else {
        p.for_each_run(|s, d, n| {
            for k in 0..n {
                out[s + k * p.stride] += g[d + k];
            }
        });
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((p.b, p.c, p.h, p.w))))
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, l, im2col, self.0)
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, l, col2im, self.0)
    }
}

/// Zero-padded 3x3 patches of `x (B, C, H, W)` as `(B, 9 C + 1, Ho Wo)`,
/// with rows ordered tap-major then channel, followed by a row of ones.
pub fn im2col3x3(x: &Tensor, stride: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if stride != 1 && stride != 2 {
        candle_core::bail!("stride must be 1 or 2, got {stride}");
    }
    x.contiguous()?.apply_op1(Im2Col(Patches { b, c, h, w, stride }))
}

struct Softmax;
struct SoftmaxGrad;

macro_rules! softmax_kernels {
    ($fwd:ident, $bwd:ident, $t:ty) => {
        fn $fwd(x: &[$t], n: usize) -> Vec<$t> {
            let mut out = vec![0.0; x.len()];
            for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
                let m = src.iter().copied().fold(<$t>::NEG_INFINITY, <$t>::max);
                let mut sum = 0.0;
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - m).exp();
                    sum += *d;
                }
                let inv = 1.0 / sum;
                dst.iter_mut().for_each(|d| *d *= inv);
            }
            out
        }

        /// `p (g - <g, p>)` row by row.
        fn $bwd(p: &[$t], g: &[$t], n: usize) -> Vec<$t> {
            let mut out = vec![0.0; p.len()];
            for ((pr, gr), dst) in p.chunks(n).zip(g.chunks(n)).zip(out.chunks_mut(n)) {
                let dot: $t = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &a), &b) in dst.iter_mut().zip(pr).zip(gr) {
                    *d = a * (b - dot);
                }
            }
            out
        }
    };
}

softmax_kernels!(softmax_f32, softmax_grad_f32, f32);
softmax_kernels!(softmax_f64, softmax_grad_f64, f64);

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *l.dims().last().unwrap_or(&1);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_f32(contiguous(v, l)?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_f64(contiguous(v, l)?, n)),
            _ => candle_core::bail!("fused ops support f32 and f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, p: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(p.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *l1.dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(p), CpuStorage::F32(g)) => {
                CpuStorage::F32(softmax_grad_f32(contiguous(p, l1)?, contiguous(g, l2)?, n))
            }
            (CpuStorage::F64(p), CpuStorage::F64(g)) => {
                CpuStorage::F64(softmax_grad_f64(contiguous(p, l1)?, contiguous(g, l2)?, n))
            }
            _ => candle_core::bail!("softmax gradient needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

/// `(1 + gamma) h + delta` with per-(batch, channel) `gamma`, `delta`.
struct FilmOp;

macro_rules! film_kernels {
    ($fwd:ident, $bwd:ident, $t:ty) => {
        fn $fwd(h: &[$t], g: &[$t], d: &[$t], hw: usize) -> Vec<$t> {
            let mut out = vec![0.0; h.len()];
            for (k, (src, dst)) in h.chunks(hw).zip(out.chunks_mut(hw)).enumerate() {
                let (a, b) = (1.0 + g[k], d[k]);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = a * v + b;
                }
            }
            out
        }

        fn $bwd(h: &[$t], g: &[$t], dy: &[$t], hw: usize) -> (Vec<$t>, Vec<$t>, Vec<$t>) {
            let mut dh = vec![0.0; h.len()];
            let mut dg = vec![0.0; g.len()];
            let mut dd = vec![0.0; g.len()];
            for k in 0..g.len() {
                let r = k * hw..(k + 1) * hw;
                let a = 1.0 + g[k];
                let (mut sg, mut sd) = (0.0, 0.0);
                for ((o, &v), &gy) in dh[r.clone()].iter_mut().zip(&h[r.clone()]).zip(&dy[r]) {
                    *o = a * gy;
                    sg += gy * v;
                    sd += gy;
                }
                dg[k] = sg;
                dd[k] = sd;
            }
            (dh, dg, dd)
        }
    };
}

film_kernels!(film_f32, film_grad_f32, f32);
film_kernels!(film_f64, film_grad_f64, f64);

impl CustomOp3 for FilmOp {
    fn name(&self) -> &'static str {
        "film"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        if l2.shape().elem_count() != b * c || l3.shape().elem_count() != b * c {
            candle_core::bail!("FiLM parameters do not match {b}x{c} features");
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(d)) => {
                CpuStorage::F32(film_f32(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(d, l3)?, h * w))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(d)) => {
                CpuStorage::F64(film_f64(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(d, l3)?, h * w))
            }
            _ => candle_core::bail!("FiLM needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        h: &Tensor,
        gamma: &Tensor,
        _delta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, hh, ww) = h.dims4()?;
        let hw = hh * ww;
        let dev = h.device();
        let (hs, _) = h.storage_and_layout();
        let (gs, _) = gamma.storage_and_layout();
        let (dys, _) = grad.storage_and_layout();
        macro_rules! run {
            ($v:ident, $k:ident) => {{
                let (
                    candle_core::Storage::Cpu(CpuStorage::$v(hv)),
                    candle_core::Storage::Cpu(CpuStorage::$v(gv)),
                    candle_core::Storage::Cpu(CpuStorage::$v(dyv)),
                ) = (&*hs, &*gs, &*dys)
                else {
                    candle_core::bail!("FiLM backward needs matching CPU inputs");
                };
                let (dh, dg, dd) = $k(
                    contiguous(hv, h.layout())?,
                    contiguous(gv, gamma.layout())?,
                    contiguous(dyv, grad.layout())?,
                    hw,
                );
                (
                    Tensor::from_vec(dh, h.dims(), dev)?,
                    Tensor::from_vec(dg, gamma.dims(), dev)?,
                    Tensor::from_vec(dd, gamma.dims(), dev)?,
                )
            }};
        }
        let (dh, dg, dd) = match h.dtype() {
            candle_core::DType::F32 => run!(F32, film_grad_f32),
            candle_core::DType::F64 => run!(F64, film_grad_f64),
            dt => candle_core::bail!("unsupported dtype {dt:?}"),
        };
        Ok((Some(dh), Some(dg), Some(dd)))
    }
}

/// `(1 + gamma) h + delta` for `h (B, C, H, W)` and `gamma`, `delta` `(B, C)`.
pub fn film(h: &Tensor, gamma: &Tensor, delta: &Tensor) -> candle_core::Result<Tensor> {
    h.contiguous()?
        .apply_op3(&gamma.contiguous()?, &delta.contiguous()?, FilmOp)
}

/// Group normalization of `(B, C, H, W)` with per-channel affine weights.
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

struct GnDims {
    b: usize,
    c: usize,
    hw: usize,
    g: usize,
}

impl GnDims {
    fn per_group(&self) -> usize {
        self.c / self.g * self.hw
    }
}

/// Per-(batch, group) mean and reciprocal standard deviation.
fn gn_stats<T: WithDType>(x: &[T], d: &GnDims, eps: f64) -> Vec<(f64, f64)> {
    x.chunks(d.per_group())
        .map(|s| {
            let n = s.len() as f64;
            let mean = s.iter().map(|v| v.to_f64()).sum::<f64>() / n;
            let var = s.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

fn gn_fwd<T: WithDType>(x: &[T], gamma: &[T], beta: &[T], d: &GnDims, eps: f64) -> Vec<T> {
    let stats = gn_stats(x, d, eps);
    let cg = d.c / d.g;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..d.b {
        for ci in 0..d.c {
            let (m, r) = stats[bi * d.g + ci / cg];
            let (ga, be) = (gamma[ci].to_f64(), beta[ci].to_f64());
            let off = (bi * d.c + ci) * d.hw;
            for k in off..off + d.hw {
                out[k] = T::from_f64((x[k].to_f64() - m) * r * ga + be);
            }
        }
    }
    out
}

/// Gradients with respect to input, scale and shift.
fn gn_bwd<T: WithDType>(x: &[T], gamma: &[T], g: &[T], d: &GnDims, eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let stats = gn_stats(x, d, eps);
    let cg = d.c / d.g;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0.0; d.c];
    let mut dbeta = vec![0.0; d.c];
    for bi in 0..d.b {
        for gi in 0..d.g {
            let (m, r) = stats[bi * d.g + gi];
            // sums over the group of dy = g * gamma and dy * xhat
            let (mut s1, mut s2) = (0.0, 0.0);
            for ci in gi * cg..(gi + 1) * cg {
                let ga = gamma[ci].to_f64();
                let off = (bi * d.c + ci) * d.hw;
                for k in off..off + d.hw {
                    let xh = (x[k].to_f64() - m) * r;
                    let gv = g[k].to_f64();
                    dgamma[ci] += gv * xh;
                    dbeta[ci] += gv;
                    s1 += gv * ga;
                    s2 += gv * ga * xh;
                }
            }
            let n = d.per_group() as f64;
            for ci in gi * cg..(gi + 1) * cg {
                let ga = gamma[ci].to_f64();
                let off = (bi * d.c + ci) * d.hw;
                for k in off..off + d.hw {
                    let xh = (x[k].to_f64() - m) * r;
                    let dy = g[k].to_f64() * ga;
                    dx[k] = T::from_f64(r * (dy - s1 / n - xh * s2 / n));
                }
            }
        }
    }
    let conv = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    (dx, conv(dgamma), conv(dbeta))
}

impl GroupNormOp {
    fn dims(&self, l: &Layout) -> candle_core::Result<GnDims> {
        let (b, c, h, w) = l.shape().dims4()?;
        if c % self.groups != 0 {
            candle_core::bail!("{c} channels do not split into {} groups", self.groups);
        }
        Ok(GnDims {
            b,
            c,
            hw: h * w,
            g: self.groups,
        })
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.dims(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(gn_fwd(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(b, l3)?,
                &d,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(gn_fwd(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(b, l3)?,
                &d,
                self.eps,
            )),
            _ => candle_core::bail!("group norm needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (xs, _) = x.storage_and_layout();
        let (gs, _) = gamma.storage_and_layout();
        let (dys, _) = grad.storage_and_layout();
        let d = self.dims(x.layout())?;
        let c = d.c;
        let dev = x.device();
        macro_rules! run {
            ($v:ident) => {{
                let (
                    candle_core::Storage::Cpu(CpuStorage::$v(xv)),
                    candle_core::Storage::Cpu(CpuStorage::$v(gv)),
                    candle_core::Storage::Cpu(CpuStorage::$v(dyv)),
                ) = (&*xs, &*gs, &*dys)
                else {
                    candle_core::bail!("group norm backward needs matching CPU inputs");
                };
                let (dx, dg, db) = gn_bwd(
                    contiguous(xv, x.layout())?,
                    contiguous(gv, gamma.layout())?,
                    contiguous(dyv, grad.layout())?,
                    &d,
                    self.eps,
                );
                (
                    Tensor::from_vec(dx, x.dims(), dev)?,
                    Tensor::from_vec(dg, c, dev)?,
                    Tensor::from_vec(db, c, dev)?,
                )
            }};
        }
        let (dx, dg, db) = match x.dtype() {
            candle_core::DType::F32 => run!(F32),
            candle_core::DType::F64 => run!(F64),
            dt => candle_core::bail!("unsupported dtype {dt:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(gamma, beta, GroupNormOp { groups, eps })
}
