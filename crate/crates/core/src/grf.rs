//! Gaussian random fields with squared-exponential covariance, sampled by
//! circulant embedding.
//!
//! On a periodic axis the covariance is the periodically wrapped kernel, so
//! the circulant matrix is the exact covariance of the grid values. On a
//! non-periodic axis (time, or a Dirichlet space axis) the grid is embedded
//! in a longer periodic domain, padded far enough that wrap-around
//! correlations are below double precision.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::grid::{Boundary, GridSpec};
use crate::seeds;
use crate::{Error, Result};

/// Padding, in correlation lengths, added when embedding a non-periodic axis.
const EMBED_PAD_LENGTHS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfParams {
    pub length_scale_x: f64,
    pub length_scale_t: f64,
    pub amplitude: f64,
    pub seed: u64,
}

impl GrfParams {
    /// Defaults scaled to the grid: 20% of the domain in space and time.
    pub fn default_for(grid: &GridSpec) -> Self {
        GrfParams {
            length_scale_x: 0.2 * grid.length(),
            length_scale_t: 0.2 * grid.t_max,
            amplitude: 0.5,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        GrfParams { seed, ..self }
    }

    fn validate(&self) -> Result<()> {
        if !(self.length_scale_x > 0.0 && self.length_scale_t > 0.0) {
            return Err(Error::InvalidParameter("GRF length scales must be > 0".into()));
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::InvalidParameter("GRF amplitude must be > 0".into()));
        }
        Ok(())
    }
}

/// Squared-exponential kernel with unit amplitude.
fn kernel(r: f64, ell: f64) -> f64 {
    (-r * r / (2.0 * ell * ell)).exp()
}

/// First row of the circulant covariance of `m` points spaced `h` on a
/// periodic domain of length `m h`, with the kernel summed over images.
fn wrapped_row(m: usize, h: f64, ell: f64) -> Vec<f64> {
    let period = m as f64 * h;
    let images = (1.0 + 10.0 * ell / period).ceil() as i64;
    (0..m)
        .map(|j| {
            let d = j as f64 * h;
            (-images..=images).map(|k| kernel(d + k as f64 * period, ell)).sum()
        })
        .collect()
}

/// Eigenvalues of a symmetric circulant matrix given its first row.
fn circulant_eigenvalues(row: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex64> = row.iter().map(|&c| Complex64::new(c, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    // round-off can leave tiny negative values
    buf.iter().map(|c| c.re.max(0.0)).collect()
}

/// One axis of the embedding: number of embedded points and circulant spectrum.
struct AxisEmbedding {
    m: usize,
    eig: Vec<f64>,
}

fn embed_axis(n: usize, h: f64, ell: f64, periodic: bool) -> AxisEmbedding {
    let m = if periodic {
        n
    } else {
        n + (EMBED_PAD_LENGTHS * ell / h).ceil() as usize
    };
    let eig = circulant_eigenvalues(&wrapped_row(m, h, ell));
    AxisEmbedding { m, eig }
}

fn complex_noise(seed: u64, len: usize) -> Vec<Complex64> {
    let mut rng = seeds::rng(seed);
    (0..len)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im)
        })
        .collect()
}

fn check_resolution(ell: f64, h: f64, axis: &str) -> Result<()> {
    if ell < 2.0 * h {
        Err(Error::InvalidParameter(format!(
            "{axis} correlation length {ell} is below twice the grid spacing {h}"
        )))
    } else {
        Ok(())
    }
}

/// Smooth window vanishing at both ends of a Dirichlet axis.
fn dirichlet_taper(n: usize) -> Array1<f64> {
    Array1::from_iter((0..n).map(|i| (std::f64::consts::PI * i as f64 / (n - 1) as f64).sin()))
}

/// Zero-mean stationary sample over the spatial grid.
pub fn grf_sample_1d(grid: &GridSpec, p: &GrfParams) -> Result<Array1<f64>> {
    grid.validate()?;
    p.validate()?;
    let h = grid.dx();
    check_resolution(p.length_scale_x, h, "spatial")?;
    let periodic = grid.bc == Boundary::Periodic;
    let ax = embed_axis(grid.nx, h, p.length_scale_x, periodic);
    let mut buf = complex_noise(p.seed, ax.m);
    for (b, &l) in buf.iter_mut().zip(&ax.eig) {
        *b *= (l / ax.m as f64).sqrt();
    }
    FftPlanner::new().plan_fft_forward(ax.m).process(&mut buf);
    let mut out = Array1::from_iter(buf[..grid.nx].iter().map(|c| c.re));
    if !periodic {
        out *= &dirichlet_taper(grid.nx);
    }
    Ok(out * p.amplitude)
}

/// Sample over the full space-time grid with separable covariance
/// `k_t(dt) k_x(dx)`. Shape `(nt, nx)`.
pub fn grf_sample_2d(grid: &GridSpec, p: &GrfParams) -> Result<Array2<f64>> {
    grid.validate()?;
    p.validate()?;
    let hx = grid.dx();
    let ht = grid.dt();
    check_resolution(p.length_scale_x, hx, "spatial")?;
    check_resolution(p.length_scale_t, ht, "temporal")?;
    let periodic = grid.bc == Boundary::Periodic;
    let ax = embed_axis(grid.nx, hx, p.length_scale_x, periodic);
    let at = embed_axis(grid.nt, ht, p.length_scale_t, false);
    let (mt, mx) = (at.m, ax.m);
    let mut buf = complex_noise(p.seed, mt * mx);
    let norm = (mt * mx) as f64;
    for it in 0..mt {
        for ix in 0..mx {
            buf[it * mx + ix] *= (at.eig[it] * ax.eig[ix] / norm).sqrt();
        }
    }
    let mut planner = FftPlanner::new();
    let fx = planner.plan_fft_forward(mx);
    for row in buf.chunks_exact_mut(mx) {
        fx.process(row);
    }
    let ft = planner.plan_fft_forward(mt);
    let mut col = vec![Complex64::new(0.0, 0.0); mt];
    let mut out = Array2::zeros((grid.nt, grid.nx));
    for ix in 0..grid.nx {
        for it in 0..mt {
            col[it] = buf[it * mx + ix];
        }
        ft.process(&mut col);
        for it in 0..grid.nt {
            out[[it, ix]] = col[it].re;
        }
    }
    if !periodic {
        let w = dirichlet_taper(grid.nx);
        for mut row in out.rows_mut() {
            row *= &w;
        }
    }
    Ok(out * p.amplitude)
}
