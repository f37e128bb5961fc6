//! Closed-form DDPM algebra: forward noising, the ancestral reverse step,
//! v-parameterization targets and the identities that recover the noise and
//! the clean field from a prediction.
//!
//! Everything here is a pure function of caller-supplied tensors; no noise is
//! drawn inside. With `a = sqrt(alpha_bar_t)` and `s = sqrt(1 - alpha_bar_t)`:
//!
//! ```text
//! z_t  = a z0 + s eps
//! v    = a eps - s z0
//! eps  = s z_t + a v
//! z0   = a z_t - s v  = (z_t - s eps) / a
//! ```

use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Smallest signal scale used when dividing by `sqrt(alpha_bar_t)`.
pub const MIN_SIGNAL_SCALE: f64 = 1e-8;

/// What the denoiser network regresses onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Epsilon,
    V,
}

impl ParamKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamKind::Epsilon => "epsilon",
            ParamKind::V => "v",
        }
    }
}

impl std::str::FromStr for ParamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "eps" => Ok(ParamKind::Epsilon),
            "v" => Ok(ParamKind::V),
            other => Err(Error::InvalidParameter(format!("unknown parameterization '{other}'"))),
        }
    }
}

/// A noisy field at diffusion step `t` together with its frozen conditioning.
#[derive(Debug, Clone)]
pub struct DiffusionState<D: Dimension> {
    pub z_t: Array<f64, D>,
    pub t: usize,
    pub cond: Vec<Array<f64, D>>,
}

impl<D: Dimension> DiffusionState<D> {
    pub fn new(z_t: Array<f64, D>, t: usize, cond: Vec<Array<f64, D>>, schedule: &NoiseSchedule) -> Result<Self> {
        schedule.check_step(t)?;
        for c in &cond {
            same_shape(&z_t, c)?;
        }
        Ok(DiffusionState { z_t, t, cond })
    }
}

fn same_shape<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> Result<()> {
    if a.shape() != b.shape() {
        Err(Error::shape(a.shape(), b.shape()))
    } else {
        Ok(())
    }
}

/// `p * x + q * y`, elementwise.
fn lincomb<D: Dimension>(p: f64, x: &Array<f64, D>, q: f64, y: &Array<f64, D>) -> Result<Array<f64, D>> {
    same_shape(x, y)?;
    Ok(Zip::from(x).and(y).map_collect(|&x, &y| p * x + q * y))
}

pub fn forward_noise<D: Dimension>(
    z0: &Array<f64, D>,
    eps: &Array<f64, D>,
    s: &NoiseSchedule,
    t: usize,
) -> Result<Array<f64, D>> {
    s.check_step(t)?;
    let (a, sg) = s.signal_noise(t);
    lincomb(a, z0, sg, eps)
}

/// One reverse step `z_t -> z_{t-1}` given a noise estimate and fresh unit
/// noise `tau` (which is multiplied by `sigma_1 = 0` at the last step).
pub fn ancestral_step<D: Dimension>(
    z_t: &Array<f64, D>,
    eps_hat: &Array<f64, D>,
    tau: &Array<f64, D>,
    s: &NoiseSchedule,
    t: usize,
) -> Result<Array<f64, D>> {
    s.check_step(t)?;
    same_shape(z_t, eps_hat)?;
    same_shape(z_t, tau)?;
    let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
    let coef = (1.0 - s.alpha(t)) / (1.0 - s.alpha_bar(t)).sqrt();
    let sigma = s.sigma(t);
    Ok(Zip::from(z_t)
        .and(eps_hat)
        .and(tau)
        .map_collect(|&z, &e, &n| inv_sqrt_alpha * (z - coef * e) + sigma * n))
}

pub fn v_target<D: Dimension>(z0: &Array<f64, D>, eps: &Array<f64, D>, s: &NoiseSchedule, t: usize) -> Result<Array<f64, D>> {
    s.check_step(t)?;
    let (a, sg) = s.signal_noise(t);
    lincomb(a, eps, -sg, z0)
}

pub fn eps_from_v<D: Dimension>(z_t: &Array<f64, D>, v: &Array<f64, D>, s: &NoiseSchedule, t: usize) -> Result<Array<f64, D>> {
    s.check_step(t)?;
    let (a, sg) = s.signal_noise(t);
    lincomb(sg, z_t, a, v)
}

pub fn z0_from_v<D: Dimension>(z_t: &Array<f64, D>, v: &Array<f64, D>, s: &NoiseSchedule, t: usize) -> Result<Array<f64, D>> {
    s.check_step(t)?;
    let (a, sg) = s.signal_noise(t);
    lincomb(a, z_t, -sg, v)
}

/// Inverts the forward noising given a noise estimate. The boolean is set
/// when the signal scale had to be clamped at [`MIN_SIGNAL_SCALE`].
pub fn z0_from_eps<D: Dimension>(
    z_t: &Array<f64, D>,
    eps_hat: &Array<f64, D>,
    s: &NoiseSchedule,
    t: usize,
) -> Result<(Array<f64, D>, bool)> {
    s.check_step(t)?;
    let (a, sg) = s.signal_noise(t);
    let clamped = a < MIN_SIGNAL_SCALE;
    let a = a.max(MIN_SIGNAL_SCALE);
    same_shape(z_t, eps_hat)?;
    Ok((Zip::from(z_t).and(eps_hat).map_collect(|&z, &e| (z - sg * e) / a), clamped))
}

/// Noise implied by a clean-field estimate: `(z_t - a z0) / s`.
pub fn eps_from_z0<D: Dimension>(z_t: &Array<f64, D>, z0_hat: &Array<f64, D>, s: &NoiseSchedule, t: usize) -> Result<Array<f64, D>> {
    s.check_step(t)?;
    let (a, sg) = s.signal_noise(t);
    lincomb(1.0 / sg, z_t, -a / sg, z0_hat)
}

pub fn training_target<D: Dimension>(
    kind: ParamKind,
    z0: &Array<f64, D>,
    eps: &Array<f64, D>,
    s: &NoiseSchedule,
    t: usize,
) -> Result<Array<f64, D>> {
    match kind {
        ParamKind::Epsilon => {
            s.check_step(t)?;
            same_shape(z0, eps)?;
            Ok(eps.clone())
        }
        ParamKind::V => v_target(z0, eps, s, t),
    }
}

/// Converts a raw network prediction into `(z0_hat, eps_hat)`.
pub fn split_prediction<D: Dimension>(
    kind: ParamKind,
    z_t: &Array<f64, D>,
    raw: &Array<f64, D>,
    s: &NoiseSchedule,
    t: usize,
) -> Result<(Array<f64, D>, Array<f64, D>)> {
    match kind {
        ParamKind::Epsilon => {
            let (z0, _) = z0_from_eps(z_t, raw, s, t)?;
            Ok((z0, raw.clone()))
        }
        ParamKind::V => Ok((z0_from_v(z_t, raw, s, t)?, eps_from_v(z_t, raw, s, t)?)),
    }
}
