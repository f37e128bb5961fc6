//! Symmetric product-of-experts sampling.
//!
//! Each expert denoises one field conditioned on clean estimates of the
//! others. Within a diffusion step all fields are refined together for `K`
//! Picard iterations (Jacobi style: every expert reads the state of the
//! previous iteration), then each field takes one ancestral step.
//!
//! Two variants of the Picard update are provided:
//!
//! * [`PicardMode::Literal`] relaxes the noisy iterate `z_t` towards the
//!   clean estimate, then steps with the noise implied by the final
//!   estimate.
//! * [`PicardMode::Renoise`] keeps `z_t` at its noise level and relaxes only
//!   the clean estimate used for cross-conditioning; the step uses the
//!   expert's own noise prediction.

use ndarray::{Array2, Array3, Axis, Zip};

use crate::ddpm::{ancestral_step, eps_from_z0, split_prediction, ParamKind};
use crate::grid::{FieldSet, GridSpec, SystemId};
use crate::schedule::NoiseSchedule;
use crate::seeds::{derive_seed, unit_noise};
use crate::{Error, Result};

const TAG_INIT: u64 = u64::MAX;

/// A conditional denoiser for one field.
///
/// `z_t` lives in the expert's normalized space with shape `(B, nt, nx)`.
/// The conditioning fields (all other fields, in field order) and the
/// initial conditions `(B, nx)` are passed in physical units.
pub trait Expert {
    fn field_index(&self) -> usize;
    fn param_kind(&self) -> ParamKind;
    fn schedule(&self) -> &NoiseSchedule;
    /// Grid the expert was trained on, if it has one.
    fn grid(&self) -> Option<GridSpec> {
        None
    }
    /// Raw prediction (noise or velocity, per [`Expert::param_kind`]).
    fn predict(&self, z_t: &Array3<f64>, t: usize, others: &[&Array3<f64>], ic: &Array2<f64>) -> Result<Array3<f64>>;
    /// Normalized clean field to physical units.
    fn to_physical(&self, z: &Array3<f64>) -> Array3<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PicardMode {
    Literal,
    Renoise,
}

#[derive(Debug, Clone)]
pub struct ComposeConfig {
    /// Picard iterations per diffusion step.
    pub picard_iters: usize,
    pub lambda: f64,
    pub seed: u64,
    pub mode: PicardMode,
    /// Batch, time and space extents of every field.
    pub shape: (usize, usize, usize),
    /// Per-field initial conditions `(B, nx)`, physical units. When given,
    /// they condition the experts and overwrite row 0 of the output.
    pub ics: Option<Vec<Array2<f64>>>,
    /// Ground-truth fields `(B, nt, nx)` used for cross-conditioning instead
    /// of the running estimates (teacher forcing).
    pub teacher: Option<Vec<Array3<f64>>>,
}

impl ComposeConfig {
    pub fn new(shape: (usize, usize, usize)) -> Self {
        ComposeConfig {
            picard_iters: 2,
            lambda: 0.2,
            seed: 0,
            mode: PicardMode::Literal,
            shape,
            ics: None,
            teacher: None,
        }
    }

    fn validate(&self, n_fields: usize) -> Result<()> {
        if self.picard_iters == 0 {
            return Err(Error::InvalidParameter("need at least one Picard iteration".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::InvalidParameter(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        let (b, nt, nx) = self.shape;
        if b == 0 || nt == 0 || nx == 0 {
            return Err(Error::InvalidParameter("empty sample shape".into()));
        }
        if let Some(ics) = &self.ics {
            if ics.len() != n_fields {
                return Err(Error::Incompatible(format!("{} ICs for {n_fields} fields", ics.len())));
            }
            for ic in ics {
                if ic.dim() != (b, nx) {
                    return Err(Error::shape(&[b, nx], ic.shape()));
                }
            }
        }
        if let Some(tf) = &self.teacher {
            if tf.len() != n_fields {
                return Err(Error::Incompatible(format!("{} teacher fields for {n_fields} fields", tf.len())));
            }
            for f in tf {
                if f.dim() != self.shape {
                    return Err(Error::shape(&[b, nt, nx], f.shape()));
                }
            }
        }
        Ok(())
    }
}

/// `z + lambda (z0_hat - z)`.
pub fn picard_update(z: &Array3<f64>, z0_hat: &Array3<f64>, lambda: f64) -> Result<Array3<f64>> {
    if z.dim() != z0_hat.dim() {
        return Err(Error::shape(z.shape(), z0_hat.shape()));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidParameter(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    Ok(Zip::from(z).and(z0_hat).map_collect(|&z, &h| z + lambda * (h - z)))
}

/// Unit noise for field `field` at step `t`.
pub fn field_noise(seed: u64, field: usize, t: u64, shape: (usize, usize, usize)) -> Array3<f64> {
    unit_noise(derive_seed(seed, &[field as u64, t]), shape)
}

/// Initial `z_T` for field `field`.
pub fn initial_noise(seed: u64, field: usize, shape: (usize, usize, usize)) -> Array3<f64> {
    field_noise(seed, field, TAG_INIT, shape)
}

fn check_experts(experts: &[&dyn Expert]) -> Result<()> {
    let first = experts.first().ok_or_else(|| Error::Empty("no experts".into()))?;
    for (k, e) in experts.iter().enumerate() {
        if e.field_index() != k {
            return Err(Error::Incompatible(format!(
                "experts must cover fields 0..{} exactly once",
                experts.len()
            )));
        }
        if e.schedule() != first.schedule() {
            return Err(Error::Incompatible("experts use different noise schedules".into()));
        }
        if e.grid() != first.grid() {
            return Err(Error::Incompatible("experts were trained on different grids".into()));
        }
    }
    Ok(())
}

fn check_finite(a: &Array3<f64>, field: usize, t: usize, k: usize) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("field {field} at diffusion step {t}, Picard iteration {k}")))
    }
}

/// Composes the experts into joint samples. Returns each field in physical
/// units, shape `(B, nt, nx)`, ordered by field index.
pub fn compose(experts: &[&dyn Expert], cfg: &ComposeConfig) -> Result<Vec<Array3<f64>>> {
    let mut experts = experts.to_vec();
    experts.sort_by_key(|e| e.field_index());
    check_experts(&experts)?;
    let n = experts.len();
    cfg.validate(n)?;
    if let Some(g) = experts[0].grid() {
        if (g.nt, g.nx) != (cfg.shape.1, cfg.shape.2) {
            return Err(Error::Incompatible(format!(
                "expert grid ({}, {}) does not match sample shape ({}, {})",
                g.nt, g.nx, cfg.shape.1, cfg.shape.2
            )));
        }
    }
    let sched = experts[0].schedule().clone();
    let steps = sched.steps();
    let zero_ic = Array2::zeros((cfg.shape.0, cfg.shape.2));
    let ic = |i: usize| cfg.ics.as_ref().map_or(&zero_ic, |v| &v[i]);

    let predict = |i: usize, z: &Array3<f64>, t: usize, cond: &[Array3<f64>]| -> Result<(Array3<f64>, Array3<f64>)> {
        let others: Vec<&Array3<f64>> = match &cfg.teacher {
            Some(tf) => (0..n).filter(|&j| j != i).map(|j| &tf[j]).collect(),
            None => (0..n).filter(|&j| j != i).map(|j| &cond[j]).collect(),
        };
        let raw = experts[i].predict(z, t, &others, ic(i))?;
        split_prediction(experts[i].param_kind(), z, &raw, &sched, t)
    };

    let mut z: Vec<Array3<f64>> = (0..n).map(|i| initial_noise(cfg.seed, i, cfg.shape)).collect();
    // clean estimates in normalized and physical units
    let zeros: Vec<Array3<f64>> = vec![Array3::zeros(cfg.shape); n];
    let mut est: Vec<Array3<f64>> = (0..n)
        .map(|i| predict(i, &z[i], steps, &zeros).map(|p| p.0))
        .collect::<Result<_>>()?;
    let mut phys: Vec<Array3<f64>> = (0..n).map(|i| experts[i].to_physical(&est[i])).collect();

    for t in (1..=steps).rev() {
        let mut eps: Vec<Array3<f64>> = Vec::with_capacity(n);
        let mut z0: Vec<Array3<f64>> = Vec::with_capacity(n);
        for k in 1..=cfg.picard_iters {
            let preds: Vec<(Array3<f64>, Array3<f64>)> =
                (0..n).map(|i| predict(i, &z[i], t, &phys)).collect::<Result<_>>()?;
            z0.clear();
            eps.clear();
            for (i, (h, e)) in preds.into_iter().enumerate() {
                check_finite(&h, i, t, k)?;
                match cfg.mode {
                    PicardMode::Literal => {
                        z[i] = picard_update(&z[i], &h, cfg.lambda)?;
                        est[i] = h.clone();
                    }
                    PicardMode::Renoise => {
                        est[i] = picard_update(&est[i], &h, cfg.lambda)?;
                    }
                }
                z0.push(h);
                eps.push(e);
            }
            phys = (0..n).map(|i| experts[i].to_physical(&est[i])).collect();
        }
        for i in 0..n {
            let e = match cfg.mode {
                PicardMode::Literal => eps_from_z0(&z[i], &z0[i], &sched, t)?,
                PicardMode::Renoise => std::mem::take(&mut eps[i]),
            };
            let tau = if t > 1 {
                field_noise(cfg.seed, i, t as u64, cfg.shape)
            } else {
                Array3::zeros(cfg.shape)
            };
            z[i] = ancestral_step(&z[i], &e, &tau, &sched, t)?;
            check_finite(&z[i], i, t, cfg.picard_iters)?;
        }
    }

    let mut out: Vec<Array3<f64>> = (0..n).map(|i| experts[i].to_physical(&z[i])).collect();
    if let Some(ics) = &cfg.ics {
        for (f, ic) in out.iter_mut().zip(ics) {
            f.index_axis_mut(Axis(1), 0).assign(ic);
        }
    }
    Ok(out)
}

/// Splits composed batch tensors into per-sample field sets.
pub fn to_field_sets(fields: &[Array3<f64>], grid: GridSpec, system: SystemId) -> Result<Vec<FieldSet>> {
    let first = fields.first().ok_or_else(|| Error::Empty("no fields".into()))?;
    (0..first.dim().0)
        .map(|b| {
            let trajs: Vec<Array2<f64>> = fields.iter().map(|f| f.index_axis(Axis(0), b).to_owned()).collect();
            let ics = trajs.iter().map(|f| f.row(0).to_owned()).collect();
            FieldSet::from_trajectories(grid, system, trajs, ics)
        })
        .collect()
}

/// Exact denoiser for a Gaussian conditional
/// `z | others ~ N(mean + kappa (c - mean), var)`, where `c` is the mean of
/// the conditioning fields. Useful as an analytic reference expert.
#[derive(Debug, Clone)]
pub struct GaussianExpert {
    pub field: usize,
    pub kind: ParamKind,
    pub mean: f64,
    pub var: f64,
    pub kappa: f64,
    pub schedule: NoiseSchedule,
}

impl GaussianExpert {
    /// Posterior mean `E[z0 | z_t]` given a conditional mean `m`.
    pub fn posterior_mean(&self, z_t: &Array3<f64>, m: &Array3<f64>, t: usize) -> Array3<f64> {
        let (a, s) = self.schedule.signal_noise(t);
        let gain = a * self.var / (a * a * self.var + s * s);
        Zip::from(z_t).and(m).map_collect(|&z, &m| m + gain * (z - a * m))
    }
}

impl Expert for GaussianExpert {
    fn field_index(&self) -> usize {
        self.field
    }

    fn param_kind(&self) -> ParamKind {
        self.kind
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict(&self, z_t: &Array3<f64>, t: usize, others: &[&Array3<f64>], _ic: &Array2<f64>) -> Result<Array3<f64>> {
        let m = if others.is_empty() {
            Array3::from_elem(z_t.dim(), self.mean)
        } else {
            let mut c = Array3::zeros(z_t.dim());
            for o in others {
                c += *o;
            }
            c /= others.len() as f64;
            c.mapv(|c| self.mean + self.kappa * (c - self.mean))
        };
        let z0 = self.posterior_mean(z_t, &m, t);
        let eps = eps_from_z0(z_t, &z0, &self.schedule, t)?;
        match self.kind {
            ParamKind::Epsilon => Ok(eps),
            ParamKind::V => crate::ddpm::v_target(&z0, &eps, &self.schedule, t),
        }
    }

    fn to_physical(&self, z: &Array3<f64>) -> Array3<f64> {
        z.clone()
    }
}
