//! Finite-difference ground truth for the two coupled systems.
//!
//! Reaction-diffusion (FitzHugh-Nagumo type), fields `(u, v)`:
//!
//! ```text
//! u_t = Du u_xx + a u - b u^3 - k - c_uv v
//! v_t = Dv v_xx + c_vu u - d v
//! ```
//!
//! Modified Burgers with a reactive scalar, fields `(c, v)`:
//!
//! ```text
//! v_t + (v^2 / 2)_x = nu v_xx - g c
//! c_t + v c_x       = Dc c_xx - kr c v
//! ```
//!
//! Space uses second-order central differences for diffusion, a Godunov flux
//! for the Burgers nonlinearity and first-order upwinding for scalar
//! transport. Time uses Heun's method (explicit RK2) with substeps sized by
//! the diffusive and advective stability bounds. The decoupled solver holds
//! one field to a prescribed trajectory, linearly interpolated in time.

use ndarray::{Array1, Array2, ArrayView1};

use crate::grid::{Boundary, Field, FieldSet, GridSpec, SystemId};
use crate::{Error, Result};

/// Safety factor applied to both stability bounds.
pub const CFL_SAFETY: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdCoeffs {
    pub du: f64,
    pub dv: f64,
    pub a: f64,
    pub b: f64,
    pub k: f64,
    pub c_uv: f64,
    pub c_vu: f64,
    pub d: f64,
}

impl Default for RdCoeffs {
    fn default() -> Self {
        RdCoeffs {
            du: 1e-3,
            dv: 5e-3,
            a: 1.0,
            b: 1.0,
            k: 5e-3,
            c_uv: 1.0,
            c_vu: 1.0,
            d: 1.0,
        }
    }
}

impl RdCoeffs {
    /// Pure diffusion: every reaction coefficient zeroed.
    pub fn without_reaction(self) -> Self {
        RdCoeffs {
            a: 0.0,
            b: 0.0,
            k: 0.0,
            c_uv: 0.0,
            c_vu: 0.0,
            d: 0.0,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurgersCoeffs {
    pub viscosity: f64,
    pub dc: f64,
    pub g: f64,
    pub kr: f64,
}

impl Default for BurgersCoeffs {
    fn default() -> Self {
        BurgersCoeffs {
            viscosity: 0.01 / std::f64::consts::PI,
            dc: 0.01,
            g: 0.5,
            kr: 1.0,
        }
    }
}

impl BurgersCoeffs {
    pub fn without_reaction(self) -> Self {
        BurgersCoeffs { g: 0.0, kr: 0.0, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dynamics {
    ReactionDiffusion(RdCoeffs),
    ModifiedBurgers(BurgersCoeffs),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    pub dynamics: Dynamics,
    pub grid: GridSpec,
}

impl SystemParams {
    /// Reference configuration: RD on 20 x 500, Burgers on 128 x 100.
    pub fn default_for(system: SystemId) -> Self {
        match system {
            SystemId::ReactionDiffusion => SystemParams {
                dynamics: Dynamics::ReactionDiffusion(RdCoeffs::default()),
                grid: GridSpec {
                    nx: 20,
                    nt: 500,
                    x_min: -1.0,
                    x_max: 1.0,
                    t_max: 5.0,
                    bc: Boundary::Periodic,
                },
            },
            SystemId::ModifiedBurgers => SystemParams {
                dynamics: Dynamics::ModifiedBurgers(BurgersCoeffs::default()),
                grid: GridSpec {
                    nx: 128,
                    nt: 100,
                    x_min: -1.0,
                    x_max: 1.0,
                    t_max: 1.0,
                    bc: Boundary::Periodic,
                },
            },
        }
    }

    pub fn with_resolution(mut self, nx: usize, nt: usize) -> Self {
        self.grid.nx = nx;
        self.grid.nt = nt;
        self
    }

    pub fn system(&self) -> SystemId {
        match self.dynamics {
            Dynamics::ReactionDiffusion(_) => SystemId::ReactionDiffusion,
            Dynamics::ModifiedBurgers(_) => SystemId::ModifiedBurgers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let diffusivities = self.diffusivities();
        if diffusivities.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "diffusivities must be positive, got {diffusivities:?}"
            )));
        }
        Ok(())
    }

    pub fn diffusivities(&self) -> [f64; 2] {
        match self.dynamics {
            Dynamics::ReactionDiffusion(c) => [c.du, c.dv],
            Dynamics::ModifiedBurgers(c) => [c.dc, c.viscosity],
        }
    }

    /// Largest stable substep for the given advecting speed.
    pub fn stable_dt(&self, max_speed: f64) -> f64 {
        let dx = self.grid.dx();
        let dmax = self.diffusivities().iter().cloned().fold(0.0, f64::max);
        let diffusive = CFL_SAFETY * dx * dx / (2.0 * dmax);
        if max_speed > 0.0 {
            diffusive.min(CFL_SAFETY * dx / max_speed)
        } else {
            diffusive
        }
    }

    fn stability_message(&self, max_speed: f64) -> String {
        let dx = self.grid.dx();
        let dmax = self.diffusivities().iter().cloned().fold(0.0, f64::max);
        format!(
            "diffusive bound dt <= {CFL_SAFETY}*dx^2/(2*D_max) = {:.3e}, advective bound dt <= {CFL_SAFETY}*dx/max|v| = {:.3e} (max|v| = {:.3e})",
            CFL_SAFETY * dx * dx / (2.0 * dmax),
            if max_speed > 0.0 { CFL_SAFETY * dx / max_speed } else { f64::INFINITY },
            max_speed
        )
    }
}

/// Extra temporal refinement on top of the stability-limited substep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolverOptions {
    pub refine: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { refine: 1 }
    }
}

fn laplacian(u: ArrayView1<f64>, dx: f64, bc: Boundary) -> Array1<f64> {
    let n = u.len();
    let inv = 1.0 / (dx * dx);
    let mut out = Array1::zeros(n);
    match bc {
        Boundary::Periodic => {
            for i in 0..n {
                let l = u[(i + n - 1) % n];
                let r = u[(i + 1) % n];
                out[i] = (l - 2.0 * u[i] + r) * inv;
            }
        }
        Boundary::Dirichlet => {
            for i in 1..n - 1 {
                out[i] = (u[i - 1] - 2.0 * u[i] + u[i + 1]) * inv;
            }
        }
    }
    out
}

/// Godunov flux for f(v) = v^2 / 2.
fn godunov_flux(vl: f64, vr: f64) -> f64 {
    let f = |v: f64| 0.5 * v * v;
    if vl <= vr {
        if vl <= 0.0 && vr >= 0.0 {
            0.0
        } else {
            f(vl).min(f(vr))
        }
    } else {
        f(vl).max(f(vr))
    }
}

/// `-(v^2/2)_x` in conservative form.
fn burgers_advection(v: ArrayView1<f64>, dx: f64, bc: Boundary) -> Array1<f64> {
    let n = v.len();
    let mut out = Array1::zeros(n);
    match bc {
        Boundary::Periodic => {
            // flux[i] sits at interface i + 1/2
            let flux: Vec<f64> = (0..n).map(|i| godunov_flux(v[i], v[(i + 1) % n])).collect();
            for i in 0..n {
                out[i] = -(flux[i] - flux[(i + n - 1) % n]) / dx;
            }
        }
        Boundary::Dirichlet => {
            let flux: Vec<f64> = (0..n - 1).map(|i| godunov_flux(v[i], v[i + 1])).collect();
            for i in 1..n - 1 {
                out[i] = -(flux[i] - flux[i - 1]) / dx;
            }
        }
    }
    out
}

/// `-v c_x` with first-order upwinding on the sign of `v`.
fn upwind_transport(c: ArrayView1<f64>, v: ArrayView1<f64>, dx: f64, bc: Boundary) -> Array1<f64> {
    let n = c.len();
    let mut out = Array1::zeros(n);
    let range = match bc {
        Boundary::Periodic => 0..n,
        Boundary::Dirichlet => 1..n - 1,
    };
    for i in range {
        let l = c[(i + n - 1) % n];
        let r = c[(i + 1) % n];
        let grad = if v[i] >= 0.0 { (c[i] - l) / dx } else { (r - c[i]) / dx };
        out[i] = -v[i] * grad;
    }
    out
}

/// Time derivative of field `idx` given its own state and the other field.
fn rhs_field(p: &SystemParams, idx: usize, own: ArrayView1<f64>, other: ArrayView1<f64>) -> Array1<f64> {
    let dx = p.grid.dx();
    let bc = p.grid.bc;
    let mut out = laplacian(own, dx, bc) * p.diffusivities()[idx];
    let interior = |i: usize| bc == Boundary::Periodic || (i > 0 && i + 1 < own.len());
    match (p.dynamics, idx) {
        (Dynamics::ReactionDiffusion(c), 0) => {
            for i in (0..own.len()).filter(|&i| interior(i)) {
                let u = own[i];
                out[i] += c.a * u - c.b * u * u * u - c.k - c.c_uv * other[i];
            }
        }
        (Dynamics::ReactionDiffusion(c), _) => {
            for i in (0..own.len()).filter(|&i| interior(i)) {
                out[i] += c.c_vu * other[i] - c.d * own[i];
            }
        }
        (Dynamics::ModifiedBurgers(c), 0) => {
            // own = c, other = v
            out += &upwind_transport(own, other, dx, bc);
            for i in (0..own.len()).filter(|&i| interior(i)) {
                out[i] -= c.kr * own[i] * other[i];
            }
        }
        (Dynamics::ModifiedBurgers(c), _) => {
            // own = v, other = c
            out += &burgers_advection(own, dx, bc);
            for i in (0..own.len()).filter(|&i| interior(i)) {
                out[i] -= c.g * other[i];
            }
        }
    }
    out
}

/// Speed that limits the advective substep.
fn advective_speed(p: &SystemParams, velocity: ArrayView1<f64>) -> f64 {
    match p.dynamics {
        Dynamics::ReactionDiffusion(_) => 0.0,
        Dynamics::ModifiedBurgers(_) => velocity.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

fn velocity_index(p: &SystemParams) -> Option<usize> {
    match p.dynamics {
        Dynamics::ReactionDiffusion(_) => None,
        Dynamics::ModifiedBurgers(_) => Some(1),
    }
}

fn check_ics(grid: &GridSpec, ics: &[Array1<f64>]) -> Result<()> {
    if ics.len() != 2 {
        return Err(Error::InvalidParameter(format!("expected 2 initial conditions, got {}", ics.len())));
    }
    for ic in ics {
        if ic.len() != grid.nx {
            return Err(Error::shape(&[grid.nx], &[ic.len()]));
        }
        if ic.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial condition".into()));
        }
    }
    Ok(())
}

fn substeps(p: &SystemParams, speed: f64, opts: &SolverOptions) -> usize {
    let dt_out = p.grid.dt();
    let n = (dt_out / p.stable_dt(speed)).ceil().max(1.0) as usize;
    n * opts.refine.max(1)
}

fn finite(a: &Array1<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn solve_coupled(p: &SystemParams, ics: &[Array1<f64>]) -> Result<FieldSet> {
    solve_coupled_with(p, ics, &SolverOptions::default())
}

pub fn solve_coupled_with(p: &SystemParams, ics: &[Array1<f64>], opts: &SolverOptions) -> Result<FieldSet> {
    p.validate()?;
    let g = p.grid;
    check_ics(&g, ics)?;
    let mut out = [Array2::zeros((g.nt, g.nx)), Array2::zeros((g.nt, g.nx))];
    let mut y = [ics[0].clone(), ics[1].clone()];
    out[0].row_mut(0).assign(&y[0]);
    out[1].row_mut(0).assign(&y[1]);
    let dt_out = g.dt();
    let rhs = |s: &[Array1<f64>; 2]| {
        [
            rhs_field(p, 0, s[0].view(), s[1].view()),
            rhs_field(p, 1, s[1].view(), s[0].view()),
        ]
    };
    for n in 1..g.nt {
        let speed = velocity_index(p).map_or(0.0, |vi| advective_speed(p, y[vi].view()));
        let m = substeps(p, speed, opts);
        let h = dt_out / m as f64;
        for _ in 0..m {
            let k1 = rhs(&y);
            let pred = [&y[0] + &(&k1[0] * h), &y[1] + &(&k1[1] * h)];
            let k2 = rhs(&pred);
            for f in 0..2 {
                y[f] = &y[f] + &((&k1[f] + &k2[f]) * (0.5 * h));
            }
        }
        if !finite(&y[0]) || !finite(&y[1]) {
            return Err(Error::Unstable {
                time: n as f64 * dt_out,
                bound: p.stability_message(speed),
            });
        }
        out[0].row_mut(n).assign(&y[0]);
        out[1].row_mut(n).assign(&y[1]);
    }
    let [a, b] = out;
    FieldSet::from_trajectories(g, p.system(), vec![a, b], ics.to_vec())
}

pub fn solve_decoupled(p: &SystemParams, solve_index: usize, frozen: &Field, ic: &Array1<f64>) -> Result<Field> {
    solve_decoupled_with(p, solve_index, frozen, ic, &SolverOptions::default())
}

pub fn solve_decoupled_with(
    p: &SystemParams,
    solve_index: usize,
    frozen: &Field,
    ic: &Array1<f64>,
    opts: &SolverOptions,
) -> Result<Field> {
    p.validate()?;
    let g = p.grid;
    if solve_index > 1 {
        return Err(Error::InvalidParameter(format!("field index {solve_index} out of range")));
    }
    if frozen.grid() != &g {
        return Err(Error::Incompatible("frozen field grid differs from system grid".into()));
    }
    check_ics(&g, &[ic.clone(), frozen.data().row(0).to_owned()])?;
    let other = frozen.data();
    let mut out = Array2::zeros((g.nt, g.nx));
    let mut y = ic.clone();
    out.row_mut(0).assign(&y);
    let dt_out = g.dt();
    for n in 1..g.nt {
        let (o0, o1) = (other.row(n - 1), other.row(n));
        let speed = match velocity_index(p) {
            Some(vi) if vi == solve_index => advective_speed(p, y.view()),
            Some(_) => advective_speed(p, o0).max(advective_speed(p, o1)),
            None => 0.0,
        };
        let m = substeps(p, speed, opts);
        let h = dt_out / m as f64;
        for j in 0..m {
            let w0 = j as f64 / m as f64;
            let w1 = (j + 1) as f64 / m as f64;
            let lerp = |w: f64| &o0 * (1.0 - w) + &o1 * w;
            let (a, b) = (lerp(w0), lerp(w1));
            let k1 = rhs_field(p, solve_index, y.view(), a.view());
            let pred = &y + &(&k1 * h);
            let k2 = rhs_field(p, solve_index, pred.view(), b.view());
            y = &y + &((&k1 + &k2) * (0.5 * h));
        }
        if !finite(&y) {
            return Err(Error::Unstable {
                time: n as f64 * dt_out,
                bound: p.stability_message(speed),
            });
        }
        out.row_mut(n).assign(&y);
    }
    let name = p.system().field_names()[solve_index];
    Field::new(g, out, name)
}
