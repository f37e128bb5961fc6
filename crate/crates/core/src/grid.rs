//! Space-time grids and the field types every other module passes around.
//!
//! All field tensors are time-major: `data[[it, ix]]` is the value at physical
//! time index `it` and spatial index `ix`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Dirichlet,
}

impl Boundary {
    pub fn as_str(&self) -> &'static str {
        match self {
            Boundary::Periodic => "periodic",
            Boundary::Dirichlet => "dirichlet",
        }
    }
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodic" => Ok(Boundary::Periodic),
            "dirichlet" => Ok(Boundary::Dirichlet),
            other => Err(Error::InvalidParameter(format!("unknown boundary '{other}'"))),
        }
    }
}

/// The two built-in coupled systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SystemId {
    ReactionDiffusion,
    ModifiedBurgers,
}

impl SystemId {
    pub fn field_names(&self) -> [&'static str; 2] {
        match self {
            SystemId::ReactionDiffusion => ["u", "v"],
            SystemId::ModifiedBurgers => ["c", "v"],
        }
    }

    pub fn n_fields(&self) -> usize {
        2
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SystemId::ReactionDiffusion => "rd",
            SystemId::ModifiedBurgers => "burgers",
        }
    }
}

impl std::str::FromStr for SystemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rd" | "reaction-diffusion" => Ok(SystemId::ReactionDiffusion),
            "burgers" | "modified-burgers" => Ok(SystemId::ModifiedBurgers),
            other => Err(Error::InvalidParameter(format!("unknown system '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub nt: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub t_max: f64,
    pub bc: Boundary,
}

impl GridSpec {
    pub fn new(nx: usize, nt: usize, x_min: f64, x_max: f64, t_max: f64, bc: Boundary) -> Result<Self> {
        let g = GridSpec {
            nx,
            nt,
            x_min,
            x_max,
            t_max,
            bc,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 {
            return Err(Error::InvalidParameter(format!("nx = {} < 4", self.nx)));
        }
        if self.nt < 2 {
            return Err(Error::InvalidParameter(format!("nt = {} < 2", self.nt)));
        }
        if !(self.x_max > self.x_min) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "domain [{}, {}] is empty",
                self.x_min, self.x_max
            )));
        }
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return Err(Error::InvalidParameter(format!("t_max = {} must be > 0", self.t_max)));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn dx(&self) -> f64 {
        match self.bc {
            Boundary::Periodic => self.length() / self.nx as f64,
            Boundary::Dirichlet => self.length() / (self.nx - 1) as f64,
        }
    }

    /// Spacing of the stored (output) time grid.
    pub fn dt(&self) -> f64 {
        self.t_max / (self.nt - 1) as f64
    }

    pub fn x_coords(&self) -> Array1<f64> {
        let dx = self.dx();
        Array1::from_iter((0..self.nx).map(|i| self.x_min + i as f64 * dx))
    }

    pub fn t_coords(&self) -> Array1<f64> {
        let dt = self.dt();
        Array1::from_iter((0..self.nt).map(|i| i as f64 * dt))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nt, self.nx)
    }
}

/// One scalar field sampled on a space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    data: Array2<f64>,
    name: String,
}

impl Field {
    pub fn new(grid: GridSpec, data: Array2<f64>, name: impl Into<String>) -> Result<Self> {
        grid.validate()?;
        if data.dim() != grid.shape() {
            return Err(Error::shape(&[grid.nt, grid.nx], data.shape()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field data".into()));
        }
        Ok(Field {
            grid,
            data,
            name: name.into(),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }
}

/// Mean and population standard deviation of a set of values.
pub fn slice_stats<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<(f64, f64)> {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("statistics input".into()));
        }
        n += 1;
        let delta = v - mean;
        mean += delta / n as f64;
        m2 += delta * (v - mean);
    }
    if n == 0 {
        return Err(Error::Empty("statistics input".into()));
    }
    Ok((mean, (m2 / n as f64).max(0.0).sqrt()))
}

pub fn field_stats(f: &Field) -> Result<(f64, f64)> {
    slice_stats(f.data.iter())
}

/// The N coupled fields of one sample plus their initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    fields: Vec<Field>,
    ics: Vec<Array1<f64>>,
    system: SystemId,
}

impl FieldSet {
    pub fn new(fields: Vec<Field>, ics: Vec<Array1<f64>>, system: SystemId) -> Result<Self> {
        if fields.len() != system.n_fields() || ics.len() != fields.len() {
            return Err(Error::InvalidParameter(format!(
                "{:?} needs {} fields and ics, got {} and {}",
                system,
                system.n_fields(),
                fields.len(),
                ics.len()
            )));
        }
        let grid = *fields[0].grid();
        for (f, ic) in fields.iter().zip(&ics) {
            if *f.grid() != grid {
                return Err(Error::Incompatible("fields do not share one grid".into()));
            }
            if ic.len() != grid.nx {
                return Err(Error::shape(&[grid.nx], &[ic.len()]));
            }
            if f.data().row(0) != ic.view() {
                return Err(Error::InvalidParameter(format!(
                    "row 0 of field '{}' differs from its initial condition",
                    f.name()
                )));
            }
        }
        Ok(FieldSet { fields, ics, system })
    }

    /// Builds a field set from trajectories, overwriting row 0 with the ICs.
    pub fn from_trajectories(
        grid: GridSpec,
        system: SystemId,
        mut data: Vec<Array2<f64>>,
        ics: Vec<Array1<f64>>,
    ) -> Result<Self> {
        if data.len() != ics.len() {
            return Err(Error::InvalidParameter("trajectory/ic count mismatch".into()));
        }
        let names = system.field_names();
        let mut fields = Vec::with_capacity(data.len());
        for (i, (d, ic)) in data.drain(..).zip(&ics).enumerate() {
            let mut d = d;
            if d.ncols() != ic.len() {
                return Err(Error::shape(&[grid.nx], &[ic.len()]));
            }
            d.row_mut(0).assign(ic);
            fields.push(Field::new(grid, d, names.get(i).copied().unwrap_or("field"))?);
        }
        FieldSet::new(fields, ics, system)
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn ics(&self) -> &[Array1<f64>] {
        &self.ics
    }

    pub fn system(&self) -> SystemId {
        self.system
    }

    pub fn grid(&self) -> &GridSpec {
        self.fields[0].grid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::new(4, 3, -1.0, 1.0, 1.0, Boundary::Periodic).unwrap()
    }

    #[test]
    fn grid_spacing_depends_on_boundary() {
        let p = GridSpec::new(20, 500, -1.0, 1.0, 5.0, Boundary::Periodic).unwrap();
        assert!((p.dx() - 0.1).abs() < 1e-15);
        let d = GridSpec { bc: Boundary::Dirichlet, ..p };
        assert!((d.dx() - 2.0 / 19.0).abs() < 1e-15);
        assert!((*d.x_coords().last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(GridSpec::new(3, 10, 0.0, 1.0, 1.0, Boundary::Periodic).is_err());
        assert!(GridSpec::new(8, 1, 0.0, 1.0, 1.0, Boundary::Periodic).is_err());
        assert!(GridSpec::new(8, 10, 1.0, 1.0, 1.0, Boundary::Periodic).is_err());
        assert!(GridSpec::new(8, 10, 0.0, 1.0, 0.0, Boundary::Periodic).is_err());
    }

    #[test]
    fn field_shape_checked() {
        let err = Field::new(grid(), Array2::zeros((4, 3)), "u").unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        let mut bad = Array2::zeros((3, 4));
        bad[[1, 1]] = f64::NAN;
        assert!(matches!(Field::new(grid(), bad, "u"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn stats_of_simple_fields() {
        let f = Field::new(grid(), Array2::from_elem((3, 4), 3.0), "u").unwrap();
        let (m, s) = field_stats(&f).unwrap();
        assert_eq!(m, 3.0);
        assert_eq!(s, 0.0);

        let alt = Array::from_shape_fn((3, 4), |(i, j)| if (i + j) % 2 == 0 { -1.0 } else { 1.0 });
        let f = Field::new(grid(), alt, "u").unwrap();
        let (m, s) = field_stats(&f).unwrap();
        assert!(m.abs() < 1e-15);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stats_reject_non_finite() {
        assert!(slice_stats([1.0, f64::INFINITY].iter()).is_err());
        assert!(slice_stats(std::iter::empty()).is_err());
    }

    #[test]
    fn fieldset_requires_matching_ics() {
        let g = grid();
        let a = Array2::from_elem((3, 4), 1.0);
        let ic = Array1::from_elem(4, 1.0);
        let f = Field::new(g, a.clone(), "u").unwrap();
        let h = Field::new(g, a, "v").unwrap();
        assert!(FieldSet::new(vec![f.clone(), h.clone()], vec![ic.clone(), ic.clone()], SystemId::ReactionDiffusion).is_ok());
        let off = Array1::from_elem(4, 0.5);
        assert!(FieldSet::new(vec![f, h], vec![ic, off], SystemId::ReactionDiffusion).is_err());
    }

    proptest! {
        #[test]
        fn stats_permutation_invariant(mut v in proptest::collection::vec(-100.0f64..100.0, 12), seed in 0u64..1000) {
            let (m1, s1) = slice_stats(v.iter()).unwrap();
            // deterministic shuffle
            let n = v.len();
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (state >> 33) as usize % (i + 1);
                v.swap(i, j);
            }
            let (m2, s2) = slice_stats(v.iter()).unwrap();
            prop_assert!((m1 - m2).abs() <= 1e-12 * (1.0 + m1.abs()));
            prop_assert!((s1 - s2).abs() <= 1e-12 * (1.0 + s1));
        }
    }
}
