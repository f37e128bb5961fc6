//! Decoupled and coupled datasets: generation, normalization and the
//! manifest + payload container.
//!
//! Tensors are stored as `(n_samples, channels, nt, nx)`. Decoupled datasets
//! for field `i` carry channels `[output_i, conditional, ic_i]`; coupled
//! datasets carry `[f0, f1, f0_ic, f1_ic, x, t]`. The `_ic` and coordinate
//! channels are broadcast over the missing axis.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, FORMAT_VERSION};
use crate::grf::{grf_sample_1d, grf_sample_2d, GrfParams};
use crate::grid::{slice_stats, Boundary, Field, FieldSet, GridSpec, SystemId};
use crate::seeds::derive_seed;
use crate::systems::{solve_coupled, solve_decoupled, SystemParams};
use crate::{Error, Result};

/// Fraction of failed samples that aborts generation.
pub const MAX_FAILURE_RATE: f64 = 0.05;
/// Retries per sample before it counts as failed.
const MAX_ATTEMPTS: u64 = 4;
/// Train and test splits draw from disjoint seed ranges.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;

const TAG_COND: u64 = 1;
const TAG_IC: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    DecoupledForField(usize),
    Coupled,
}

/// Provenance recorded when a dataset was produced by compositional sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeMeta {
    pub lambda: f64,
    pub picard_iters: usize,
    pub steps: usize,
    pub seed: u64,
    pub renoise_picard: bool,
    pub param_kinds: Vec<String>,
    pub checkpoint_digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub system: SystemId,
    pub grid: GridSpec,
    pub kind: DatasetKind,
    pub n_samples: usize,
    pub channel_names: Vec<String>,
    /// Per-channel `(mean, std)`.
    pub norm_stats: Vec<(f64, f64)>,
    pub grf: GrfParams,
    pub seed0: u64,
    pub payload_file: String,
    pub payload_crc32: u32,
    pub compose: Option<ComposeMeta>,
}

/// On-disk manifest with the exact key set of the container format.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    system_id: String,
    kind: String,
    field_index: i64,
    nx: usize,
    nt: usize,
    x_min: f64,
    x_max: f64,
    t_max: f64,
    bc: String,
    n_samples: usize,
    channels: Vec<String>,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    grf_lx: f64,
    grf_lt: f64,
    grf_amp: f64,
    seed0: u64,
    payload_file: String,
    payload_crc32: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    compose: Option<ComposeMeta>,
}

impl DatasetManifest {
    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            msg,
        };
        self.grid.validate()?;
        if self.n_samples == 0 {
            return Err(bad("n_samples must be >= 1".into()));
        }
        if self.norm_stats.len() != self.channel_names.len() {
            return Err(bad("norm stats and channel count differ".into()));
        }
        if self.norm_stats.iter().any(|(_, s)| !(*s > 0.0)) {
            return Err(bad("every channel needs std > 0".into()));
        }
        Ok(())
    }

    fn to_file(&self) -> ManifestFile {
        let (kind, field_index) = match self.kind {
            DatasetKind::DecoupledForField(i) => ("decoupled".to_string(), i as i64),
            DatasetKind::Coupled => ("coupled".to_string(), -1),
        };
        ManifestFile {
            format_version: FORMAT_VERSION,
            system_id: self.system.as_str().into(),
            kind,
            field_index,
            nx: self.grid.nx,
            nt: self.grid.nt,
            x_min: self.grid.x_min,
            x_max: self.grid.x_max,
            t_max: self.grid.t_max,
            bc: self.grid.bc.as_str().into(),
            n_samples: self.n_samples,
            channels: self.channel_names.clone(),
            norm_mean: self.norm_stats.iter().map(|s| s.0).collect(),
            norm_std: self.norm_stats.iter().map(|s| s.1).collect(),
            grf_lx: self.grf.length_scale_x,
            grf_lt: self.grf.length_scale_t,
            grf_amp: self.grf.amplitude,
            seed0: self.seed0,
            payload_file: self.payload_file.clone(),
            payload_crc32: self.payload_crc32,
            compose: self.compose.clone(),
        }
    }

    fn from_file(f: ManifestFile, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            msg,
        };
        if f.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: f.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let kind = match (f.kind.as_str(), f.field_index) {
            ("coupled", _) => DatasetKind::Coupled,
            ("decoupled", i) if i >= 0 => DatasetKind::DecoupledForField(i as usize),
            (k, i) => return Err(bad(format!("bad kind/field_index: {k}/{i}"))),
        };
        if f.norm_mean.len() != f.norm_std.len() {
            return Err(bad("norm_mean and norm_std lengths differ".into()));
        }
        let m = DatasetManifest {
            system: f.system_id.parse()?,
            grid: GridSpec {
                nx: f.nx,
                nt: f.nt,
                x_min: f.x_min,
                x_max: f.x_max,
                t_max: f.t_max,
                bc: f.bc.parse::<Boundary>()?,
            },
            kind,
            n_samples: f.n_samples,
            channel_names: f.channels,
            norm_stats: f.norm_mean.into_iter().zip(f.norm_std).collect(),
            grf: GrfParams {
                length_scale_x: f.grf_lx,
                length_scale_t: f.grf_lt,
                amplitude: f.grf_amp,
                seed: f.seed0,
            },
            seed0: f.seed0,
            payload_file: f.payload_file,
            payload_crc32: f.payload_crc32,
            compose: f.compose,
        };
        m.validate(path)?;
        Ok(m)
    }
}

/// An in-memory dataset. Raw values are stored as `f32`.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: DatasetManifest,
    data: Array4<f32>,
    normalize: bool,
}

impl Dataset {
    /// Wraps raw tensors, computing per-channel normalization statistics.
    pub fn from_raw(
        system: SystemId,
        grid: GridSpec,
        kind: DatasetKind,
        channel_names: Vec<String>,
        grf: GrfParams,
        seed0: u64,
        data: Array4<f32>,
    ) -> Result<Self> {
        let (n, c, nt, nx) = data.dim();
        if c != channel_names.len() || (nt, nx) != grid.shape() {
            return Err(Error::shape(&[n, channel_names.len(), grid.nt, grid.nx], data.shape()));
        }
        let norm_stats = channel_stats(&data)?;
        let manifest = DatasetManifest {
            system,
            grid,
            kind,
            n_samples: n,
            channel_names,
            norm_stats,
            grf: grf.with_seed(seed0),
            seed0,
            payload_file: String::new(),
            payload_crc32: 0,
            compose: None,
        };
        manifest.validate(Path::new("<memory>"))?;
        Ok(Dataset {
            manifest,
            data,
            normalize: false,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut DatasetManifest {
        &mut self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn raw(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn set_normalize(&mut self, on: bool) {
        self.normalize = on;
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn raw_sample(&self, i: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), i)
    }

    /// Sample `i` as `(channels, nt, nx)`, normalized when the toggle is on.
    pub fn sample(&self, i: usize) -> Array3<f32> {
        let mut out = self.raw_sample(i).to_owned();
        if self.normalize {
            for (c, &(m, s)) in self.manifest.norm_stats.iter().enumerate() {
                out.index_axis_mut(Axis(0), c)
                    .mapv_inplace(|v| ((v as f64 - m) / s) as f32);
            }
        }
        out
    }

    /// One channel of one sample in physical units, widened to f64.
    pub fn channel(&self, i: usize, c: usize) -> Array2<f64> {
        self.data.slice(s![i, c, .., ..]).mapv(|v| v as f64)
    }

    /// Coupled fields of sample `i` as a [`FieldSet`] (coupled layout only).
    pub fn field_set(&self, i: usize) -> Result<FieldSet> {
        if self.manifest.kind != DatasetKind::Coupled {
            return Err(Error::Incompatible("field sets need a coupled dataset".into()));
        }
        let grid = self.manifest.grid;
        let fields = vec![self.channel(i, 0), self.channel(i, 1)];
        let ics = vec![
            self.channel(i, 2).row(0).to_owned(),
            self.channel(i, 3).row(0).to_owned(),
        ];
        FieldSet::from_trajectories(grid, self.manifest.system, fields, ics)
    }

    /// Writes manifest and payload; the payload sits next to the manifest.
    pub fn save(&mut self, manifest_path: &Path) -> Result<()> {
        let payload_path = container::payload_path_for(manifest_path);
        let flat: Vec<f32> = self.data.iter().copied().collect();
        let crc = container::write_payload(&payload_path, &flat)?;
        self.manifest.payload_file = payload_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.manifest.payload_crc32 = crc;
        container::write_manifest(manifest_path, &self.manifest.to_file())
    }
}

/// Loads a dataset; normalization on read is off until toggled.
pub fn load(manifest_path: &Path) -> Result<Dataset> {
    container::check_version(manifest_path)?;
    let file: ManifestFile = container::read_manifest(manifest_path)?;
    let manifest = DatasetManifest::from_file(file, manifest_path)?;
    let payload_path: PathBuf = container::resolve_payload(manifest_path, &manifest.payload_file);
    let shape = (
        manifest.n_samples,
        manifest.n_channels(),
        manifest.grid.nt,
        manifest.grid.nx,
    );
    let len = shape.0 * shape.1 * shape.2 * shape.3;
    let flat = container::read_payload(&payload_path, len, manifest.payload_crc32)?;
    let data = Array4::from_shape_vec(shape, flat).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(Dataset {
        manifest,
        data,
        normalize: false,
    })
}

fn channel_stats(data: &Array4<f32>) -> Result<Vec<(f64, f64)>> {
    (0..data.dim().1)
        .map(|c| {
            let ch = data.index_axis(Axis(1), c);
            let values: Vec<f64> = ch.iter().map(|&v| v as f64).collect();
            let (m, s) = slice_stats(values.iter())?;
            // a constant channel is left unscaled
            Ok((m, if s > 1e-12 { s } else { 1.0 }))
        })
        .collect()
}

fn broadcast_rows(v: &Array1<f64>, nt: usize) -> Array2<f64> {
    v.broadcast((nt, v.len())).expect("row broadcast").to_owned()
}

pub fn decoupled_channel_names(system: SystemId, field_index: usize) -> Vec<String> {
    let names = system.field_names();
    let own = names[field_index];
    let other = names[1 - field_index];
    vec![own.to_string(), format!("{other}_cond"), format!("{own}_ic")]
}

pub fn coupled_channel_names(system: SystemId) -> Vec<String> {
    let [a, b] = system.field_names();
    vec![
        a.to_string(),
        b.to_string(),
        format!("{a}_ic"),
        format!("{b}_ic"),
        "x".to_string(),
        "t".to_string(),
    ]
}

/// Stacks per-sample `(channels, nt, nx)` arrays into one tensor.
fn stack(samples: Vec<Vec<Array2<f64>>>, grid: &GridSpec) -> Array4<f32> {
    let n = samples.len();
    let c = samples.first().map_or(0, |s| s.len());
    let mut out = Array4::<f32>::zeros((n, c, grid.nt, grid.nx));
    for (i, chans) in samples.into_iter().enumerate() {
        for (j, ch) in chans.into_iter().enumerate() {
            out.slice_mut(s![i, j, .., ..]).assign(&ch.mapv(|v| v as f32));
        }
    }
    out
}

/// Runs `make` for samples `0..n`, retrying failed seeds. Aborts if more than
/// [`MAX_FAILURE_RATE`] of the samples exhaust their retries.
fn generate_samples<F>(n: usize, seed: u64, make: F) -> Result<Vec<Vec<Array2<f64>>>>
where
    F: Fn(u64) -> Result<Vec<Array2<f64>>> + Sync,
{
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    let results: Vec<Option<Vec<Array2<f64>>>> = (0..n as u64)
        .into_par_iter()
        .map(|j| {
            for attempt in 0..MAX_ATTEMPTS {
                let s = derive_seed(seed, &[j, attempt]);
                match make(s) {
                    Ok(chans) => return Some(chans),
                    Err(e) => log::warn!("sample {j} attempt {attempt} failed: {e}; retrying with next seed"),
                }
            }
            None
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    if failed as f64 > MAX_FAILURE_RATE * n as f64 {
        return Err(Error::GenerationFailed { failed, requested: n });
    }
    if failed > 0 {
        log::warn!("{failed} of {n} samples dropped after retries");
    }
    Ok(results.into_iter().flatten().collect())
}

/// Decoupled data for field `field_index`: a space-time GRF conditional
/// field and a GRF initial condition, solved with the conditional frozen.
pub fn generate_decoupled(
    system: &SystemParams,
    grf: &GrfParams,
    field_index: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    let grid = system.grid;
    if field_index > 1 {
        return Err(Error::InvalidParameter(format!("field index {field_index} out of range")));
    }
    let other_name = system.system().field_names()[1 - field_index];
    // parameter errors are not worth per-sample retries
    grf_sample_2d(&grid, grf)?;
    let samples = generate_samples(n, seed, |s| {
        let cond = grf_sample_2d(&grid, &grf.with_seed(derive_seed(s, &[TAG_COND])))?;
        let ic = grf_sample_1d(&grid, &grf.with_seed(derive_seed(s, &[TAG_IC])))?;
        let frozen = Field::new(grid, cond, other_name)?;
        let out = solve_decoupled(system, field_index, &frozen, &ic)?;
        Ok(vec![out.into_data(), frozen.into_data(), broadcast_rows(&ic, grid.nt)])
    })?;
    Dataset::from_raw(
        system.system(),
        grid,
        DatasetKind::DecoupledForField(field_index),
        decoupled_channel_names(system.system(), field_index),
        *grf,
        seed,
        stack(samples, &grid),
    )
}

/// Coupled data: two GRF initial conditions evolved jointly.
pub fn generate_coupled(system: &SystemParams, grf: &GrfParams, n: usize, seed: u64) -> Result<Dataset> {
    let grid = system.grid;
    grf_sample_1d(&grid, grf)?;
    let x = grid.x_coords();
    let t = grid.t_coords();
    let x_chan = broadcast_rows(&x, grid.nt);
    let t_chan = t.broadcast((grid.nx, grid.nt)).expect("broadcast").t().to_owned();
    let samples = generate_samples(n, seed, |s| {
        let ics = vec![
            grf_sample_1d(&grid, &grf.with_seed(derive_seed(s, &[TAG_IC, 0])))?,
            grf_sample_1d(&grid, &grf.with_seed(derive_seed(s, &[TAG_IC, 1])))?,
        ];
        let fs = solve_coupled(system, &ics)?;
        Ok(vec![
            fs.fields()[0].data().clone(),
            fs.fields()[1].data().clone(),
            broadcast_rows(&ics[0], grid.nt),
            broadcast_rows(&ics[1], grid.nt),
            x_chan.clone(),
            t_chan.clone(),
        ])
    })?;
    Dataset::from_raw(
        system.system(),
        grid,
        DatasetKind::Coupled,
        coupled_channel_names(system.system()),
        *grf,
        seed,
        stack(samples, &grid),
    )
}

/// Builds a coupled-layout dataset from predicted field sets, e.g. the
/// output of compositional sampling.
pub fn from_field_sets(sets: &[FieldSet], grf: GrfParams, seed0: u64) -> Result<Dataset> {
    let first = sets.first().ok_or_else(|| Error::Empty("field sets".into()))?;
    let grid = *first.grid();
    let system = first.system();
    let x_chan = broadcast_rows(&grid.x_coords(), grid.nt);
    let t_chan = grid.t_coords().broadcast((grid.nx, grid.nt)).expect("broadcast").t().to_owned();
    let samples = sets
        .iter()
        .map(|fs| {
            if fs.grid() != &grid || fs.system() != system {
                return Err(Error::Incompatible("field sets disagree on grid or system".into()));
            }
            Ok(vec![
                fs.fields()[0].data().clone(),
                fs.fields()[1].data().clone(),
                broadcast_rows(&fs.ics()[0], grid.nt),
                broadcast_rows(&fs.ics()[1], grid.nt),
                x_chan.clone(),
                t_chan.clone(),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_raw(
        system,
        grid,
        DatasetKind::Coupled,
        coupled_channel_names(system),
        grf,
        seed0,
        stack(samples, &grid),
    )
}
