//! Trained networks behind the sampling and evaluation interfaces.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Array4, Axis};

use compdiff_core::composer::Expert;
use compdiff_core::ddpm::ParamKind;
use compdiff_core::schedule::NoiseSchedule;
use compdiff_core::{GridSpec, SystemId};

use crate::checkpoint::{Checkpoint, CheckpointMeta, ModelConfig};
use crate::fno::Fno;
use crate::train::{time_channel, TrainedDenoiser, TrainedFno, fno_input, FNO_IC_CHANNELS, FNO_OUTPUTS};
use crate::unet::UNet;
use crate::{Error, Result};

/// Samples per network call at inference.
const CHUNK: usize = 32;

fn model_err(e: Error) -> compdiff_core::Error {
    match e {
        Error::Core(c) => c,
        other => compdiff_core::Error::Model(other.to_string()),
    }
}

fn to_tensor(a: &Array4<f64>) -> Result<Tensor> {
    let v: Vec<f32> = a.iter().map(|&x| x as f32).collect();
    Ok(Tensor::from_vec(v, a.dim(), &Device::Cpu)?)
}

fn from_tensor(t: &Tensor) -> Result<Array4<f64>> {
    let (b, c, h, w) = t.dims4()?;
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(Array4::from_shape_vec((b, c, h, w), v).expect("tensor and array sizes agree"))
}

/// Denoiser for one field, built from a checkpoint.
pub struct DenoiserExpert {
    net: UNet,
    meta: CheckpointMeta,
    schedule: NoiseSchedule,
    field: usize,
    digest: String,
}

impl DenoiserExpert {
    fn build(net: UNet, meta: CheckpointMeta, digest: String) -> Result<Self> {
        let field = meta
            .field_index
            .ok_or_else(|| Error::Incompatible("checkpoint has no target field".into()))?;
        let sp = meta
            .schedule
            .ok_or_else(|| Error::Incompatible("checkpoint has no noise schedule".into()))?;
        if meta.norm_stats.len() != 3 {
            return Err(Error::Incompatible(format!(
                "denoiser expects 3 data channels, checkpoint lists {}",
                meta.norm_stats.len()
            )));
        }
        let schedule = NoiseSchedule::from_params(&sp)?;
        Ok(DenoiserExpert {
            net,
            meta,
            schedule,
            field,
            digest,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let ModelConfig::UNet(cfg) = &ck.meta.model else {
            return Err(Error::Incompatible("checkpoint does not hold a denoiser".into()));
        };
        let net = UNet::new(cfg.clone(), DType::F32, 0)?;
        net.params().assign_from(&ck.tensors)?;
        Self::build(net, ck.meta.clone(), ck.digest.clone())
    }

    pub fn from_trained(tr: TrainedDenoiser, digest: String) -> Result<Self> {
        Self::build(tr.net, tr.meta, digest)
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn system(&self) -> SystemId {
        self.meta.system
    }

    fn normalize(&self, x: &Array3<f64>, ch: usize) -> Array3<f64> {
        let (m, s) = self.meta.norm_stats[ch];
        x.mapv(|v| (v - m) / s)
    }

    fn predict_inner(&self, z_t: &Array3<f64>, t: usize, other: &Array3<f64>, ic: &Array2<f64>) -> Result<Array3<f64>> {
        let (b, nt, nx) = z_t.dim();
        if other.dim() != (b, nt, nx) || ic.dim() != (b, nx) {
            return Err(Error::Incompatible("conditioning shapes do not match the noisy field".into()));
        }
        let (im, is) = self.meta.norm_stats[2];
        let ic_b = ic.mapv(|v| (v - im) / is).insert_axis(Axis(1));
        let ic_b = ic_b.broadcast((b, nt, nx)).expect("ic broadcast").to_owned();
        let chans = [z_t.clone(), self.normalize(other, 1), ic_b];
        let views: Vec<_> = chans.iter().map(|a| a.view().insert_axis(Axis(1))).collect();
        let input = ndarray::concatenate(Axis(1), &views).expect("equal channel shapes");
        let mut out = Array3::zeros((b, nt, nx));
        let mut start = 0;
        while start < b {
            let end = (start + CHUNK).min(b);
            let mut x = to_tensor(&input.slice(ndarray::s![start..end, .., .., ..]).to_owned())?;
            if self.net.config().time_channel {
                x = Tensor::cat(&[x, time_channel(end - start, nt, nx, DType::F32)?], 1)?;
            }
            let y = from_tensor(&self.net.forward(&x, &vec![t; end - start])?)?;
            out.slice_mut(ndarray::s![start..end, .., ..])
                .assign(&y.index_axis(Axis(1), 0));
            start = end;
        }
        Ok(out)
    }
}

impl Expert for DenoiserExpert {
    fn field_index(&self) -> usize {
        self.field
    }

    fn param_kind(&self) -> ParamKind {
        self.meta.param_kind().expect("denoiser checkpoint")
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn grid(&self) -> Option<GridSpec> {
        Some(self.meta.grid)
    }

    fn predict(
        &self,
        z_t: &Array3<f64>,
        t: usize,
        others: &[&Array3<f64>],
        ic: &Array2<f64>,
    ) -> compdiff_core::Result<Array3<f64>> {
        let [other] = others else {
            return Err(compdiff_core::Error::Incompatible(format!(
                "denoiser conditions on one field, got {}",
                others.len()
            )));
        };
        self.predict_inner(z_t, t, other, ic).map_err(model_err)
    }

    fn to_physical(&self, z: &Array3<f64>) -> Array3<f64> {
        let (m, s) = self.meta.norm_stats[0];
        z.mapv(|v| v * s + m)
    }
}

/// Operator baseline mapping both initial conditions to both trajectories.
pub struct FnoPredictor {
    net: Fno,
    meta: CheckpointMeta,
    digest: String,
}

impl FnoPredictor {
    fn build(net: Fno, meta: CheckpointMeta, digest: String) -> Result<Self> {
        if meta.norm_stats.len() != 6 {
            return Err(Error::Incompatible(format!(
                "operator expects 6 data channels, checkpoint lists {}",
                meta.norm_stats.len()
            )));
        }
        Ok(FnoPredictor { net, meta, digest })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let ModelConfig::Fno(cfg) = &ck.meta.model else {
            return Err(Error::Incompatible("checkpoint does not hold an operator".into()));
        };
        let net = Fno::new(cfg.clone(), DType::F32, 0)?;
        net.params().assign_from(&ck.tensors)?;
        Self::build(net, ck.meta.clone(), ck.digest.clone())
    }

    pub fn from_trained(tr: TrainedFno, digest: String) -> Result<Self> {
        Self::build(tr.net, tr.meta, digest)
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Trajectories `(B, nt, nx)` for each field, physical units, from
    /// initial conditions `(B, nx)`. Row 0 is set to the given conditions.
    pub fn predict(&self, ics: &[Array2<f64>]) -> Result<Vec<Array3<f64>>> {
        let grid = self.meta.grid;
        let (nt, nx) = (grid.nt, grid.nx);
        if ics.len() != 2 {
            return Err(Error::Incompatible(format!("need 2 initial conditions, got {}", ics.len())));
        }
        let b = ics[0].dim().0;
        if ics.iter().any(|ic| ic.dim() != (b, nx)) {
            return Err(Error::Incompatible(format!("initial conditions must be ({b}, {nx})")));
        }
        let mut input = Array4::<f64>::zeros((b, 2, nt, nx));
        for (k, ic) in ics.iter().enumerate() {
            let (m, s) = self.meta.norm_stats[FNO_IC_CHANNELS[k]];
            let row = ic.mapv(|v| (v - m) / s).insert_axis(Axis(1));
            input
                .index_axis_mut(Axis(1), k)
                .assign(&row.broadcast((b, nt, nx)).expect("ic broadcast"));
        }
        let mut out = vec![Array3::zeros((b, nt, nx)); 2];
        let mut start = 0;
        while start < b {
            let end = (start + CHUNK).min(b);
            let xin = fno_input(&grid, &to_tensor(&input.slice(ndarray::s![start..end, .., .., ..]).to_owned())?)?;
            let y = from_tensor(&self.net.forward(&xin)?)?;
            for (f, o) in out.iter_mut().enumerate() {
                let (m, s) = self.meta.norm_stats[FNO_OUTPUTS[f]];
                o.slice_mut(ndarray::s![start..end, .., ..])
                    .assign(&y.index_axis(Axis(1), f).mapv(|v| v * s + m));
            }
            start = end;
        }
        for (o, ic) in out.iter_mut().zip(ics) {
            o.index_axis_mut(Axis(1), 0).assign(ic);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::train::{train_denoiser, train_fno, TrainConfig};
    use compdiff_core::dataset::{generate_coupled, generate_decoupled};
    use compdiff_core::grf::GrfParams;
    use compdiff_core::systems::SystemParams;
    use crate::unet::UNetConfig;

    fn setup() -> (SystemParams, GrfParams) {
        let p = SystemParams::default_for(SystemId::ReactionDiffusion).with_resolution(8, 8);
        let grf = GrfParams {
            length_scale_x: 0.5,
            length_scale_t: 1.5,
            ..GrfParams::default_for(&p.grid)
        };
        (p, grf)
    }

    #[test]
    fn checkpoint_and_in_memory_experts_agree() {
        let (p, grf) = setup();
        let ds = generate_decoupled(&p, &grf, 1, 4, 3).unwrap();
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            steps: 3,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let ucfg = UNetConfig {
            attention_stages: Default::default(),
            ..UNetConfig::new(4, 1, ParamKind::Epsilon)
        };
        let tr = train_denoiser(&ds, &ucfg, &sched, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.toml");
        let digest = tr.save(&path).unwrap();
        let a = DenoiserExpert::from_trained(tr, digest).unwrap();
        let b = DenoiserExpert::from_checkpoint(&checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.field_index(), 1);
        let z = Array3::from_shape_fn((2, 8, 8), |(i, j, k)| ((i + j * k) as f64).sin());
        let o = z.mapv(|v| 0.3 * v);
        let ic = Array2::from_elem((2, 8), 0.1);
        let pa = a.predict(&z, 5, &[&o], &ic).unwrap();
        let pb = b.predict(&z, 5, &[&o], &ic).unwrap();
        assert_eq!(pa, pb);
        assert!(a.predict(&z, 5, &[], &ic).is_err());
        assert!(FnoPredictor::from_checkpoint(&checkpoint::load(&path).unwrap()).is_err());
    }

    #[test]
    fn operator_prediction_keeps_initial_rows() {
        let (p, grf) = setup();
        let ds = generate_coupled(&p, &grf, 3, 4).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            steps: 2,
            ..Default::default()
        };
        let tr = train_fno(&ds, &cfg, None, None).unwrap();
        let f = FnoPredictor::from_trained(tr, String::new()).unwrap();
        let ics = vec![Array2::from_elem((3, 8), 0.2), Array2::from_elem((3, 8), -0.1)];
        let out = f.predict(&ics).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].dim(), (3, 8, 8));
        assert!(out[0].index_axis(Axis(1), 0).iter().all(|&v| v == 0.2));
        assert!(out[1].index_axis(Axis(1), 0).iter().all(|&v| v == -0.1));
        assert!(out.iter().all(|o| o.iter().all(|v| v.is_finite())));
    }
}
