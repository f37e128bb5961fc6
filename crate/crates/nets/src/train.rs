//! Training loops for the denoisers and the operator baseline.
//!
//! Both loops draw batches, diffusion steps and noise from one seeded
//! stream, so a run is reproducible given its seed. An exponential moving
//! average of the weights is maintained and used at inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use compdiff_core::dataset::{Dataset, DatasetKind};
use compdiff_core::schedule::NoiseSchedule;
use compdiff_core::GridSpec;

use crate::checkpoint::{self, CheckpointMeta, ModelConfig};
use crate::fno::{Fno, FnoConfig};
use crate::params::ParamStore;
use crate::unet::{UNet, UNetConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Write an EMA checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            steps: 50_000,
            learning_rate: 2e-4,
            ema_decay: 0.999,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("EMA decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub ema_loss: f64,
    pub wall_ms: f64,
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,loss,ema_loss,wall_ms\n");
    for r in history {
        let _ = writeln!(out, "{},{:.6e},{:.6e},{:.1}", r.step, r.loss, r.ema_loss, r.wall_ms);
    }
    out
}

/// Exponential moving average of a parameter set.
pub struct Ema {
    decay: f64,
    updates: usize,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(params: &ParamStore, decay: f64) -> Result<Self> {
        Ok(Ema {
            decay,
            updates: 0,
            shadow: params.snapshot()?,
        })
    }

    /// Effective decay ramps up over the first updates so that early
    /// weights do not dominate short runs.
    fn effective_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        let d = self.effective_decay();
        for (name, var) in params.named() {
            let w = var.as_tensor().detach();
            let s = self.shadow.get_mut(name).expect("shadow covers every parameter");
            *s = ((&*s * d)? + (w * (1.0 - d))?)?;
        }
        self.updates += 1;
        Ok(())
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }
}

/// Shared optimization loop. `batch_loss` returns the scalar loss of one
/// freshly drawn batch.
fn optimize(
    params: &ParamStore,
    cfg: &TrainConfig,
    mut batch_loss: impl FnMut(&mut ChaCha8Rng) -> Result<Tensor>,
    mut on_checkpoint: impl FnMut(usize, &Ema) -> Result<()>,
) -> Result<(Ema, Vec<LossRecord>)> {
    cfg.validate()?;
    let mut opt = AdamW::new(
        params.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut ema = Ema::new(params, cfg.ema_decay)?;
    let mut rng = compdiff_core::seeds::rng(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    let mut smooth = None;
    for step in 0..cfg.steps {
        let loss = batch_loss(&mut rng)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss is {value} at step {step}")));
        }
        opt.backward_step(&loss)?;
        ema.update(params)?;
        let s = smooth.map_or(value, |s: f64| 0.98 * s + 0.02 * value);
        smooth = Some(s);
        history.push(LossRecord {
            step,
            loss: value,
            ema_loss: s,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if step % 500 == 0 || step + 1 == cfg.steps {
            log::info!("step {step}: loss {value:.4e} (smoothed {s:.4e})");
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, &ema)?;
        }
    }
    Ok((ema, history))
}

/// Normalized dataset tensor `(n, channels, nt, nx)` in `dtype`.
fn dataset_tensor(ds: &Dataset, dtype: DType) -> Result<Tensor> {
    let raw = ds.raw();
    let (n, c, nt, nx) = raw.dim();
    let mut v: Vec<f32> = Vec::with_capacity(raw.len());
    for i in 0..n {
        for (ch, &(m, s)) in ds.manifest().norm_stats.iter().enumerate() {
            v.extend(raw.slice(ndarray::s![i, ch, .., ..]).iter().map(|&x| ((x as f64 - m) / s) as f32));
        }
    }
    Ok(Tensor::from_vec(v, (n, c, nt, nx), &Device::Cpu)?.to_dtype(dtype)?)
}

fn draw_indices(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Result<Tensor> {
    let idx: Vec<u32> = (0..b).map(|_| rng.random_range(0..n as u32)).collect();
    Ok(Tensor::new(idx.as_slice(), &Device::Cpu)?)
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), dtype: DType) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Physical time coordinate scaled to `[0, 1]`, broadcast to `(b, 1, nt, nx)`.
pub fn time_channel(b: usize, nt: usize, nx: usize, dtype: DType) -> Result<Tensor> {
    let denom = (nt.max(2) - 1) as f64;
    let col: Vec<f64> = (0..nt).map(|i| i as f64 / denom).collect();
    Ok(Tensor::from_vec(col, (1, 1, nt, 1), &Device::Cpu)?
        .to_dtype(dtype)?
        .broadcast_as((b, 1, nt, nx))?
        .contiguous()?)
}

/// Noisy input, regression target and steps for one denoiser batch.
pub struct DenoiserBatch {
    pub input: Tensor,
    pub target: Tensor,
    pub steps: Vec<usize>,
}

/// Builds a training batch from normalized samples `(B, C, nt, nx)` whose
/// channel 0 is the clean field.
pub fn denoiser_batch(
    samples: &Tensor,
    cfg: &UNetConfig,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<DenoiserBatch> {
    let (b, c, nt, nx) = samples.dims4()?;
    let dtype = samples.dtype();
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = gaussian(rng, (b, 1, nt, nx), dtype)?;
    let (a, s): (Vec<f64>, Vec<f64>) = steps.iter().map(|&t| sched.signal_noise(t)).unzip();
    let a = Tensor::from_vec(a, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let s = Tensor::from_vec(s, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let z0 = samples.narrow(1, 0, 1)?;
    let z_t = (z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?;
    let target = match cfg.param_kind {
        compdiff_core::ddpm::ParamKind::Epsilon => eps,
        compdiff_core::ddpm::ParamKind::V => (eps.broadcast_mul(&a)? - z0.broadcast_mul(&s)?)?,
    };
    let mut parts = vec![z_t, samples.narrow(1, 1, c - 1)?];
    if cfg.time_channel {
        parts.push(time_channel(b, nt, nx, dtype)?);
    }
    Ok(DenoiserBatch {
        input: Tensor::cat(&parts, 1)?,
        target,
        steps,
    })
}

pub struct TrainedDenoiser {
    /// Network holding the EMA weights.
    pub net: UNet,
    pub meta: CheckpointMeta,
    pub history: Vec<LossRecord>,
}

impl TrainedDenoiser {
    pub fn save(&self, path: &Path) -> Result<String> {
        checkpoint::save(path, &self.meta, &self.net.params().snapshot()?)
    }
}

fn check_denoiser_data(ds: &Dataset, cfg: &UNetConfig) -> Result<usize> {
    let field = match ds.manifest().kind {
        DatasetKind::DecoupledForField(i) => i,
        DatasetKind::Coupled => {
            return Err(Error::Incompatible("denoisers train on decoupled data".into()));
        }
    };
    let want = ds.manifest().n_channels() + usize::from(cfg.time_channel);
    if want != cfg.in_channels {
        return Err(Error::Incompatible(format!(
            "dataset provides {want} input channels, network expects {}",
            cfg.in_channels
        )));
    }
    Ok(field)
}

pub fn train_denoiser(
    ds: &Dataset,
    unet_cfg: &UNetConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainedDenoiser> {
    let field = check_denoiser_data(ds, unet_cfg)?;
    let net = UNet::new(unet_cfg.clone(), DType::F32, compdiff_core::seeds::derive_seed(cfg.seed, &[0]))?;
    let data = dataset_tensor(ds, DType::F32)?;
    let n = ds.len();
    let meta = CheckpointMeta {
        model: ModelConfig::UNet(unet_cfg.clone()),
        system: ds.manifest().system,
        grid: ds.manifest().grid,
        field_index: Some(field),
        channel_names: ds.manifest().channel_names.clone(),
        norm_stats: ds.manifest().norm_stats.clone(),
        schedule: Some(sched.params()),
        train_steps: cfg.steps,
        seed: cfg.seed,
    };
    let (ema, history) = optimize(
        net.params(),
        cfg,
        |rng| {
            let idx = draw_indices(rng, n, cfg.batch_size)?;
            let batch = denoiser_batch(&data.index_select(&idx, 0)?, unet_cfg, sched, rng)?;
            let out = net.forward(&batch.input, &batch.steps)?;
            Ok((out - batch.target)?.sqr()?.mean_all()?)
        },
        |step, ema| {
            if let Some(p) = checkpoint_path {
                let m = CheckpointMeta {
                    train_steps: step,
                    ..meta.clone()
                };
                checkpoint::save(p, &m, ema.weights())?;
            }
            Ok(())
        },
    )?;
    net.params().assign_from(ema.weights())?;
    Ok(TrainedDenoiser { net, meta, history })
}

/// Initial-condition and target channels of a coupled dataset.
pub const FNO_IC_CHANNELS: [usize; 2] = [2, 3];
pub const FNO_OUTPUTS: [usize; 2] = [0, 1];
/// Operator inputs: x and t scaled to `[0, 1]`, then both normalized ICs.
pub const FNO_IN_CHANNELS: usize = 4;

/// Coordinate channels `(b, 2, nt, nx)`: x and t mapped to `[0, 1]`.
pub fn fno_coords(grid: &GridSpec, b: usize, dtype: DType) -> Result<Tensor> {
    let (nt, nx) = (grid.nt, grid.nx);
    let x = grid.x_coords();
    let t = grid.t_coords();
    let mut v = Vec::with_capacity(2 * nt * nx);
    for _ in 0..nt {
        v.extend(x.iter().map(|&x| (x - grid.x_min) / (grid.x_max - grid.x_min)));
    }
    for &t in &t {
        v.extend(std::iter::repeat_n(t / grid.t_max, nx));
    }
    Ok(Tensor::from_vec(v, (1, 2, nt, nx), &Device::Cpu)?
        .to_dtype(dtype)?
        .broadcast_as((b, 2, nt, nx))?
        .contiguous()?)
}

/// Operator input from normalized initial-condition channels `(b, 2, nt, nx)`.
pub fn fno_input(grid: &GridSpec, ics: &Tensor) -> Result<Tensor> {
    let b = ics.dim(0)?;
    Ok(Tensor::cat(&[&fno_coords(grid, b, ics.dtype())?, ics], 1)?)
}

pub struct TrainedFno {
    pub net: Fno,
    pub meta: CheckpointMeta,
    pub history: Vec<LossRecord>,
}

impl TrainedFno {
    pub fn save(&self, path: &Path) -> Result<String> {
        checkpoint::save(path, &self.meta, &self.net.params().snapshot()?)
    }
}

fn pick_channels(x: &Tensor, chans: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = chans.iter().map(|&c| c as u32).collect();
    Ok(x.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 1)?)
}

pub fn train_fno(ds: &Dataset, cfg: &TrainConfig, fno_cfg: Option<FnoConfig>, checkpoint_path: Option<&Path>) -> Result<TrainedFno> {
    if ds.manifest().kind != DatasetKind::Coupled {
        return Err(Error::Incompatible("the operator baseline trains on coupled data".into()));
    }
    let grid = ds.manifest().grid;
    let fno_cfg = fno_cfg.unwrap_or_else(|| FnoConfig::for_grid(grid.nt, grid.nx, FNO_IN_CHANNELS, FNO_OUTPUTS.len()));
    let net = Fno::new(fno_cfg.clone(), DType::F32, compdiff_core::seeds::derive_seed(cfg.seed, &[1]))?;
    let data = dataset_tensor(ds, DType::F32)?;
    let inputs = fno_input(&grid, &pick_channels(&data, &FNO_IC_CHANNELS)?)?;
    let targets = pick_channels(&data, &FNO_OUTPUTS)?;
    let n = ds.len();
    let meta = CheckpointMeta {
        model: ModelConfig::Fno(fno_cfg),
        system: ds.manifest().system,
        grid,
        field_index: None,
        channel_names: ds.manifest().channel_names.clone(),
        norm_stats: ds.manifest().norm_stats.clone(),
        schedule: None,
        train_steps: cfg.steps,
        seed: cfg.seed,
    };
    let (ema, history) = optimize(
        net.params(),
        cfg,
        |rng| {
            let idx = draw_indices(rng, n, cfg.batch_size)?;
            let out = net.forward(&inputs.index_select(&idx, 0)?)?;
            Ok((out - targets.index_select(&idx, 0)?)?.sqr()?.mean_all()?)
        },
        |step, ema| {
            if let Some(p) = checkpoint_path {
                let m = CheckpointMeta {
                    train_steps: step,
                    ..meta.clone()
                };
                checkpoint::save(p, &m, ema.weights())?;
            }
            Ok(())
        },
    )?;
    net.params().assign_from(ema.weights())?;
    Ok(TrainedFno { net, meta, history })
}
