//! Conditional UNet denoiser.
//!
//! Three encoder stages with `[C, 2C, 4C]` channels, stride-2 convolutions
//! between them, a middle block, and a mirrored decoder with concatenated
//! skips and nearest-neighbor upsampling. The diffusion step is embedded
//! sinusoidally, passed through a small MLP and injected in every residual
//! block by FiLM. The output convolution starts at zero.

use std::collections::BTreeSet;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use compdiff_core::ddpm::ParamKind;

use crate::layers::{reflect_pad_hw, sinusoidal_embed, Attention, Conv3, GroupNorm, Linear, ResBlock};
use crate::params::ParamStore;
use crate::{Error, Result};

pub const STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Noisy field, conditional fields, initial condition, optional time channel.
    pub in_channels: usize,
    /// Width of the sinusoidal step embedding.
    pub embed_dim: usize,
    pub attention_stages: BTreeSet<usize>,
    pub param_kind: ParamKind,
    /// Adds the physical time coordinate as an extra input channel.
    pub time_channel: bool,
}

impl UNetConfig {
    pub fn new(base_channels: usize, n_cond: usize, param_kind: ParamKind) -> Self {
        UNetConfig {
            base_channels,
            in_channels: 1 + n_cond + 1,
            embed_dim: base_channels.max(8) * 2,
            attention_stages: [1, 2].into_iter().collect(),
            param_kind,
            time_channel: false,
        }
    }

    pub fn with_attention_everywhere(mut self) -> Self {
        self.attention_stages = (0..STAGES).collect();
        self
    }

    pub fn with_time_channel(mut self) -> Self {
        if !self.time_channel {
            self.time_channel = true;
            self.in_channels += 1;
        }
        self
    }

    pub fn stage_channels(&self) -> [usize; STAGES] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base channels must be >= 4, got {}", self.base_channels)));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("need at least one input channel".into()));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::Config("embedding dimension must be even".into()));
        }
        if self.attention_stages.iter().any(|&s| s >= STAGES) {
            return Err(Error::Config("attention stage index out of range".into()));
        }
        Ok(())
    }
}

struct Stage {
    res: ResBlock,
    attn: Option<Attention>,
}

impl Stage {
    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, emb)?;
        match &self.attn {
            Some(a) => a.forward(&h),
            None => Ok(h),
        }
    }
}

pub struct UNet {
    cfg: UNetConfig,
    params: ParamStore,
    emb1: Linear,
    emb2: Linear,
    conv_in: Conv3,
    enc: Vec<Stage>,
    down: Vec<Conv3>,
    mid: Stage,
    dec: Vec<Stage>,
    up: Vec<Conv3>,
    norm_out: GroupNorm,
    conv_out: Conv3,
}

impl UNet {
    pub fn new(cfg: UNetConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let ch = cfg.stage_channels();
        let e = cfg.embed_dim;
        let hidden = 4 * cfg.base_channels;
        let attn = |ps: &mut ParamStore, s: usize, name: &str| -> Result<Option<Attention>> {
            if cfg.attention_stages.contains(&s) {
                Ok(Some(Attention::new(ps, name, ch[s])?))
            } else {
                Ok(None)
            }
        };
        let emb1 = Linear::new(&mut ps, "emb.1", e, hidden)?;
        let emb2 = Linear::new(&mut ps, "emb.2", hidden, hidden)?;
        let conv_in = Conv3::new(&mut ps, "conv_in", cfg.in_channels, ch[0], 1)?;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut prev = ch[0];
        for s in 0..STAGES {
            enc.push(Stage {
                res: ResBlock::new(&mut ps, &format!("enc{s}.res"), prev, ch[s], hidden)?,
                attn: attn(&mut ps, s, &format!("enc{s}.attn"))?,
            });
            if s + 1 < STAGES {
                down.push(Conv3::new(&mut ps, &format!("down{s}"), ch[s], ch[s], 2)?);
            }
            prev = ch[s];
        }
        let mid = Stage {
            res: ResBlock::new(&mut ps, "mid.res", ch[2], ch[2], hidden)?,
            attn: attn(&mut ps, 2, "mid.attn")?,
        };
        let mut dec = Vec::new();
        let mut up = Vec::new();
        for s in (0..STAGES).rev() {
            dec.push(Stage {
                res: ResBlock::new(&mut ps, &format!("dec{s}.res"), 2 * ch[s], ch[s], hidden)?,
                attn: attn(&mut ps, s, &format!("dec{s}.attn"))?,
            });
            if s > 0 {
                up.push(Conv3::new(&mut ps, &format!("up{s}"), ch[s], ch[s - 1], 1)?);
            }
        }
        let norm_out = GroupNorm::new(&mut ps, "norm_out", ch[0])?;
        let conv_out = Conv3::zeroed(&mut ps, "conv_out", ch[0], 1)?;
        Ok(UNet {
            cfg,
            params: ps,
            emb1,
            emb2,
            conv_in,
            enc,
            down,
            mid,
            dec,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn embed(&self, steps: &[usize]) -> Result<Tensor> {
        let e = self.cfg.embed_dim;
        let mut v = Vec::with_capacity(steps.len() * e);
        for &t in steps {
            v.extend(sinusoidal_embed(t as f64, e)?);
        }
        let t = Tensor::from_vec(v, (steps.len(), e), self.params.device())?.to_dtype(self.params.dtype())?;
        let h = self.emb1.forward(&t)?.silu()?;
        self.emb2.forward(&h)
    }

    /// Predicts noise or velocity. `x` is `(B, in_channels, H, W)` and
    /// `steps` holds one diffusion step per batch element.
    pub fn forward(&self, x: &Tensor, steps: &[usize]) -> Result<Tensor> {
        self.forward_opts(x, steps, false)
    }

    /// As [`UNet::forward`]; `drop_deepest` zeroes the middle block output,
    /// leaving only the skip paths.
    pub fn forward_opts(&self, x: &Tensor, steps: &[usize], drop_deepest: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "expected {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if steps.len() != b {
            return Err(Error::Config(format!("{} steps for batch of {b}", steps.len())));
        }
        let f = 1 << (STAGES - 1);
        let (ph, pw) = ((f - h % f) % f, (f - w % f) % f);
        let x = reflect_pad_hw(&x.to_dtype(self.params.dtype())?, ph, pw)?;
        let emb = self.embed(steps)?;

        let mut hcur = self.conv_in.forward(&x)?;
        let mut skips = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            hcur = self.enc[s].forward(&hcur, &emb)?;
            skips.push(hcur.clone());
            if s + 1 < STAGES {
                hcur = self.down[s].forward(&hcur)?;
            }
        }
        hcur = self.mid.forward(&hcur, &emb)?;
        if drop_deepest {
            hcur = hcur.zeros_like()?;
        }
        for (k, s) in (0..STAGES).rev().enumerate() {
            let skip = skips.pop().expect("one skip per stage");
            hcur = self.dec[k].forward(&Tensor::cat(&[&hcur, &skip], 1)?, &emb)?;
            if s > 0 {
                let (_, _, hh, ww) = hcur.dims4()?;
                hcur = self.up[k].forward(&hcur.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&hcur)?.silu()?)?;
        Ok(out.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn input(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut r = compdiff_core::seeds::rng(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f32> = (0..n).map(|_| rand::Rng::random_range(&mut r, -1.0f32..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn perturb_output(net: &UNet) {
        // the output conv starts at zero; give it weights so outputs are informative
        for (name, var) in net.params().named() {
            if name.starts_with("conv_out") {
                let t = var.as_tensor();
                let n = t.elem_count();
                let v: Vec<f32> = (0..n).map(|i| ((i * 7919 % 13) as f32 - 6.0) * 0.05).collect();
                var.set(&Tensor::from_vec(v, t.dims(), &Device::Cpu).unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn output_shape_matches_input_grid() {
        let net = UNet::new(UNetConfig::new(4, 1, ParamKind::V), DType::F32, 0).unwrap();
        for &(h, w) in &[(8, 8), (10, 20), (13, 7), (64, 20)] {
            let x = input((2, 3, h, w), 1);
            let y = net.forward(&x, &[1, 7]).unwrap();
            assert_eq!(y.dims(), &[2, 1, h, w]);
        }
    }

    #[test]
    fn zero_initialized_output() {
        let net = UNet::new(UNetConfig::new(4, 1, ParamKind::Epsilon), DType::F32, 0).unwrap();
        let y = net.forward(&input((1, 3, 8, 8), 2), &[3]).unwrap();
        assert_eq!(y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn deterministic_inference_and_seeded_init() {
        let cfg = UNetConfig::new(4, 1, ParamKind::V).with_attention_everywhere();
        let a = UNet::new(cfg.clone(), DType::F32, 5).unwrap();
        let b = UNet::new(cfg, DType::F32, 5).unwrap();
        perturb_output(&a);
        perturb_output(&b);
        let x = input((2, 3, 12, 8), 3);
        let ya = a.forward(&x, &[4, 9]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let yb = b.forward(&x, &[4, 9]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let ya2 = a.forward(&x, &[4, 9]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ya, yb);
        assert_eq!(ya, ya2);
    }

    #[test]
    fn dropping_deepest_stage_keeps_skip_paths() {
        let net = UNet::new(UNetConfig::new(4, 1, ParamKind::V), DType::F32, 1).unwrap();
        perturb_output(&net);
        let x = input((1, 3, 8, 12), 4);
        let full = net.forward(&x, &[2]).unwrap();
        let cut = net.forward_opts(&x, &[2], true).unwrap();
        assert_eq!(cut.dims(), full.dims());
        let v: Vec<f32> = cut.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v.iter().any(|&x| x != 0.0));
        let diff = (full - cut).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(UNet::new(UNetConfig::new(2, 1, ParamKind::V), DType::F32, 0).is_err());
        let net = UNet::new(UNetConfig::new(4, 1, ParamKind::V), DType::F32, 0).unwrap();
        assert!(net.forward(&input((1, 2, 8, 8), 0), &[1]).is_err());
        assert!(net.forward(&input((2, 3, 8, 8), 0), &[1]).is_err());
    }
}
