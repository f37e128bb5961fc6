//! Named bundles of model size, diffusion schedule, data and training budget.

use clap::ValueEnum;
use serde::Serialize;

use compdiff_core::schedule::{ScheduleParams, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use compdiff_core::systems::SystemParams;
use compdiff_core::SystemId;
use compdiff_nets::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetName {
    Paper,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preset {
    pub name: PresetName,
    pub base_channels: usize,
    pub schedule: ScheduleParams,
    pub samples: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
}

impl Preset {
    pub fn get(name: PresetName) -> Self {
        match name {
            PresetName::Paper => Preset {
                name,
                base_channels: 48,
                schedule: ScheduleParams {
                    steps: DEFAULT_STEPS,
                    beta_start: DEFAULT_BETA_START,
                    beta_end: DEFAULT_BETA_END,
                },
                samples: 10_000,
                train_steps: 50_000,
                batch_size: 32,
                learning_rate: 2e-4,
                ema_decay: 0.999,
            },
            PresetName::Desk => {
                let steps = 50;
                // keep the total noise injected comparable to the long chain
                let scale = DEFAULT_STEPS as f64 / steps as f64;
                Preset {
                    name,
                    base_channels: 8,
                    schedule: ScheduleParams {
                        steps,
                        beta_start: DEFAULT_BETA_START * scale,
                        beta_end: DEFAULT_BETA_END * scale,
                    },
                    samples: 500,
                    train_steps: 5_000,
                    batch_size: 16,
                    learning_rate: 2e-4,
                    ema_decay: 0.999,
                }
            }
        }
    }

    /// Grid `(nx, nt)` the preset uses for `system`.
    pub fn resolution(&self, system: SystemId) -> (usize, usize) {
        let g = SystemParams::default_for(system).grid;
        match (self.name, system) {
            (PresetName::Paper, _) => (g.nx, g.nt),
            (PresetName::Desk, SystemId::ReactionDiffusion) => (20, 64),
            (PresetName::Desk, SystemId::ModifiedBurgers) => (32, 32),
        }
    }

    pub fn system_params(&self, system: SystemId) -> SystemParams {
        let (nx, nt) = self.resolution(system);
        SystemParams::default_for(system).with_resolution(nx, nt)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            steps: self.train_steps,
            learning_rate: self.learning_rate,
            ema_decay: self.ema_decay,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}
