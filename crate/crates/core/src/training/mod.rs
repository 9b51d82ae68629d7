//! Training: MSE loss, LAMB, the halving learning-rate schedule,
//! augmentation, the epoch loop and hyperparameter sweeps.

mod data;
mod lamb;
mod sweep;
mod trainer;

pub use data::{Batch, Dataset, Sample};
pub use lamb::{lamb_step, LambConfig, LambStats, OptimizerState};
pub use sweep::{format_sweep_table, hyperparameter_sweep, SweepGrid, SweepRow};
pub use trainer::{
    train, train_on, EpochMetrics, TrainSummary, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT,
    METRICS_FILE,
};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::grid::{DoseGrid, GeometryGrid, VoxelGrid};
use crate::physics::zero_below_fraction;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_period: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub augment: bool,
    /// Stop after this many epochs without a validation improvement (0 disables).
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            initial_lr: 1e-3,
            lr_halving_period: 4,
            epochs: 20,
            weight_decay: 0.01,
            seed: 0,
            validation_fraction: 0.1,
            augment: true,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "initial_lr must be finite and >= 0, got {}",
                self.initial_lr
            )));
        }
        if self.lr_halving_period == 0 {
            return Err(Error::Config("lr_halving_period must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn lamb(&self) -> LambConfig {
        LambConfig {
            weight_decay: self.weight_decay,
            ..LambConfig::default()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.initial_lr, self.lr_halving_period)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("batch_size", self.batch_size);
        kv.set("initial_lr", self.initial_lr);
        kv.set("lr_halving_period", self.lr_halving_period);
        kv.set("epochs", self.epochs);
        kv.set("weight_decay", self.weight_decay);
        kv.set("seed", self.seed);
        kv.set("validation_fraction", self.validation_fraction);
        kv.set("augment", self.augment);
        kv.set("patience", self.patience);
        kv
    }

    /// Missing keys keep their defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            batch_size: kv.parsed_or("batch_size", d.batch_size)?,
            initial_lr: kv.parsed_or("initial_lr", d.initial_lr)?,
            lr_halving_period: kv.parsed_or("lr_halving_period", d.lr_halving_period)?,
            epochs: kv.parsed_or("epochs", d.epochs)?,
            weight_decay: kv.parsed_or("weight_decay", d.weight_decay)?,
            seed: kv.parsed_or("seed", d.seed)?,
            validation_fraction: kv.parsed_or("validation_fraction", d.validation_fraction)?,
            augment: kv.parsed_or("augment", d.augment)?,
            patience: kv.parsed_or("patience", d.patience)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean squared voxel difference.
pub fn mse_loss(y: &DoseGrid, y_hat: &DoseGrid) -> Result<f64> {
    if y.dims() != y_hat.dims() {
        return Err(Error::Data(format!(
            "mse of grids {:?} and {:?}",
            y.dims(),
            y_hat.dims()
        )));
    }
    let s: f64 = y
        .values()
        .iter()
        .zip(y_hat.values())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(s / y.len() as f64)
}

/// `initial` halved once per completed `period` epochs.
pub fn lr_schedule(epoch: usize, initial: f64, period: usize) -> f64 {
    initial * 0.5f64.powi((epoch / period.max(1)) as i32)
}

fn rotate_slices(g: &VoxelGrid) -> VoxelGrid {
    let [l, h, w] = g.dims();
    VoxelGrid::from_fn([l, h, w], g.spacing(), |z, y, x| {
        g.get(z, h - 1 - y, w - 1 - x)
    })
}

/// Rotates both grids by 180 degrees within every beam-axis slice when
/// `coin` is set; otherwise returns copies.
pub fn augment_rotate180(x: &GeometryGrid, y: &DoseGrid, coin: bool) -> (GeometryGrid, DoseGrid) {
    if coin {
        (rotate_slices(x), rotate_slices(y))
    } else {
        (x.clone(), y.clone())
    }
}

/// Zeroes values below `threshold_fraction * max(d)`.
pub fn mask_noise(d: &DoseGrid, threshold_fraction: f64) -> DoseGrid {
    zero_below_fraction(d, threshold_fraction)
}
