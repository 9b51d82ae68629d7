use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{Batch, Dataset};
use super::lamb::{lamb_step, LambConfig, OptimizerState};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Dota, ModelConfig};
use crate::tensor::{Graph, Tensor};

pub const BEST_CHECKPOINT: &str = "best.dota";
pub const LAST_CHECKPOINT: &str = "last.dota";
pub const METRICS_FILE: &str = "metrics.csv";

const SPLIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 1 << 32;
const DROPOUT_SEED_MIX: u64 = 0x5DEE_CE66_D1CE_4E5B;

/// A model together with its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Dota<f32>,
    pub state: OptimizerState<f32>,
    pub lamb: LambConfig,
    seed: u64,
}

impl Trainer {
    pub fn new(model: Dota<f32>, lamb: LambConfig, seed: u64) -> Self {
        let state = OptimizerState::new(model.params().tensors());
        Trainer {
            model,
            state,
            lamb,
            seed,
        }
    }

    /// Batch MSE and parameter gradients. Dropout is active iff `rng` is given.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(f64, Vec<Tensor<f32>>)> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let input = self
            .model
            .input(&mut g, batch.geometry.clone(), &batch.energies)?;
        let out = self.model.forward(&mut g, &bound, input, rng)?;
        let target = g.constant(batch.dose.clone());
        let loss = g.mse(out, target)?;
        let value = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss)?;
        let grads = bound
            .vars()
            .iter()
            .zip(self.model.params().tensors())
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        Ok((value, grads))
    }

    /// Batch MSE with dropout off.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.model.bind_frozen(&mut g);
        let input = self
            .model
            .input(&mut g, batch.geometry.clone(), &batch.energies)?;
        let out = self.model.forward(&mut g, &bound, input, None)?;
        let target = g.constant(batch.dose.clone());
        let loss = g.mse(out, target)?;
        Ok(g.value(loss).data()[0] as f64)
    }

    /// One optimizer step; returns the training loss before the update.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ DROPOUT_SEED_MIX);
        rng.set_stream(self.state.step);
        let (loss, grads) = self.loss_and_grads(batch, Some(&mut rng))?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}",
                self.state.step + 1
            )));
        }
        let names = self.model.params().names().to_vec();
        lamb_step(
            self.model.params_mut().tensors_mut(),
            &grads,
            &names,
            &mut self.state,
            lr,
            &self.lamb,
        )?;
        Ok(loss)
    }

    /// Mean per-voxel MSE over `indices` (dropout off, no augmentation).
    pub fn evaluate(&self, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<f64> {
        if indices.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        for chunk in indices.chunks(batch_size.max(1)) {
            let batch = Batch::assemble(data, chunk, &[])?;
            total += self.batch_loss(&batch)? * chunk.len() as f64;
        }
        Ok(total / indices.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    fn line(&self) -> String {
        format!(
            "{},{:e},{:.6e},{:.6e},{:.3}\n",
            self.epoch, self.lr, self.train_mse, self.val_mse, self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub epochs_run: usize,
    pub steps: u64,
    pub history: Vec<EpochMetrics>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

struct Progress {
    next_epoch: usize,
    best_val: f64,
    best_epoch: usize,
    stale: usize,
}

fn save_state(
    path: &Path,
    trainer: &Trainer,
    cfg: &TrainConfig,
    p: &Progress,
    with_optimizer: bool,
) -> Result<()> {
    let mut ckpt = Checkpoint::new(trainer.model.clone());
    ckpt.meta.set("step", trainer.state.step);
    ckpt.meta.set("next_epoch", p.next_epoch);
    ckpt.meta.set("best_val_mse", format!("{:e}", p.best_val));
    ckpt.meta.set("best_epoch", p.best_epoch);
    ckpt.meta.set("stale_epochs", p.stale);
    for (k, v) in cfg.to_key_values().iter() {
        ckpt.meta.set(&format!("train.{}", k), v);
    }
    if with_optimizer {
        let names = trainer.model.params().names();
        for (name, m) in names.iter().zip(&trainer.state.m) {
            ckpt.extras.push((format!("opt.m.{}", name), m.clone()));
        }
        for (name, v) in names.iter().zip(&trainer.state.v) {
            ckpt.extras.push((format!("opt.v.{}", name), v.clone()));
        }
    }
    save_checkpoint(path, &ckpt)
}

fn restore(path: &Path, cfg: &TrainConfig) -> Result<(Trainer, Progress)> {
    let ckpt = load_checkpoint(path)?;
    let meta = &ckpt.meta;
    let need = |k: &str| {
        meta.get(k).ok_or_else(|| {
            Error::Data(format!(
                "{}: checkpoint has no '{}' entry; cannot resume",
                path.display(),
                k
            ))
        })
    };
    let step: u64 = need("step")?
        .parse()
        .map_err(|_| Error::format(path, "bad step"))?;
    let progress = Progress {
        next_epoch: need("next_epoch")?
            .parse()
            .map_err(|_| Error::format(path, "bad next_epoch"))?,
        best_val: need("best_val_mse")?
            .parse()
            .map_err(|_| Error::format(path, "bad best_val_mse"))?,
        best_epoch: need("best_epoch")?
            .parse()
            .map_err(|_| Error::format(path, "bad best_epoch"))?,
        stale: need("stale_epochs")?
            .parse()
            .map_err(|_| Error::format(path, "bad stale_epochs"))?,
    };
    let mut trainer = Trainer::new(ckpt.model, cfg.lamb(), cfg.seed);
    let names = trainer.model.params().names().to_vec();
    for (i, name) in names.iter().enumerate() {
        for (prefix, slot) in [
            ("opt.m.", &mut trainer.state.m[i]),
            ("opt.v.", &mut trainer.state.v[i]),
        ] {
            let key = format!("{}{}", prefix, name);
            let t = ckpt
                .extras
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, t)| t)
                .ok_or_else(|| {
                    Error::Data(format!(
                        "{}: missing optimizer tensor {}",
                        path.display(),
                        key
                    ))
                })?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    path,
                    format!("optimizer tensor {} has shape {:?}", key, t.shape()),
                ));
            }
            *slot = t.clone();
        }
    }
    trainer.state.step = step;
    Ok((trainer, progress))
}

/// Loads the dataset in `data_dir` and trains into `out_dir`; see [`train_on`].
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    let data = Dataset::load(data_dir)?;
    train_on(model_cfg, cfg, &data, out_dir, resume)
}

/// Trains on an already loaded dataset. Writes `best.dota` (lowest
/// validation MSE), `last.dota` (with optimizer state, for resuming) and
/// appends one line per epoch to `metrics.csv`. With `resume`, the model,
/// optimizer moments, step counter and epoch position come from that
/// checkpoint and `model_cfg` is ignored.
pub fn train_on(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (mut trainer, mut progress) = match resume {
        Some(path) => restore(path, cfg)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = Dota::new(model_cfg.clone(), &mut rng)?;
            let progress = Progress {
                next_epoch: 0,
                best_val: f64::INFINITY,
                best_epoch: 0,
                stale: 0,
            };
            (Trainer::new(model, cfg.lamb(), cfg.seed), progress)
        }
    };
    let mcfg = trainer.model.config().clone();
    if data.dims() != [mcfg.seq_len, mcfg.height, mcfg.width] {
        return Err(Error::Data(format!(
            "dataset dims {:?} do not match model dims {:?}",
            data.dims(),
            [mcfg.seq_len, mcfg.height, mcfg.width]
        )));
    }

    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(SPLIT_STREAM);
    let (train_idx, val_idx) = data.split(cfg.validation_fraction, &mut split_rng);
    log::info!(
        "training on {} samples, validating on {} ({} parameters)",
        train_idx.len(),
        val_idx.len(),
        trainer.model.params().scalar_count()
    );

    let metrics_path = out_dir.join(METRICS_FILE);
    let fresh = resume.is_none() || !metrics_path.exists();
    let mut metrics = if fresh {
        let mut f = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        f.write_all(b"epoch,lr,train_mse,val_mse,seconds\n")
            .map_err(|e| Error::io(&metrics_path, e))?;
        f
    } else {
        OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?
    };

    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut history = Vec::new();
    let mut order = train_idx.clone();
    while progress.next_epoch < cfg.epochs {
        if cfg.patience > 0 && progress.stale >= cfg.patience {
            log::info!("early stop: no improvement for {} epochs", progress.stale);
            break;
        }
        let epoch = progress.next_epoch;
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM + epoch as u64);
        order.clone_from(&train_idx);
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order
            .iter()
            .map(|_| cfg.augment && rng.random::<bool>())
            .collect();

        let mut total = 0.0;
        for (chunk, flip) in order
            .chunks(cfg.batch_size)
            .zip(flips.chunks(cfg.batch_size))
        {
            let batch = Batch::assemble(data, chunk, flip)?;
            total += trainer.step(&batch, lr)? * chunk.len() as f64;
        }
        let train_mse = total / order.len() as f64;
        let val_mse = trainer.evaluate(data, &val_idx, cfg.batch_size)?;
        let score = if val_idx.is_empty() {
            train_mse
        } else {
            val_mse
        };

        progress.next_epoch = epoch + 1;
        if score < progress.best_val {
            progress.best_val = score;
            progress.best_epoch = epoch;
            progress.stale = 0;
            save_state(&best_path, &trainer, cfg, &progress, false)?;
        } else {
            progress.stale += 1;
        }
        save_state(&last_path, &trainer, cfg, &progress, true)?;

        let m = EpochMetrics {
            epoch,
            lr,
            train_mse,
            val_mse,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} lr {:.2e} train {:.4e} val {:.4e} ({:.1}s)",
            epoch,
            lr,
            train_mse,
            val_mse,
            m.seconds
        );
        metrics
            .write_all(m.line().as_bytes())
            .map_err(|e| Error::io(&metrics_path, e))?;
        history.push(m);
    }
    if !best_path.exists() {
        save_state(&best_path, &trainer, cfg, &progress, false)?;
    }

    Ok(TrainSummary {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_epoch: progress.best_epoch,
        best_val_mse: progress.best_val,
        epochs_run: history.len(),
        steps: trainer.state.step,
        history,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}
