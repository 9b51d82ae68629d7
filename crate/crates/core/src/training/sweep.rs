use std::fmt::Write as _;
use std::path::Path;

use super::data::Dataset;
use super::trainer::{train_on, Trainer};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, param_count, ModelConfig};

/// Values tried for blocks `N`, filters `K` and heads `N_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub blocks: Vec<usize>,
    pub filters: Vec<usize>,
    pub heads: Vec<usize>,
}

impl SweepGrid {
    /// `N` in {1,2,4}, `K` in {8,10,16}, `N_h` in {8,16}.
    pub fn paper() -> Self {
        SweepGrid {
            blocks: vec![1, 2, 4],
            filters: vec![8, 10, 16],
            heads: vec![8, 16],
        }
    }

    /// Parses `blocks=1,2;filters=4,8;heads=4`. Omitted axes keep the
    /// value of `base`.
    pub fn parse(spec: &str, base: &ModelConfig) -> Result<Self> {
        let mut grid = SweepGrid {
            blocks: vec![base.blocks],
            filters: vec![base.filters],
            heads: vec![base.heads],
        };
        for part in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("sweep axis '{}' is not key=v1,v2", part)))?;
            let values = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad sweep value '{}' for {}", v, key)))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(Error::Config(format!("sweep axis {} is empty", key)));
            }
            match key.trim() {
                "blocks" | "N" => grid.blocks = values,
                "filters" | "K" => grid.filters = values,
                "heads" | "Nh" | "N_h" => grid.heads = values,
                other => return Err(Error::Config(format!("unknown sweep axis '{}'", other))),
            }
        }
        Ok(grid)
    }

    /// Every combination applied to `base`, validated up front.
    pub fn configs(&self, base: &ModelConfig) -> Result<Vec<ModelConfig>> {
        let mut out = Vec::new();
        for &blocks in &self.blocks {
            for &filters in &self.filters {
                for &heads in &self.heads {
                    let cfg = ModelConfig {
                        blocks,
                        filters,
                        heads,
                        ..base.clone()
                    };
                    cfg.validate().map_err(|e| {
                        Error::Config(format!("N={} K={} N_h={}: {}", blocks, filters, heads, e))
                    })?;
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub config: ModelConfig,
    pub param_count: usize,
    pub best_epoch: usize,
    pub val_mse: f64,
    pub test_mse: f64,
}

/// Trains every configuration of `grid` with the same training config and
/// data, scores the best checkpoint on `test_dir`, and returns rows sorted
/// by ascending test MSE. Run `i` is written to `out_dir/run_i`.
pub fn hyperparameter_sweep(
    base: &ModelConfig,
    grid: &SweepGrid,
    cfg: &TrainConfig,
    data_dir: &Path,
    test_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    let configs = grid.configs(base)?;
    let data = Dataset::load(data_dir)?;
    let test = Dataset::load(test_dir)?;
    let all_test: Vec<usize> = (0..test.len()).collect();
    let mut rows = Vec::with_capacity(configs.len());
    for (i, model_cfg) in configs.into_iter().enumerate() {
        log::info!(
            "sweep run {}: N={} K={} N_h={}",
            i,
            model_cfg.blocks,
            model_cfg.filters,
            model_cfg.heads
        );
        let summary = train_on(
            &model_cfg,
            cfg,
            &data,
            &out_dir.join(format!("run_{}", i)),
            None,
        )?;
        let best = load_checkpoint(&summary.best_checkpoint)?;
        let trainer = Trainer::new(best.model, cfg.lamb(), cfg.seed);
        let test_mse = trainer.evaluate(&test, &all_test, cfg.batch_size)?;
        rows.push(SweepRow {
            param_count: param_count(&model_cfg),
            config: model_cfg,
            best_epoch: summary.best_epoch,
            val_mse: summary.best_val_mse,
            test_mse,
        });
    }
    rows.sort_by(|a, b| a.test_mse.total_cmp(&b.test_mse));
    Ok(rows)
}

pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut s =
        String::from("rank,blocks,filters,heads,token_dim,params,best_epoch,val_mse,test_mse\n");
    for (rank, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.6e},{:.6e}",
            rank + 1,
            r.config.blocks,
            r.config.filters,
            r.config.heads,
            r.config.token_dim(),
            r.param_count,
            r.best_epoch,
            r.val_mse,
            r.test_mse
        );
    }
    s
}
