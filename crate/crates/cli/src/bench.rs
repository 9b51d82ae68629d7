use std::fmt::Write as _;
use std::time::Instant;

use anyhow::Result;
use dota_core::grid::read_grid;
use dota_core::model::load_checkpoint;
use dota_core::physics::water_phantom;

use crate::commands::check_runs;
use crate::BenchArgs;

/// Latency statistics for one batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub batch: usize,
    pub runs: usize,
    /// Mean and standard deviation of the whole-batch wall time (ms).
    pub batch_mean_ms: f64,
    pub batch_std_ms: f64,
    /// Batch time divided by batch size (ms).
    pub per_sample_mean_ms: f64,
    pub per_sample_std_ms: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Times `predict_batch` after `warmup` untimed runs.
pub fn bench(a: &BenchArgs) -> Result<Vec<BenchRow>> {
    check_runs(a.runs)?;
    let model = load_checkpoint(&a.ckpt)?.model;
    let cfg = model.config();
    let geometry = match &a.geometry {
        Some(p) => read_grid(p)?.grid,
        None => water_phantom([cfg.seq_len, cfg.height, cfg.width], [3.0, 1.0, 1.0]),
    };
    if a.batch.contains(&0) {
        return Err(dota_core::Error::Config("batch sizes must be at least 1".into()).into());
    }
    let inputs: Vec<Vec<_>> = a
        .batch
        .iter()
        .map(|&b| vec![(&geometry, a.energy); b])
        .collect();
    for batch in &inputs {
        for _ in 0..a.warmup {
            model.predict_batch(batch)?;
        }
    }
    // round-robin over batch sizes so drift in machine speed hits all of them alike
    let mut times = vec![Vec::with_capacity(a.runs); a.batch.len()];
    for _ in 0..a.runs {
        for (batch, t) in inputs.iter().zip(&mut times) {
            let start = Instant::now();
            let out = model.predict_batch(batch)?;
            t.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
    }
    let mut rows = Vec::new();
    for (&b, times) in a.batch.iter().zip(&times) {
        let (bm, bs) = mean_std(times);
        rows.push(BenchRow {
            batch: b,
            runs: a.runs,
            batch_mean_ms: bm,
            batch_std_ms: bs,
            per_sample_mean_ms: bm / b as f64,
            per_sample_std_ms: bs / b as f64,
        });
    }
    Ok(rows)
}

pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "batch,runs,batch_mean_ms,batch_std_ms,per_sample_mean_ms,per_sample_std_ms\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            r.batch,
            r.runs,
            r.batch_mean_ms,
            r.batch_std_ms,
            r.per_sample_mean_ms,
            r.per_sample_std_ms
        );
    }
    s
}
