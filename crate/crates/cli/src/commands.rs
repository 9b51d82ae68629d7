use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dota_core::config::KeyValues;
use dota_core::evaluation::{
    format_report, gamma_pass_rate, relative_error, DoseNormalization, GammaCriteria,
};
use dota_core::grid::{read_grid, write_grid};
use dota_core::model::{load_checkpoint, ModelConfig};
use dota_core::physics::{generate_dataset, DatasetSpec, PhantomLayout, PhantomSpec};
use dota_core::training::{
    format_sweep_table, hyperparameter_sweep, train, SweepGrid, TrainConfig, LAST_CHECKPOINT,
};
use dota_core::Error;

use crate::manifest::{manifest_beside, RunManifest, MANIFEST_FILE};
use crate::{bench, Cli, Command, EvalArgs, GenArgs, PredictArgs, SweepArgs, TrainArgs};

/// Gamma pass rate under `--pass-threshold`.
#[derive(Debug)]
pub struct BelowThreshold {
    pub pass_rate: f64,
    pub threshold: f64,
}

impl fmt::Display for BelowThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gamma pass rate {:.4}% is below the threshold {}%",
            self.pass_rate, self.threshold
        )
    }
}

impl std::error::Error for BelowThreshold {}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bench(a) => {
            let rows = bench::bench(&a)?;
            print!("{}", bench::format_bench(&rows));
            Ok(())
        }
    }
}

fn triple<T: std::str::FromStr>(s: &str, what: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Error::Config(format!(
                "--{} expects three comma-separated numbers, got '{}'",
                what, s
            ))
        })?;
    let [a, b, c]: [T; 3] = parts
        .try_into()
        .map_err(|_| Error::Config(format!("--{} expects three values, got '{}'", what, s)))?;
    Ok([a, b, c])
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut manifest = RunManifest::start("gen");
    let layout: PhantomLayout = a.phantom.parse()?;
    let phantom = PhantomSpec {
        seed: a.seed,
        layout,
        dims: triple(&a.dims, "dims")?,
        spacing: triple(&a.spacing, "spacing")?,
    };
    let mut spec = DatasetSpec::new(a.count, phantom);
    spec.energies_per_geometry = a.energies;
    spec.noise_level = a.noise;
    let files = generate_dataset(&spec, &a.out)?;
    println!("wrote {} files to {}", files.len(), a.out.display());
    manifest.seeds.push(("phantom".into(), a.seed));
    manifest.snapshot("", &spec.to_key_values());
    manifest.outputs = files;
    manifest.write(&a.out.join(MANIFEST_FILE))
}

fn load_model_config(path: Option<&Path>) -> Result<ModelConfig> {
    Ok(match path {
        Some(p) => ModelConfig::from_key_values(&KeyValues::load(p)?)?,
        None => ModelConfig::desk(),
    })
}

fn load_train_config(
    path: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut kv = match path {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    if let Some(e) = epochs {
        kv.set("epochs", e);
    }
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    Ok(TrainConfig::from_key_values(&kv)?)
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::Data(format!(
            "{} directory {} does not exist",
            what,
            path.display()
        ))
        .into());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut manifest = RunManifest::start("train");
    require_dir(&a.data, "data")?;
    let model_cfg = load_model_config(a.model_config.as_deref())?;
    let cfg = load_train_config(a.train_config.as_deref(), a.epochs, a.seed)?;
    let resume_path = a.out.join(LAST_CHECKPOINT);
    let resume = if a.resume {
        if !resume_path.exists() {
            return Err(Error::Data(format!(
                "--resume given but {} does not exist",
                resume_path.display()
            ))
            .into());
        }
        Some(resume_path.as_path())
    } else {
        None
    };
    let summary = train(&model_cfg, &cfg, &a.data, &a.out, resume)?;
    println!(
        "trained {} epochs ({} steps); best validation MSE {:.6e} at epoch {}",
        summary.epochs_run, summary.steps, summary.best_val_mse, summary.best_epoch
    );
    manifest.seeds.push(("train".into(), cfg.seed));
    manifest.snapshot("model.", &model_cfg.to_key_values());
    manifest.snapshot("train.", &cfg.to_key_values());
    manifest.config.set("resume", a.resume);
    manifest.inputs.push(a.data.clone());
    if let Some(p) = &a.model_config {
        manifest.inputs.push(p.clone());
    }
    if let Some(p) = &a.train_config {
        manifest.inputs.push(p.clone());
    }
    manifest.outputs = vec![
        summary.best_checkpoint.clone(),
        summary.last_checkpoint.clone(),
        a.out.join(dota_core::training::METRICS_FILE),
    ];
    manifest.write(&a.out.join(MANIFEST_FILE))
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let mut manifest = RunManifest::start("predict");
    let ckpt = load_checkpoint(&a.ckpt)?;
    let geometry = read_grid(&a.geometry)?.grid;
    let cfg = ckpt.model.config();
    if !cfg.energy_in_range(a.energy) {
        eprintln!(
            "warning: energy {} MeV is outside the trained range [{}, {}] MeV",
            a.energy, cfg.energy_range.0, cfg.energy_range.1
        );
    }
    let dose = ckpt.model.predict(&geometry, a.energy)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_grid(&a.out, &dose, Some(a.energy as f32))?;
    println!("wrote {} (max dose {:.6})", a.out.display(), dose.max());
    manifest.config.set("energy_mev", a.energy);
    manifest.snapshot("model.", &cfg.to_key_values());
    manifest.inputs = vec![a.ckpt, a.geometry];
    manifest.outputs = vec![a.out.clone()];
    manifest.write(&manifest_beside(&a.out))
}

fn criteria_from(a: &EvalArgs) -> Result<GammaCriteria> {
    let mut c = GammaCriteria::new(a.dta, a.dd / 100.0)?;
    c.masked = a.masked;
    if a.local {
        c.normalization = DoseNormalization::Local;
    }
    Ok(c)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut manifest = RunManifest::start("eval");
    let criteria = criteria_from(&a)?;
    let pred = read_grid(&a.pred)?.grid;
    let reference = read_grid(&a.reference)?.grid;
    let report = gamma_pass_rate(&pred, &reference, &criteria)?;
    let rho = relative_error(&pred, &reference)?;
    print!("{}", format_report(&report, &criteria, rho));
    if let Some(out) = &a.gamma_out {
        write_grid(out, &report.gamma_grid(), None)?;
        let kv = &mut manifest.config;
        kv.set("dta_mm", a.dta);
        kv.set("dd_percent", a.dd);
        kv.set("masked", a.masked);
        kv.set("local", a.local);
        kv.set("pass_rate", format!("{:.6}", report.pass_rate));
        kv.set("relative_error", format!("{:.6}", rho));
        manifest.inputs = vec![a.pred.clone(), a.reference.clone()];
        manifest.outputs = vec![out.clone()];
        manifest.write(&manifest_beside(out))?;
    }
    if let Some(threshold) = a.pass_threshold {
        if report.pass_rate < threshold {
            return Err(BelowThreshold {
                pass_rate: report.pass_rate,
                threshold,
            }
            .into());
        }
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut manifest = RunManifest::start("sweep");
    require_dir(&a.data, "data")?;
    require_dir(&a.test, "test")?;
    let base = load_model_config(a.model_config.as_deref())?;
    let cfg = load_train_config(a.train_config.as_deref(), None, None)?;
    let grid = if a.grid_spec.trim() == "paper" {
        SweepGrid::paper()
    } else {
        SweepGrid::parse(&a.grid_spec, &base)?
    };
    let rows = hyperparameter_sweep(&base, &grid, &cfg, &a.data, &a.test, &a.out)?;
    let table = format_sweep_table(&rows);
    print!("{}", table);
    let table_path: PathBuf = a.out.join("sweep.csv");
    fs::write(&table_path, &table).with_context(|| format!("writing {}", table_path.display()))?;
    manifest.seeds.push(("train".into(), cfg.seed));
    manifest.snapshot("model.", &base.to_key_values());
    manifest.snapshot("train.", &cfg.to_key_values());
    manifest.config.set("grid_spec", &a.grid_spec);
    manifest.inputs = vec![a.data.clone(), a.test.clone()];
    manifest.outputs = vec![table_path];
    manifest.write(&a.out.join(MANIFEST_FILE))
}

pub(crate) fn check_runs(runs: usize) -> Result<()> {
    if runs < 30 {
        bail!(Error::Config(format!(
            "--runs must be at least 30, got {}",
            runs
        )));
    }
    Ok(())
}
