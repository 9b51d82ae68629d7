//! Synthetic dataset generation.
//!
//! A dataset directory holds `geom_NNNNN.dgrd` geometry files, one
//! `dose_NNNNN_K.dgrd` file per sampled energy, `samples.csv` (one row per
//! dose file: `geometry,dose,energy,group`) and `dataset.txt` with the
//! generation parameters.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::phantom::{generate_phantom, PhantomSpec};
use super::transport::{add_pseudo_mc_noise, simulate_dose, BeamSpec, ENERGY_RANGE};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::grid::{write_grid, DoseGrid, GeometryGrid};

/// Dose below this fraction of the sample maximum is zeroed.
pub const NOISE_MASK_FRACTION: f64 = 0.006;
pub const INDEX_FILE: &str = "samples.csv";
pub const DATASET_FILE: &str = "dataset.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Number of geometries.
    pub count: usize,
    pub phantom: PhantomSpec,
    pub energies_per_geometry: usize,
    pub energy_range: (f64, f64),
    pub fwhm_mm: f64,
    /// Pseudo-MC noise level as a fraction of max dose (0 disables).
    pub noise_level: f64,
    pub mask_fraction: f64,
}

impl DatasetSpec {
    pub fn new(count: usize, phantom: PhantomSpec) -> Self {
        DatasetSpec {
            count,
            phantom,
            energies_per_geometry: 4,
            energy_range: ENERGY_RANGE,
            fwhm_mm: 10.0,
            noise_level: 0.0,
            mask_fraction: NOISE_MASK_FRACTION,
        }
    }

    pub fn to_key_values(&self) -> KeyValues {
        let p = &self.phantom;
        let mut kv = KeyValues::new();
        kv.set("count", self.count);
        kv.set("seed", p.seed);
        kv.set("phantom", p.layout);
        kv.set("dims", format!("{},{},{}", p.dims[0], p.dims[1], p.dims[2]));
        kv.set(
            "spacing",
            format!("{},{},{}", p.spacing[0], p.spacing[1], p.spacing[2]),
        );
        kv.set("energies_per_geometry", self.energies_per_geometry);
        kv.set(
            "energy_range",
            format!("{},{}", self.energy_range.0, self.energy_range.1),
        );
        kv.set("fwhm_mm", self.fwhm_mm);
        kv.set("noise_level", self.noise_level);
        kv.set("mask_fraction", self.mask_fraction);
        kv
    }
}

/// Energy rounded to one decimal, uniform over `range`.
pub fn sample_energy<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> f64 {
    let e: f64 = rng.random_range(range.0..=range.1);
    ((e * 10.0).round() / 10.0).clamp(range.0, range.1)
}

/// Zeroes every value below `fraction * max(d)`.
pub fn zero_below_fraction(d: &DoseGrid, fraction: f64) -> DoseGrid {
    let threshold = fraction * d.max() as f64;
    d.map(|v| if (v as f64) < threshold { 0.0 } else { v })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub geometry: GeometryGrid,
    /// `(energy MeV, dose)` pairs.
    pub doses: Vec<(f64, DoseGrid)>,
}

/// Sample `index` of the dataset; independent of every other index.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<GeneratedSample> {
    let p = &spec.phantom;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(index as u64);
    let geometry = generate_phantom(p.layout, p.dims, p.spacing, &mut rng);
    let mut doses = Vec::with_capacity(spec.energies_per_geometry);
    for _ in 0..spec.energies_per_geometry {
        // dose headers store f32, so simulate with the stored value
        let energy = sample_energy(spec.energy_range, &mut rng) as f32 as f64;
        let noise_seed: u64 = rng.random();
        let mut beam = BeamSpec::new(energy)?;
        beam.fwhm_mm = spec.fwhm_mm;
        let mut dose = simulate_dose(&geometry, &beam);
        if spec.noise_level > 0.0 {
            dose = add_pseudo_mc_noise(&dose, spec.noise_level, noise_seed);
        }
        doses.push((energy, zero_below_fraction(&dose, spec.mask_fraction)));
    }
    Ok(GeneratedSample { geometry, doses })
}

pub fn geometry_file_name(index: usize) -> String {
    format!("geom_{:05}.dgrd", index)
}

pub fn dose_file_name(index: usize, k: usize) -> String {
    format!("dose_{:05}_{}.dgrd", index, k)
}

/// Writes the whole dataset into `out_dir` and returns the files written.
/// Output is byte-identical for a given spec whatever the thread count.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if spec.count == 0 || spec.energies_per_geometry == 0 {
        return Err(Error::Config(
            "dataset needs at least one geometry and one energy".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows: Vec<Vec<(String, String, f64)>> = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let sample = generate_sample(spec, i)?;
            let geom_name = geometry_file_name(i);
            write_grid(out_dir.join(&geom_name), &sample.geometry, None)?;
            sample
                .doses
                .iter()
                .enumerate()
                .map(|(k, (energy, dose))| {
                    let name = dose_file_name(i, k);
                    write_grid(out_dir.join(&name), dose, Some(*energy as f32))?;
                    Ok((geom_name.clone(), name, *energy))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut files = Vec::new();
    let mut index = String::from("geometry,dose,energy,group\n");
    for (i, sample_rows) in rows.iter().enumerate() {
        files.push(out_dir.join(geometry_file_name(i)));
        for (geom, dose, energy) in sample_rows {
            index.push_str(&format!("{},{},{:.1},{}\n", geom, dose, energy, i));
            files.push(out_dir.join(dose));
        }
    }
    let index_path = out_dir.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    let spec_path = out_dir.join(DATASET_FILE);
    fs::write(&spec_path, spec.to_key_values().to_text()).map_err(|e| Error::io(&spec_path, e))?;
    files.push(index_path);
    files.push(spec_path);
    Ok(files)
}
