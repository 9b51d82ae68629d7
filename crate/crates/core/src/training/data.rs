//! Loading generated datasets and assembling batches.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use super::augment_rotate180;
use crate::error::{Error, Result};
use crate::grid::{read_grid, DoseGrid, GeometryGrid};
use crate::physics::INDEX_FILE;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index into [`Dataset::geometries`].
    pub geometry: usize,
    pub dose: DoseGrid,
    pub energy: f64,
    /// Samples sharing a group share a geometry and are never split.
    pub group: usize,
    pub dose_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dir: PathBuf,
    pub geometries: Vec<GeometryGrid>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Reads `samples.csv` and every grid it references. Any unreadable or
    /// inconsistent file aborts with its path.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "geometry,dose,energy,group" => {}
            _ => {
                return Err(Error::format(
                    &index_path,
                    "missing 'geometry,dose,energy,group' header",
                ))
            }
        }
        let mut geometry_index: HashMap<String, usize> = HashMap::new();
        let mut geometries: Vec<GeometryGrid> = Vec::new();
        let mut samples = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::format(&index_path, format!("line {}: {}", n + 2, msg));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [geom, dose, energy, group] = fields[..] else {
                return Err(bad("expected 4 fields"));
            };
            let energy: f64 = energy.parse().map_err(|_| bad("bad energy"))?;
            let group: usize = group.parse().map_err(|_| bad("bad group"))?;
            let g = match geometry_index.get(geom) {
                Some(&g) => g,
                None => {
                    let file = read_grid(dir.join(geom))?;
                    if let Some(first) = geometries.first() {
                        if !file.grid.same_layout(first) {
                            return Err(Error::Data(format!(
                                "{}: dims {:?} differ from the rest of the dataset",
                                dir.join(geom).display(),
                                file.grid.dims()
                            )));
                        }
                    }
                    geometries.push(file.grid);
                    geometry_index.insert(geom.to_string(), geometries.len() - 1);
                    geometries.len() - 1
                }
            };
            let dose_path = dir.join(dose);
            let file = read_grid(&dose_path)?;
            if !file.grid.same_layout(&geometries[g]) {
                return Err(Error::Data(format!(
                    "{}: dose layout does not match geometry {}",
                    dose_path.display(),
                    geom
                )));
            }
            let header = file
                .energy
                .ok_or_else(|| Error::format(&dose_path, "dose file without energy"))?
                as f64;
            if (header - energy).abs() > 0.051 {
                return Err(Error::Data(format!(
                    "{}: header energy {} disagrees with index energy {}",
                    dose_path.display(),
                    header,
                    energy
                )));
            }
            samples.push(Sample {
                geometry: g,
                dose: file.grid,
                energy: header,
                group,
                dose_path,
            });
        }
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "{}: dataset is empty",
                index_path.display()
            )));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            geometries,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometries[0].dims()
    }

    pub fn geometry_of(&self, sample: usize) -> &GeometryGrid {
        &self.geometries[self.samples[sample].geometry]
    }

    /// Splits sample indices into `(train, validation)` by group. About
    /// `fraction` of the groups go to validation; with a single group
    /// everything is training data.
    pub fn split<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
        let mut groups: Vec<usize> = self.samples.iter().map(|s| s.group).collect();
        groups.sort_unstable();
        groups.dedup();
        groups.shuffle(rng);
        let n_val = if groups.len() < 2 {
            0
        } else {
            ((groups.len() as f64 * fraction).round() as usize).clamp(1, groups.len() - 1)
        };
        let val_groups = &groups[..n_val];
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.iter().enumerate() {
            if val_groups.contains(&s.group) {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val)
    }
}

/// Stacked inputs and targets for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, L, H, W]`
    pub geometry: Tensor<f32>,
    /// `[B, L, H, W]`
    pub dose: Tensor<f32>,
    pub energies: Vec<f64>,
}

impl Batch {
    /// Stacks the given samples; `flips[i]` applies the 180 degree rotation.
    pub fn assemble(data: &Dataset, indices: &[usize], flips: &[bool]) -> Result<Batch> {
        let [l, h, w] = data.dims();
        let per = l * h * w;
        let mut geometry = Vec::with_capacity(indices.len() * per);
        let mut dose = Vec::with_capacity(indices.len() * per);
        let mut energies = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            let s = &data.samples[i];
            let flip = flips.get(k).copied().unwrap_or(false);
            let (x, y) = augment_rotate180(data.geometry_of(i), &s.dose, flip);
            geometry.extend_from_slice(x.values());
            dose.extend_from_slice(y.values());
            energies.push(s.energy);
        }
        let shape = [indices.len(), l, h, w];
        Ok(Batch {
            geometry: Tensor::new(&shape, geometry)?,
            dose: Tensor::new(&shape, dose)?,
            energies,
        })
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }
}
