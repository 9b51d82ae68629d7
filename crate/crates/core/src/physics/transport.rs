use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{DoseGrid, GeometryGrid, VoxelGrid};

/// Bragg-Kleeman coefficient, mm MeV^-p.
pub const RANGE_ALPHA: f64 = 0.022;
/// Bragg-Kleeman exponent.
pub const RANGE_EXPONENT: f64 = 1.77;
/// Peak width as a fraction of the range.
pub const PEAK_WIDTH_FRACTION: f64 = 0.012;
/// Lateral sigma growth per mm of traversed depth.
pub const SIGMA_GROWTH: f64 = 0.02;
/// Supported beam energies, MeV.
pub const ENERGY_RANGE: (f64, f64) = (80.0, 130.0);

const PEAK_WEIGHT: f64 = 1.5;
const ENTRANCE_LEVEL: f64 = 0.3;
const ENTRANCE_SLOPE: f64 = 0.2;
/// Dose is exactly zero beyond `R (1 + CUTOFF_WIDTHS * width)`.
const CUTOFF_WIDTHS: f64 = 5.0;
const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

/// Water range in mm for a proton energy in MeV.
pub fn csda_range(energy: f64) -> f64 {
    RANGE_ALPHA * energy.powf(RANGE_EXPONENT)
}

/// Depth-dose shape as a function of `u = wepl / R`.
fn bragg_shape(u: f64) -> f64 {
    let s = PEAK_WIDTH_FRACTION;
    let t = (u - 1.0) / s;
    let entrance =
        (ENTRANCE_LEVEL + ENTRANCE_SLOPE * u) * 0.5 * libm::erfc(t / std::f64::consts::SQRT_2);
    entrance + PEAK_WEIGHT * (-0.5 * t * t).exp()
}

/// Maximum of [`bragg_shape`]; the shape is scale-free so this is a constant.
fn bragg_peak_value() -> f64 {
    static PEAK: OnceLock<f64> = OnceLock::new();
    *PEAK.get_or_init(|| {
        let (mut lo, mut hi) = (1.0 - 4.0 * PEAK_WIDTH_FRACTION, 1.0 + PEAK_WIDTH_FRACTION);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if bragg_shape(m1) < bragg_shape(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        bragg_shape(0.5 * (lo + hi))
    })
}

/// Relative depth dose (peak 1) at water-equivalent depth `wepl` mm.
pub fn bragg_depth_dose(energy: f64, wepl: f64) -> f64 {
    let range = csda_range(energy);
    let u = wepl.max(0.0) / range;
    if u > 1.0 + CUTOFF_WIDTHS * PEAK_WIDTH_FRACTION {
        return 0.0;
    }
    bragg_shape(u) / bragg_peak_value()
}

/// Antiderivative of [`bragg_shape`] in `u`.
fn bragg_shape_integral(u: f64) -> f64 {
    let s = PEAK_WIDTH_FRACTION;
    let c = s * std::f64::consts::SQRT_2;
    let x = (u - 1.0) / c;
    let erfc = libm::erfc(x);
    let gauss = (-x * x).exp() / std::f64::consts::PI.sqrt();
    let a = ENTRANCE_LEVEL + ENTRANCE_SLOPE;
    let b = ENTRANCE_SLOPE * c;
    let entrance =
        0.5 * c * (a * (x * erfc - gauss) + b * (0.5 * (x * x - 0.5) * erfc - 0.5 * x * gauss));
    let peak = PEAK_WEIGHT * s * (std::f64::consts::PI / 2.0).sqrt() * libm::erf(x);
    entrance + peak
}

/// Mean of [`bragg_depth_dose`] over the water-equivalent interval
/// `[wepl_in, wepl_out]` that one voxel spans.
pub fn bragg_voxel_dose(energy: f64, wepl_in: f64, wepl_out: f64) -> f64 {
    let range = csda_range(energy);
    let cutoff = 1.0 + CUTOFF_WIDTHS * PEAK_WIDTH_FRACTION;
    let u0 = wepl_in.max(0.0) / range;
    let u1 = wepl_out.max(0.0) / range;
    if u1 - u0 < 1e-9 {
        return bragg_depth_dose(energy, 0.5 * (wepl_in + wepl_out));
    }
    if u0 >= cutoff {
        return 0.0;
    }
    let mean = (bragg_shape_integral(u1.min(cutoff)) - bragg_shape_integral(u0)) / (u1 - u0);
    mean / bragg_peak_value()
}

/// Water-equivalent depth in mm at every voxel centre, integrated along
/// the beam axis.
pub fn radiological_depth(x: &GeometryGrid) -> Vec<f64> {
    let [l, h, w] = x.dims();
    let dz = x.spacing()[0] as f64;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    let mut acc = vec![0.0f64; plane];
    for z in 0..l {
        let slice = x.slice(z);
        for i in 0..plane {
            let step = slice[i] as f64 * dz;
            out[z * plane + i] = acc[i] + 0.5 * step;
            acc[i] += step;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamSpec {
    /// MeV.
    pub energy: f64,
    /// Lateral FWHM at entry, mm.
    pub fwhm_mm: f64,
    /// Lateral offset `(y, x)` of the beam axis from the block centre, mm.
    pub offset_mm: (f64, f64),
}

impl BeamSpec {
    pub fn new(energy: f64) -> Result<Self> {
        if !(ENERGY_RANGE.0..=ENERGY_RANGE.1).contains(&energy) {
            return Err(Error::Config(format!(
                "beam energy {} MeV outside [{}, {}]",
                energy, ENERGY_RANGE.0, ENERGY_RANGE.1
            )));
        }
        Ok(BeamSpec {
            energy,
            fwhm_mm: 10.0,
            offset_mm: (0.0, 0.0),
        })
    }

    pub fn sigma0(&self) -> f64 {
        self.fwhm_mm / FWHM_PER_SIGMA
    }

    /// Lateral sigma after `depth` mm of travel.
    pub fn sigma_at(&self, depth: f64) -> f64 {
        self.sigma0() + SIGMA_GROWTH * depth
    }
}

/// Analytic pencil-beam dose: the depth dose averaged over each voxel's
/// water-equivalent extent times an area-normalised lateral Gaussian.
pub fn simulate_dose(x: &GeometryGrid, beam: &BeamSpec) -> DoseGrid {
    let [l, h, w] = x.dims();
    let [dz, dy, dx] = x.spacing().map(|s| s as f64);
    let plane = h * w;
    let mut entry = vec![0.0f64; plane];
    let cy = 0.5 * h as f64 * dy + beam.offset_mm.0;
    let cx = 0.5 * w as f64 * dx + beam.offset_mm.1;
    let s0 = beam.sigma0();
    let mut values = Vec::with_capacity(x.len());
    for z in 0..l {
        let slice = x.slice(z);
        let sigma = beam.sigma_at((z as f64 + 0.5) * dz);
        let area = (s0 * s0) / (sigma * sigma);
        for y in 0..h {
            let ry = (y as f64 + 0.5) * dy - cy;
            for xi in 0..w {
                let rx = (xi as f64 + 0.5) * dx - cx;
                let lateral = (-(ry * ry + rx * rx) / (2.0 * sigma * sigma)).exp() * area;
                let i = y * w + xi;
                let exit = entry[i] + slice[i] as f64 * dz;
                let depth_dose = bragg_voxel_dose(beam.energy, entry[i], exit);
                entry[i] = exit;
                values.push((depth_dose * lateral) as f32);
            }
        }
    }
    VoxelGrid::new(x.dims(), x.spacing(), values).expect("dims come from the geometry")
}

/// Adds zero-mean Gaussian noise with standard deviation `level * max(d)`
/// to every nonzero voxel.
pub fn add_pseudo_mc_noise(d: &DoseGrid, level: f64, seed: u64) -> DoseGrid {
    let std = level * d.max().max(0.0) as f64;
    if std <= 0.0 {
        return d.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("std is positive and finite");
    let mut out = d.clone();
    for v in out.values_mut().iter_mut().filter(|v| **v != 0.0) {
        *v = (*v as f64 + normal.sample(&mut rng)) as f32;
    }
    out
}
