//! Dose comparison metrics: gamma analysis, average relative error and the
//! depth-section failure histogram.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DoseGrid, VoxelGrid};

/// How the dose-difference criterion is turned into an absolute dose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DoseNormalization {
    /// Fraction of the maximum reference dose.
    #[default]
    Global,
    /// Fraction of the reference dose at the evaluated voxel.
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaCriteria {
    /// Distance-to-agreement, mm.
    pub dta_mm: f64,
    /// Dose difference as a fraction (0.01 = 1%).
    pub dose_diff: f64,
    /// Zero predicted voxels below `low_dose_mask_fraction * max(pred)` first.
    pub masked: bool,
    pub low_dose_mask_fraction: f64,
    pub normalization: DoseNormalization,
}

impl Default for GammaCriteria {
    fn default() -> Self {
        GammaCriteria {
            dta_mm: 3.0,
            dose_diff: 0.01,
            masked: false,
            low_dose_mask_fraction: 1e-4,
            normalization: DoseNormalization::Global,
        }
    }
}

impl GammaCriteria {
    pub fn new(dta_mm: f64, dose_diff: f64) -> Result<Self> {
        let c = GammaCriteria {
            dta_mm,
            dose_diff,
            ..Self::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dta_mm > 0.0 && self.dta_mm.is_finite()) {
            return Err(Error::Config(format!(
                "distance-to-agreement must be positive, got {}",
                self.dta_mm
            )));
        }
        if !(self.dose_diff > 0.0 && self.dose_diff < 1.0) {
            return Err(Error::Config(format!(
                "dose difference must lie in (0, 1), got {}",
                self.dose_diff
            )));
        }
        if !(0.0..1.0).contains(&self.low_dose_mask_fraction) {
            return Err(Error::Config(format!(
                "low-dose mask fraction must lie in [0, 1), got {}",
                self.low_dose_mask_fraction
            )));
        }
        Ok(())
    }
}

fn check_layout(a: &DoseGrid, b: &DoseGrid) -> Result<()> {
    if !a.same_layout(b) {
        return Err(Error::Data(format!(
            "grids differ: {:?} @ {:?} mm vs {:?} @ {:?} mm",
            a.dims(),
            a.spacing(),
            b.dims(),
            b.spacing()
        )));
    }
    Ok(())
}

/// Reference-voxel offsets sorted by scaled squared distance `|d|^2 / dta^2`.
struct OffsetTable {
    offsets: Vec<(f64, [isize; 3])>,
}

impl OffsetTable {
    fn new(dims: [usize; 3], spacing: [f32; 3], dta: f64) -> Self {
        let span = |n: usize| -(n as isize - 1)..=(n as isize - 1);
        let s = spacing.map(|v| v as f64);
        let mut offsets = Vec::new();
        for dz in span(dims[0]) {
            for dy in span(dims[1]) {
                for dx in span(dims[2]) {
                    let d2 = (dz as f64 * s[0]).powi(2)
                        + (dy as f64 * s[1]).powi(2)
                        + (dx as f64 * s[2]).powi(2);
                    offsets.push((d2 / (dta * dta), [dz, dy, dx]));
                }
            }
        }
        offsets.sort_by(|a, b| a.0.total_cmp(&b.0));
        OffsetTable { offsets }
    }
}

struct GammaContext<'a> {
    pred: &'a [f32],
    reference: &'a DoseGrid,
    dims: [usize; 3],
    criteria: &'a GammaCriteria,
    global_abs: f64,
}

impl GammaContext<'_> {
    fn dose_abs(&self, idx: usize) -> f64 {
        match self.criteria.normalization {
            DoseNormalization::Global => self.global_abs,
            DoseNormalization::Local => {
                self.criteria.dose_diff * self.reference.values()[idx] as f64
            }
        }
    }

    fn dose_term(diff: f64, abs: f64) -> f64 {
        if abs > 0.0 {
            (diff / abs).powi(2)
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    /// Squared gamma at voxel `p`, searching offsets nearest first and
    /// stopping once the spatial term alone cannot beat the best value.
    fn gamma_sq(&self, p: [usize; 3], table: &OffsetTable) -> f64 {
        let [l, h, w] = self.dims;
        let idx = (p[0] * h + p[1]) * w + p[2];
        let dp = self.pred[idx] as f64;
        let abs = self.dose_abs(idx);
        let refv = self.reference.values();
        let mut best = f64::INFINITY;
        for &(s, [dz, dy, dx]) in &table.offsets {
            if s >= best {
                break;
            }
            let (z, y, x) = (p[0] as isize + dz, p[1] as isize + dy, p[2] as isize + dx);
            if z < 0 || y < 0 || x < 0 || z >= l as isize || y >= h as isize || x >= w as isize {
                continue;
            }
            let q = (z as usize * h + y as usize) * w + x as usize;
            let g = s + Self::dose_term(dp - refv[q] as f64, abs);
            if g < best {
                best = g;
            }
        }
        best
    }
}

fn masked_prediction(pred: &DoseGrid, criteria: &GammaCriteria) -> Vec<f32> {
    if !criteria.masked {
        return pred.values().to_vec();
    }
    let threshold = criteria.low_dose_mask_fraction * pred.max() as f64;
    pred.values()
        .iter()
        .map(|&v| if (v as f64) < threshold { 0.0 } else { v })
        .collect()
}

/// Gamma index at a single voxel `p = (z, y, x)`.
pub fn gamma_value(
    p: [usize; 3],
    predicted: &DoseGrid,
    reference: &DoseGrid,
    criteria: &GammaCriteria,
) -> Result<f64> {
    check_layout(predicted, reference)?;
    criteria.validate()?;
    let dims = reference.dims();
    if (0..3).any(|i| p[i] >= dims[i]) {
        return Err(Error::Data(format!(
            "voxel {:?} outside grid {:?}",
            p, dims
        )));
    }
    let pred = masked_prediction(predicted, criteria);
    let table = OffsetTable::new(dims, reference.spacing(), criteria.dta_mm);
    let ctx = GammaContext {
        pred: &pred,
        reference,
        dims,
        criteria,
        global_abs: criteria.dose_diff * reference.max() as f64,
    };
    Ok(ctx.gamma_sq(p, &table).sqrt())
}

/// Gamma index at every voxel, in grid order.
pub fn gamma_grid(
    predicted: &DoseGrid,
    reference: &DoseGrid,
    criteria: &GammaCriteria,
) -> Result<Vec<f64>> {
    check_layout(predicted, reference)?;
    criteria.validate()?;
    let dims = reference.dims();
    let pred = masked_prediction(predicted, criteria);
    let table = OffsetTable::new(dims, reference.spacing(), criteria.dta_mm);
    let ctx = GammaContext {
        pred: &pred,
        reference,
        dims,
        criteria,
        global_abs: criteria.dose_diff * reference.max() as f64,
    };
    let [_, h, w] = dims;
    Ok((0..reference.len())
        .into_par_iter()
        .map(|i| {
            ctx.gamma_sq([i / (h * w), (i / w) % h, i % w], &table)
                .sqrt()
        })
        .collect())
}

/// Fractions of failing voxels per equal-length section along the beam axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionHistogram {
    pub fractions: Vec<f64>,
    pub failures: usize,
}

impl SectionHistogram {
    pub fn is_empty(&self) -> bool {
        self.failures == 0
    }
}

/// Distributes failing voxels (`gamma >= 1`) over `sections` depth sections;
/// voxel slice `z` of `L` falls in section `z * sections / L`.
pub fn depth_section_histogram(
    gamma: &[f64],
    dims: [usize; 3],
    sections: usize,
) -> Result<SectionHistogram> {
    let [l, h, w] = dims;
    if gamma.len() != l * h * w || sections == 0 {
        return Err(Error::Data(format!(
            "gamma grid of {} values does not match dims {:?} / {} sections",
            gamma.len(),
            dims,
            sections
        )));
    }
    let mut counts = vec![0usize; sections];
    for (i, &g) in gamma.iter().enumerate() {
        if g >= 1.0 {
            counts[(i / (h * w)) * sections / l] += 1;
        }
    }
    let failures: usize = counts.iter().sum();
    let fractions = counts
        .iter()
        .map(|&c| {
            if failures == 0 {
                0.0
            } else {
                c as f64 / failures as f64
            }
        })
        .collect();
    Ok(SectionHistogram {
        fractions,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaReport {
    pub gamma: Vec<f64>,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Percentage of evaluated voxels with gamma < 1.
    pub pass_rate: f64,
    pub evaluated: usize,
    pub passed: usize,
    /// Voxels left out of the denominator because their gamma is exactly 0.
    pub excluded: usize,
    pub sections: SectionHistogram,
}

impl GammaReport {
    /// True when no voxel was evaluated (the pass rate is then reported as 100).
    pub fn is_empty(&self) -> bool {
        self.evaluated == 0
    }

    /// The gamma values as a grid (non-finite values saturate at `f32::MAX`).
    pub fn gamma_grid(&self) -> VoxelGrid {
        let values = self
            .gamma
            .iter()
            .map(|&g| (g as f32).min(f32::MAX))
            .collect();
        VoxelGrid::new(self.dims, self.spacing, values).expect("report dims are consistent")
    }
}

/// Gamma pass rate. Without masking, voxels with gamma exactly 0 are left
/// out of the denominator.
pub fn gamma_pass_rate(
    predicted: &DoseGrid,
    reference: &DoseGrid,
    criteria: &GammaCriteria,
) -> Result<GammaReport> {
    let gamma = gamma_grid(predicted, reference, criteria)?;
    let mut evaluated = 0;
    let mut passed = 0;
    let mut excluded = 0;
    for &g in &gamma {
        if !criteria.masked && g == 0.0 {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        if g < 1.0 {
            passed += 1;
        }
    }
    let pass_rate = if evaluated == 0 {
        100.0
    } else {
        100.0 * passed as f64 / evaluated as f64
    };
    let sections = depth_section_histogram(&gamma, reference.dims(), 4)?;
    Ok(GammaReport {
        gamma,
        dims: reference.dims(),
        spacing: reference.spacing(),
        pass_rate,
        evaluated,
        passed,
        excluded,
        sections,
    })
}

/// Average relative error in percent: mean |y - y_ref| over all voxels,
/// divided by the maximum reference dose.
pub fn relative_error(predicted: &DoseGrid, reference: &DoseGrid) -> Result<f64> {
    check_layout(predicted, reference)?;
    let n = reference.len() as f64;
    let mean_abs: f64 = predicted
        .values()
        .iter()
        .zip(reference.values())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / n;
    if mean_abs == 0.0 {
        return Ok(0.0);
    }
    let max = reference.max() as f64;
    if max <= 0.0 {
        return Err(Error::Numeric(
            "relative error undefined for an all-zero reference".into(),
        ));
    }
    Ok(100.0 * mean_abs / max)
}

/// Index of the slice with the largest integrated dose (first on ties).
pub fn peak_depth_index(dose: &DoseGrid) -> usize {
    let profile = dose.depth_profile();
    let mut best = 0;
    for (z, &v) in profile.iter().enumerate() {
        if v > profile[best] {
            best = z;
        }
    }
    best
}

/// Human-readable summary of a comparison.
pub fn format_report(report: &GammaReport, criteria: &GammaCriteria, rho: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "gamma criteria: {} mm / {}% ({}, {})",
        criteria.dta_mm,
        100.0 * criteria.dose_diff,
        if criteria.masked {
            "masked"
        } else {
            "unmasked"
        },
        match criteria.normalization {
            DoseNormalization::Global => "global",
            DoseNormalization::Local => "local",
        }
    );
    let _ = writeln!(s, "gamma pass rate: {:.4}%", report.pass_rate);
    let _ = writeln!(
        s,
        "evaluated voxels: {} (passed {}, excluded gamma=0 {}){}",
        report.evaluated,
        report.passed,
        report.excluded,
        if report.is_empty() {
            " [empty: no voxel evaluated]"
        } else {
            ""
        }
    );
    let _ = writeln!(s, "relative error: {:.6}%", rho);
    let fr: Vec<String> = report
        .sections
        .fractions
        .iter()
        .map(|f| format!("{:.4}", f))
        .collect();
    let _ = writeln!(
        s,
        "failures by depth section: [{}] ({} failing voxels)",
        fr.join(", "),
        report.sections.failures
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3], v: f32) -> DoseGrid {
        VoxelGrid::filled(dims, [3.0, 1.0, 1.0], v)
    }

    #[test]
    fn identical_grids_have_zero_gamma_and_empty_report() {
        let a = VoxelGrid::from_fn([4, 3, 3], [3.0, 1.0, 1.0], |z, y, x| {
            (z + y + x) as f32 + 1.0
        });
        let r = gamma_pass_rate(&a, &a, &GammaCriteria::default()).unwrap();
        assert!(r.gamma.iter().all(|&g| g == 0.0));
        assert!(r.is_empty());
        assert_eq!(r.pass_rate, 100.0);
    }

    #[test]
    fn single_voxel_gap_of_one_criterion_fails() {
        let reference = grid([1, 1, 1], 100.0);
        let pred = grid([1, 1, 1], 101.0);
        let g = gamma_value([0, 0, 0], &pred, &reference, &GammaCriteria::default()).unwrap();
        assert_eq!(g, 1.0);
        let r = gamma_pass_rate(&pred, &reference, &GammaCriteria::default()).unwrap();
        assert_eq!(r.pass_rate, 0.0);
    }

    #[test]
    fn uniform_half_percent_offset_passes() {
        let reference = grid([6, 5, 4], 1.0);
        let pred = grid([6, 5, 4], 1.005);
        let r = gamma_pass_rate(&pred, &reference, &GammaCriteria::default()).unwrap();
        assert!(r.gamma.iter().all(|&g| (g - 0.5).abs() < 1e-4));
        assert_eq!(r.pass_rate, 100.0);
    }

    #[test]
    fn relative_error_example() {
        let reference = VoxelGrid::new([3, 1, 1], [1.0; 3], vec![1.0, 2.0, 4.0]).unwrap();
        let pred = VoxelGrid::new([3, 1, 1], [1.0; 3], vec![1.0, 2.0, 3.0]).unwrap();
        let rho = relative_error(&pred, &reference).unwrap();
        assert!((rho - 100.0 / 12.0).abs() < 1e-9);
        assert_eq!(relative_error(&reference, &reference).unwrap(), 0.0);
    }

    #[test]
    fn histogram_edge_cases() {
        let h = depth_section_histogram(&[0.0; 8], [8, 1, 1], 4).unwrap();
        assert!(h.is_empty());
        assert_eq!(h.fractions, vec![0.0; 4]);
        let mut g = vec![0.0; 8];
        g[6] = 1.0;
        g[7] = 3.0;
        let h = depth_section_histogram(&g, [8, 1, 1], 4).unwrap();
        assert_eq!(h.fractions, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = grid([2, 2, 2], 1.0);
        let b = VoxelGrid::filled([2, 2, 2], [1.0, 1.0, 1.0], 1.0);
        assert!(gamma_pass_rate(&a, &b, &GammaCriteria::default()).is_err());
        assert!(GammaCriteria::new(0.0, 0.01).is_err());
        assert!(GammaCriteria::new(3.0, 1.5).is_err());
    }
}
