use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::Error;
use crate::grid::{GeometryGrid, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Material {
    Air,
    Lung,
    SoftTissue,
    Bone,
}

impl Material {
    pub const ALL: [Material; 4] = [
        Material::Air,
        Material::Lung,
        Material::SoftTissue,
        Material::Bone,
    ];

    /// Relative stopping-power interval `[lo, hi]`.
    pub fn range(self) -> (f32, f32) {
        match self {
            Material::Air => (0.001, 0.05),
            Material::Lung => (0.2, 0.5),
            Material::SoftTissue => (0.9, 1.1),
            Material::Bone => (1.3, 1.9),
        }
    }

    pub fn contains(self, v: f32) -> bool {
        let (lo, hi) = self.range();
        (lo..=hi).contains(&v)
    }

    fn sample_density<R: Rng + ?Sized>(self, rng: &mut R) -> f32 {
        let (lo, hi) = self.range();
        rng.random_range(lo..=hi)
    }

    /// Slab material: mostly tissue, with lung, bone and thin air gaps.
    fn sample_slab<R: Rng + ?Sized>(rng: &mut R) -> Self {
        match rng.random_range(0..10) {
            0..=4 => Material::SoftTissue,
            5 | 6 => Material::Lung,
            7 | 8 => Material::Bone,
            _ => Material::Air,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomLayout {
    /// Uniform water (density exactly 1).
    Water,
    /// Full-width slabs stacked along the beam axis.
    Slabs,
    /// Slabs with ellipsoidal inclusions of other materials.
    Blobs,
    /// Per-sample choice: one in ten water, otherwise slabs or blobs evenly.
    Mixed,
}

impl fmt::Display for PhantomLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhantomLayout::Water => "water",
            PhantomLayout::Slabs => "slabs",
            PhantomLayout::Blobs => "blobs",
            PhantomLayout::Mixed => "mixed",
        })
    }
}

impl FromStr for PhantomLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "water" => Ok(PhantomLayout::Water),
            "slabs" => Ok(PhantomLayout::Slabs),
            "blobs" => Ok(PhantomLayout::Blobs),
            "mixed" => Ok(PhantomLayout::Mixed),
            other => Err(Error::Config(format!(
                "unknown phantom layout '{}' (water, slabs, blobs, mixed)",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub layout: PhantomLayout,
    /// `[L, H, W]`.
    pub dims: [usize; 3],
    /// `[dz, dy, dx]` in mm.
    pub spacing: [f32; 3],
}

impl PhantomSpec {
    /// Desk-scale block: 64 x 16 x 8 voxels of 3 x 1 x 1 mm.
    pub fn desk(seed: u64, layout: PhantomLayout) -> Self {
        PhantomSpec {
            seed,
            layout,
            dims: [64, 16, 8],
            spacing: [3.0, 1.0, 1.0],
        }
    }
}

pub fn water_phantom(dims: [usize; 3], spacing: [f32; 3]) -> GeometryGrid {
    VoxelGrid::filled(dims, spacing, 1.0)
}

/// Per-slice densities of a random slab stack.
fn slab_profile<R: Rng + ?Sized>(len: usize, dz: f32, rng: &mut R) -> Vec<f32> {
    let mut profile = Vec::with_capacity(len);
    let mut first = true;
    while profile.len() < len {
        let material = if first {
            // entrance slab is always tissue
            Material::SoftTissue
        } else {
            Material::sample_slab(rng)
        };
        first = false;
        let max_mm = match material {
            Material::Air => 9.0,
            Material::Bone => 24.0,
            _ => 60.0,
        };
        let thickness = ((rng.random_range(3.0..=max_mm) / dz).round() as usize).max(1);
        let density = material.sample_density(rng);
        let n = thickness.min(len - profile.len());
        profile.extend(std::iter::repeat_n(density, n));
    }
    profile
}

/// Builds a phantom for `layout`, drawing from `rng`.
pub fn generate_phantom<R: Rng + ?Sized>(
    layout: PhantomLayout,
    dims: [usize; 3],
    spacing: [f32; 3],
    rng: &mut R,
) -> GeometryGrid {
    let layout = match layout {
        PhantomLayout::Mixed => match rng.random_range(0..10) {
            0 => PhantomLayout::Water,
            1..=4 => PhantomLayout::Slabs,
            _ => PhantomLayout::Blobs,
        },
        other => other,
    };
    let [l, h, w] = dims;
    match layout {
        PhantomLayout::Water | PhantomLayout::Mixed => water_phantom(dims, spacing),
        PhantomLayout::Slabs => {
            let profile = slab_profile(l, spacing[0], rng);
            VoxelGrid::from_fn(dims, spacing, |z, _, _| profile[z])
        }
        PhantomLayout::Blobs => {
            let profile = slab_profile(l, spacing[0], rng);
            let mut grid = VoxelGrid::from_fn(dims, spacing, |z, _, _| profile[z]);
            let extent = [
                l as f32 * spacing[0],
                h as f32 * spacing[1],
                w as f32 * spacing[2],
            ];
            for _ in 0..rng.random_range(1..=4) {
                let material = Material::ALL[rng.random_range(0..4)];
                let density = material.sample_density(rng);
                let centre: Vec<f32> = extent.iter().map(|&e| rng.random_range(0.0..e)).collect();
                let radii = [
                    rng.random_range(4.0..30.0f32),
                    rng.random_range(2.0..10.0f32),
                    rng.random_range(2.0..10.0f32),
                ];
                for z in 0..l {
                    for y in 0..h {
                        for x in 0..w {
                            let p = [
                                (z as f32 + 0.5) * spacing[0],
                                (y as f32 + 0.5) * spacing[1],
                                (x as f32 + 0.5) * spacing[2],
                            ];
                            let r2: f32 = (0..3)
                                .map(|i| ((p[i] - centre[i]) / radii[i]).powi(2))
                                .sum();
                            if r2 <= 1.0 {
                                let idx = grid.index(z, y, x);
                                grid.values_mut()[idx] = density;
                            }
                        }
                    }
                }
            }
            grid
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn phantom_values_lie_in_material_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for layout in [
            PhantomLayout::Water,
            PhantomLayout::Slabs,
            PhantomLayout::Blobs,
            PhantomLayout::Mixed,
        ] {
            for _ in 0..20 {
                let g = generate_phantom(layout, [64, 16, 8], [3.0, 1.0, 1.0], &mut rng);
                assert!(g
                    .values()
                    .iter()
                    .all(|&v| Material::ALL.iter().any(|m| m.contains(v))));
            }
        }
    }

    #[test]
    fn layout_names_round_trip() {
        for l in ["water", "slabs", "blobs", "mixed"] {
            assert_eq!(l.parse::<PhantomLayout>().unwrap().to_string(), l);
        }
        assert!("bone".parse::<PhantomLayout>().is_err());
    }
}
