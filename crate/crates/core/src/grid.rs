//! Voxel grids and the `DGRD` binary format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "DGRD" | version u16 | L u32 | H u32 | W u32 | dz f32 | dy f32 | dx f32 | [energy f32] | L*H*W f32
//! ```
//!
//! The energy field is present only in dose files; readers tell the two
//! apart from the file length.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"DGRD";
pub const GRID_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 12 + 12;

/// Dense `L x H x W` grid, beam axis first, with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    spacing: [f32; 3],
    values: Vec<f32>,
}

/// Relative stopping-power ratios (water = 1).
pub type GeometryGrid = VoxelGrid;
/// Dose in Gy per 10^9 primaries.
pub type DoseGrid = VoxelGrid;

impl VoxelGrid {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], values: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Data(format!(
                "grid dims must be positive, got {:?}",
                dims
            )));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Data(format!(
                "grid spacing must be positive, got {:?}",
                spacing
            )));
        }
        let n = dims.iter().product::<usize>();
        if values.len() != n {
            return Err(Error::Data(format!(
                "grid {:?} needs {} values, got {}",
                dims,
                n,
                values.len()
            )));
        }
        Ok(VoxelGrid {
            dims,
            spacing,
            values,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Self {
        let n = dims.iter().product();
        VoxelGrid {
            dims,
            spacing,
            values: vec![value; n],
        }
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut values = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    values.push(f(z, y, x));
                }
            }
        }
        VoxelGrid {
            dims,
            spacing,
            values,
        }
    }

    /// `[L, H, W]`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// `[dz, dy, dx]` in mm.
    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[self.index(z, y, x)]
    }

    /// The `H x W` slice at depth `z`.
    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.values[z * plane..][..plane]
    }

    pub fn max(&self) -> f32 {
        self.values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn same_layout(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Sum over each depth slice.
    pub fn depth_profile(&self) -> Vec<f64> {
        (0..self.dims[0])
            .map(|z| self.slice(z).iter().map(|&v| v as f64).sum())
            .collect()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        VoxelGrid {
            dims: self.dims,
            spacing: self.spacing,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Contents of a `DGRD` file.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub grid: VoxelGrid,
    /// Beam energy in MeV, present for dose files.
    pub energy: Option<f32>,
}

pub fn encode_grid(grid: &VoxelGrid, energy: Option<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 + grid.len() * 4);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    for d in grid.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in grid.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    if let Some(e) = energy {
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<GridFile> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != GRID_MAGIC {
        return Err(Error::format(path, "missing DGRD magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != GRID_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported grid version {}", version),
        ));
    }
    let dims = [
        le_u32(&bytes[6..]) as usize,
        le_u32(&bytes[10..]) as usize,
        le_u32(&bytes[14..]) as usize,
    ];
    let spacing = [
        le_f32(&bytes[18..]),
        le_f32(&bytes[22..]),
        le_f32(&bytes[26..]),
    ];
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, "grid dims overflow"))?;
    let payload = n * 4;
    let (energy, start) = if bytes.len() == HEADER_LEN + payload {
        (None, HEADER_LEN)
    } else if bytes.len() == HEADER_LEN + 4 + payload {
        (Some(le_f32(&bytes[HEADER_LEN..])), HEADER_LEN + 4)
    } else {
        return Err(Error::format(
            path,
            format!("length {} does not match dims {:?}", bytes.len(), dims),
        ));
    };
    let values: Vec<f32> = bytes[start..].chunks_exact(4).map(le_f32).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite voxel value"));
    }
    let grid =
        VoxelGrid::new(dims, spacing, values).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(GridFile { grid, energy })
}

pub fn write_grid(path: impl AsRef<Path>, grid: &VoxelGrid, energy: Option<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_grid(grid, energy)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<GridFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> VoxelGrid {
        VoxelGrid::from_fn([3, 2, 4], [3.0, 1.0, 1.0], |z, y, x| {
            (z * 100 + y * 10 + x) as f32
        })
    }

    #[test]
    fn header_layout_is_exact() {
        let g = sample();
        let bytes = encode_grid(&g, Some(104.25));
        assert_eq!(&bytes[..4], b"DGRD");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[3, 0, 0, 0]);
        assert_eq!(le_f32(&bytes[18..]), 3.0);
        assert_eq!(le_f32(&bytes[30..]), 104.25);
        assert_eq!(bytes.len(), 34 + 24 * 4);
        assert_eq!(le_f32(&bytes[34 + 4 * 5..]), g.get(0, 1, 1));
    }

    #[test]
    fn decode_rejects_corruption() {
        let p = Path::new("x.dgrd");
        let mut bytes = encode_grid(&sample(), None);
        assert!(decode_grid(&bytes[..bytes.len() - 1], p).is_err());
        bytes[0] = b'X';
        assert!(decode_grid(&bytes, p).is_err());
        let mut bytes = encode_grid(&sample(), None);
        bytes[4] = 9;
        assert!(decode_grid(&bytes, p).is_err());
    }

    #[test]
    fn grid_accessors() {
        let g = sample();
        assert_eq!(g.get(2, 1, 3), 213.0);
        assert_eq!(g.slice(1)[0], 100.0);
        assert_eq!(g.max(), 213.0);
        assert!(VoxelGrid::new([2, 2, 2], [1.0, 1.0, 1.0], vec![0.0; 7]).is_err());
        assert!(VoxelGrid::new([2, 2, 2], [0.0, 1.0, 1.0], vec![0.0; 8]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            dims in (1usize..5, 1usize..5, 1usize..5),
            energy in proptest::option::of(80.0f32..130.0),
            seed in any::<u32>(),
        ) {
            let dims = [dims.0, dims.1, dims.2];
            let g = VoxelGrid::from_fn(dims, [3.0, 1.0, 1.0], |z, y, x| {
                ((z * 31 + y * 7 + x) as u32 ^ seed) as f32 * 1e-3
            });
            let back = decode_grid(&encode_grid(&g, energy), Path::new("t")).unwrap();
            prop_assert_eq!(back.grid, g);
            prop_assert_eq!(back.energy, energy);
        }
    }
}
