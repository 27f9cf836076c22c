//! Scalar CT volumes in Hounsfield units with a JSON sidecar header.
//!
//! On disk a volume is `<name>.json` (header) next to `<name>.raw`
//! (little-endian voxels, x fastest).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::centerline::Point3;
use crate::error::{Error, Result};

/// Slack, in voxels, absorbing round-off at the volume boundary.
const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelType {
    I16,
    F32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Point3,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Point3, voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::validation(None, format!("volume dims {dims:?} must be >= 1")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::validation(None, format!("volume spacing {spacing:?} must be > 0")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::validation(
                None,
                format!("volume has {} voxels, dims {dims:?} need {n}", voxels.len()),
            ));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            voxels,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], origin: Point3, value: f32) -> Result<Self> {
        Self::new(dims, spacing, origin, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.voxels[self.index(i, j, k)]
    }

    /// World position of voxel center `(i, j, k)`.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3 {
        Point3::new(
            self.origin.x + i as f64 * self.spacing[0],
            self.origin.y + j as f64 * self.spacing[1],
            self.origin.z + k as f64 * self.spacing[2],
        )
    }

    /// Continuous voxel coordinates of a world point.
    pub fn to_voxel(&self, p: &Point3) -> [f64; 3] {
        [
            (p.x - self.origin.x) / self.spacing[0],
            (p.y - self.origin.y) / self.spacing[1],
            (p.z - self.origin.z) / self.spacing[2],
        ]
    }

    /// Trilinear interpolation; `None` outside the convex hull of voxel centers.
    pub fn sample_trilinear(&self, p: &Point3) -> Option<f32> {
        let v = self.to_voxel(p);
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let hi = (self.dims[a] - 1) as f64;
            // absorb round-off so boundary voxel centers stay inside
            let x = if (v[a] - hi).abs() < EDGE_EPS {
                hi
            } else if v[a].abs() < EDGE_EPS {
                0.0
            } else {
                v[a]
            };
            if !(x >= 0.0 && x <= hi) {
                return None;
            }
            // the upper face maps onto the last cell with weight 1
            let b = (x.floor() as usize).min(self.dims[a].saturating_sub(2));
            base[a] = b;
            frac[a] = x - b as f64;
        }
        let step = |a: usize| usize::from(self.dims[a] > 1);
        let (i, j, k) = (base[0], base[1], base[2]);
        let (di, dj, dk) = (step(0), step(1), step(2));
        let [fx, fy, fz] = frac;
        let c = |ii, jj, kk| self.get(ii, jj, kk) as f64;

        let c00 = c(i, j, k) * (1.0 - fx) + c(i + di, j, k) * fx;
        let c10 = c(i, j + dj, k) * (1.0 - fx) + c(i + di, j + dj, k) * fx;
        let c01 = c(i, j, k + dk) * (1.0 - fx) + c(i + di, j, k + dk) * fx;
        let c11 = c(i, j + dj, k + dk) * (1.0 - fx) + c(i + di, j + dj, k + dk) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        Some((c0 * (1.0 - fz) + c1 * fz) as f32)
    }

    /// Nearest voxel value; `None` outside the volume.
    pub fn sample_nearest(&self, p: &Point3) -> Option<f32> {
        let v = self.to_voxel(p);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = v[a].round();
            if !(r >= 0.0 && r <= (self.dims[a] - 1) as f64) {
                return None;
            }
            idx[a] = r as usize;
        }
        Some(self.get(idx[0], idx[1], idx[2]))
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let v = self.to_voxel(p);
        (0..3).all(|a| v[a] >= 0.0 && v[a] <= (self.dims[a] - 1) as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: VoxelType,
}

/// Raw voxel file belonging to a header path.
pub fn raw_path_for(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn read_volume(header_path: impl AsRef<Path>) -> Result<Volume> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let raw = raw_path_for(header_path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let voxels: Vec<f32> = match header.dtype {
        VoxelType::I16 => bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32)
            .collect(),
        VoxelType::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    };
    Volume::new(header.dims, header.spacing, Point3::from(header.origin), voxels)
}

/// Writes header and raw file. With `I16` voxels are rounded and saturated.
pub fn write_volume(volume: &Volume, header_path: impl AsRef<Path>, dtype: VoxelType) -> Result<()> {
    let header_path = header_path.as_ref();
    let header = VolumeHeader {
        dims: volume.dims,
        spacing: volume.spacing,
        origin: [volume.origin.x, volume.origin.y, volume.origin.z],
        dtype,
    };
    let text = serde_json::to_string(&header).expect("header serializes");
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;

    let bytes: Vec<u8> = match dtype {
        VoxelType::I16 => volume
            .voxels
            .iter()
            .flat_map(|&v| (v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16).to_le_bytes())
            .collect(),
        VoxelType::F32 => volume.voxels.iter().flat_map(|v| v.to_le_bytes()).collect(),
    };
    let raw = raw_path_for(header_path);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        let dims = [4, 3, 2];
        let mut v = Vec::new();
        for k in 0..2 {
            for j in 0..3 {
                for i in 0..4 {
                    v.push((i + 10 * j + 100 * k) as f32);
                }
            }
        }
        Volume::new(dims, [1.0, 2.0, 0.5], Point3::new(-1.0, 0.0, 0.0), v).unwrap()
    }

    #[test]
    fn trilinear_reproduces_linear_fields() {
        let vol = ramp();
        // value = i + 10 j + 100 k with i = x+1, j = y/2, k = 2z
        let p = Point3::new(0.3, 1.1, 0.2);
        let expected = (0.3 + 1.0) + 10.0 * 0.55 + 100.0 * 0.4;
        assert!((vol.sample_trilinear(&p).unwrap() as f64 - expected).abs() < 1e-4);
        // exact at the far corner
        assert_eq!(vol.sample_trilinear(&Point3::new(2.0, 4.0, 0.5)), Some(123.0));
        assert_eq!(vol.sample_trilinear(&Point3::new(2.01, 4.0, 0.5)), None);
    }

    #[test]
    fn single_voxel_axis_samples() {
        let vol = Volume::filled([1, 1, 1], [1.0; 3], Point3::origin(), 7.0).unwrap();
        assert_eq!(vol.sample_trilinear(&Point3::origin()), Some(7.0));
        assert_eq!(vol.sample_trilinear(&Point3::new(0.1, 0.0, 0.0)), None);
    }

    #[test]
    fn bad_headers_are_rejected() {
        assert!(Volume::new([0, 1, 1], [1.0; 3], Point3::origin(), vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], Point3::origin(), vec![0.0]).is_err());
        assert!(Volume::new([2, 1, 1], [1.0; 3], Point3::origin(), vec![0.0]).is_err());
    }

    #[test]
    fn disk_round_trip_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let vol = ramp();
        for dtype in [VoxelType::I16, VoxelType::F32] {
            let path = dir.path().join("vol.json");
            write_volume(&vol, &path, dtype).unwrap();
            assert_eq!(read_volume(&path).unwrap(), vol);
        }
    }
}
