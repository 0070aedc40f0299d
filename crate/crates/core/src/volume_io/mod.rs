//! CT volumes, candidate records and world/voxel geometry.
//!
//! Voxel arrays are stored z-major: the linear index of voxel `(x, y, z)` is
//! `(z * ny + y) * nx + x`. Sizes, spacing and origin are all expressed in
//! `(x, y, z)` order, mirroring the MetaImage header.

mod candidates;
mod metaimage;

pub use candidates::{read_candidates, write_candidates};
pub use metaimage::{load_volume, save_volume};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper bound on slice thickness for admissible scans.
pub const MAX_SLICE_THICKNESS_MM: f64 = 2.5;

/// Hounsfield value used for anything outside a scan.
pub const AIR_HU: i16 = -1000;

/// A CT series: an immutable HU voxel grid with its physical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    series_id: String,
    size: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    slice_thickness_mm: f64,
    voxels: Vec<i16>,
}

impl Volume {
    /// Builds a volume; `size` is `(nx, ny, nz)` and `voxels` is z-major.
    /// Slice thickness is taken from the z spacing.
    pub fn new(
        series_id: impl Into<String>,
        size: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        voxels: Vec<i16>,
    ) -> Result<Self> {
        if size.contains(&0) {
            return Err(Error::InvalidVolume(format!(
                "every dimension must be >= 1, got {size:?}"
            )));
        }
        if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive, got {spacing_mm:?}"
            )));
        }
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "origin must be finite, got {origin_mm:?}"
            )));
        }
        let expected = size[0] * size[1] * size[2];
        if voxels.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "expected {expected} voxels for size {size:?}, got {}",
                voxels.len()
            )));
        }
        Ok(Volume {
            series_id: series_id.into(),
            size,
            spacing_mm,
            origin_mm,
            slice_thickness_mm: spacing_mm[2],
            voxels,
        })
    }

    /// Constant-valued volume; mostly useful for tests and phantoms.
    pub fn filled(
        series_id: impl Into<String>,
        size: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        value: i16,
    ) -> Result<Self> {
        let n = size.iter().product();
        Self::new(series_id, size, spacing_mm, origin_mm, vec![value; n])
    }

    pub fn series_id(&self) -> &str {
        &self.series_id
    }

    /// Grid size `(nx, ny, nz)`.
    pub fn size(&self) -> [usize; 3] {
        self.size
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn slice_thickness_mm(&self) -> f64 {
        self.slice_thickness_mm
    }

    /// Z-major voxel buffer.
    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<i16> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.size[1] + y) * self.size[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[self.index(x, y, z)]
    }

    /// HU at a possibly out-of-range integer voxel; outside reads as air.
    #[inline]
    pub fn get_or_air(&self, x: i64, y: i64, z: i64) -> i16 {
        let [nx, ny, nz] = self.size;
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            AIR_HU
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    /// Continuous voxel coordinate `(world - origin) / spacing`, `(x, y, z)`.
    pub fn world_to_voxel(&self, world_mm: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (world_mm[a] - self.origin_mm[a]) / self.spacing_mm[a])
    }

    /// Inverse of [`Volume::world_to_voxel`].
    pub fn voxel_to_world(&self, voxel: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| voxel[a] * self.spacing_mm[a] + self.origin_mm[a])
    }

    /// Nearest voxel to a world point. Halves round toward +inf.
    pub fn nearest_voxel(&self, world_mm: [f64; 3]) -> [i64; 3] {
        let v = self.world_to_voxel(world_mm);
        std::array::from_fn(|a| round_half_up(v[a]))
    }
}

/// Round to nearest integer with ties toward +inf.
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Keeps volumes whose slice thickness does not exceed `max_mm`, in order.
pub fn filter_by_thickness(volumes: impl IntoIterator<Item = Volume>, max_mm: f64) -> Vec<Volume> {
    assert!(max_mm > 0.0, "max slice thickness must be positive");
    volumes
        .into_iter()
        .filter(|v| v.slice_thickness_mm() <= max_mm)
        .collect()
}

/// Binary candidate class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    NonNodule,
    Nodule,
}

impl Label {
    pub fn from_class(class: u8) -> Option<Self> {
        match class {
            0 => Some(Label::NonNodule),
            1 => Some(Label::Nodule),
            _ => None,
        }
    }

    pub fn class(self) -> u8 {
        match self {
            Label::NonNodule => 0,
            Label::Nodule => 1,
        }
    }
}

/// A candidate location proposed by an upstream detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub series_id: String,
    pub world_mm: [f64; 3],
    pub label: Option<Label>,
    probability: Option<f64>,
}

impl Candidate {
    pub fn new(series_id: impl Into<String>, world_mm: [f64; 3], label: Option<Label>) -> Self {
        Candidate {
            series_id: series_id.into(),
            world_mm,
            label,
            probability: None,
        }
    }

    /// Attaches a nodule probability; rejects values outside `[0, 1]`.
    pub fn with_probability(mut self, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "probability must lie in [0, 1], got {p}"
            )));
        }
        self.probability = Some(p);
        Ok(self)
    }

    pub fn probability(&self) -> Option<f64> {
        self.probability
    }

    pub fn is_nodule(&self) -> bool {
        self.label == Some(Label::Nodule)
    }
}
