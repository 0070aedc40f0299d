//! Multi-scale patch extraction, nearest-neighbour resizing, HU windowing
//! and the rotation/shift augmentation set.

mod cache;

pub use cache::{read_cache, write_cache, ContextCrop, PatchRecord, CACHE_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{Candidate, Volume, AIR_HU};

/// Network input size `(x, y, z)`.
pub const PATCH_SIZE: [usize; 3] = [20, 20, 6];
/// Number of voxels in one resized patch.
pub const PATCH_LEN: usize = 20 * 20 * 6;
/// Crop sizes `(x, y, z)` for S1, S2 and S3, largest first.
pub const SCALES: [[usize; 3]; 3] = [[40, 40, 26], [30, 30, 10], [20, 20, 6]];

pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 400.0;

/// A dense real 3D array stored z-major; `size` is `(nx, ny, nz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    size: [usize; 3],
    data: Vec<f32>,
}

impl Patch {
    pub fn new(size: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != size.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!(
                "patch of size {size:?} needs {} values, got {}",
                size.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Patch { size, data })
    }

    pub fn filled(size: [usize; 3], value: f32) -> Self {
        Patch {
            size,
            data: vec![value; size.iter().product()],
        }
    }

    pub fn size(&self) -> [usize; 3] {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[(z * self.size[1] + y) * self.size[0] + x]
    }

    /// Rotates each transverse (x-y) slice by 90 degrees. Requires `nx == ny`.
    pub fn rot90(&self) -> Patch {
        let [nx, ny, nz] = self.size;
        assert_eq!(nx, ny, "transverse rotation needs square slices");
        let n = nx;
        let mut out = vec![0.0; self.data.len()];
        for z in 0..nz {
            let base = z * n * n;
            for y in 0..n {
                for x in 0..n {
                    out[base + y * n + x] = self.data[base + (n - 1 - x) * n + y];
                }
            }
        }
        Patch {
            size: self.size,
            data: out,
        }
    }

    pub fn rotated(&self, rotation: Rotation) -> Patch {
        (0..rotation.quarter_turns()).fold(self.clone(), |p, _| p.rot90())
    }
}

/// Nearest-neighbour resize with centre-aligned sampling: output index `i`
/// reads source index `floor((i + 0.5) * src / dst)`, clamped.
pub fn resize_nearest(patch: &Patch, target: [usize; 3]) -> Result<Patch> {
    if target.contains(&0) {
        return Err(Error::InvalidArgument(format!("zero-sized resize target {target:?}")));
    }
    let src = patch.size;
    if src == target {
        return Ok(patch.clone());
    }
    let maps: [Vec<usize>; 3] = std::array::from_fn(|a| nearest_indices(src[a], target[a]));
    let mut data = Vec::with_capacity(target.iter().product());
    for &sz in &maps[2] {
        for &sy in &maps[1] {
            let row = (sz * src[1] + sy) * src[0];
            data.extend(maps[0].iter().map(|&sx| patch.data[row + sx]));
        }
    }
    Ok(Patch { size: target, data })
}

fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    // floor((2i + 1) * src / (2 * dst)) in exact integer arithmetic
    (0..dst)
        .map(|i| ((2 * i + 1) * src / (2 * dst)).min(src - 1))
        .collect()
}

/// Fixed-window HU normalisation to `[0, 1]`: `clamp((hu + 1000) / 1400, 0, 1)`.
pub fn normalize_hu(patch: &Patch) -> Result<Patch> {
    if patch.data.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN in HU patch".into()));
    }
    let data = patch
        .data
        .iter()
        .map(|&hu| ((hu - HU_MIN) / (HU_MAX - HU_MIN)).clamp(0.0, 1.0))
        .collect();
    Ok(Patch {
        size: patch.size,
        data,
    })
}

/// Crop of `size` voxels around `center`; voxels outside the grid read as air.
/// Along an axis of length `n` the crop spans `center - n/2 .. center - n/2 + n`.
pub fn crop_hu(volume: &Volume, center: [i64; 3], size: [usize; 3]) -> Patch {
    let start: [i64; 3] = std::array::from_fn(|a| center[a] - (size[a] / 2) as i64);
    let mut data = Vec::with_capacity(size.iter().product());
    for z in 0..size[2] as i64 {
        for y in 0..size[1] as i64 {
            for x in 0..size[0] as i64 {
                data.push(volume.get_or_air(start[0] + x, start[1] + y, start[2] + z) as f32);
            }
        }
    }
    Patch { size, data }
}

/// Three co-centred normalised patches at decreasing field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTriple {
    pub s1: Patch,
    pub s2: Patch,
    pub s3: Patch,
    pub candidate: Candidate,
}

impl PatchTriple {
    pub fn scales(&self) -> [&Patch; 3] {
        [&self.s1, &self.s2, &self.s3]
    }

    pub fn rotated(&self, rotation: Rotation) -> PatchTriple {
        PatchTriple {
            s1: self.s1.rotated(rotation),
            s2: self.s2.rotated(rotation),
            s3: self.s3.rotated(rotation),
            candidate: self.candidate.clone(),
        }
    }
}

/// Errors if `center` lies further outside the grid than half the largest crop.
pub fn check_not_degenerate(volume: &Volume, center: [i64; 3]) -> Result<()> {
    let size = volume.size();
    for a in 0..3 {
        let outside = (-center[a]).max(center[a] - (size[a] as i64 - 1)).max(0);
        if outside > (SCALES[0][a] / 2) as i64 {
            return Err(Error::DegenerateCandidate { center, dims: size });
        }
    }
    Ok(())
}

/// The three scale patches around an integer voxel centre.
pub(crate) fn extract_at(volume: &Volume, center: [i64; 3]) -> Result<[Patch; 3]> {
    let mut out = Vec::with_capacity(3);
    for scale in SCALES {
        let crop = crop_hu(volume, center, scale);
        out.push(normalize_hu(&resize_nearest(&crop, PATCH_SIZE)?)?);
    }
    let [s1, s2, s3]: [Patch; 3] = out.try_into().expect("three scales");
    Ok([s1, s2, s3])
}

/// Extracts S1/S2/S3 for a candidate, centred on its nearest voxel plus
/// `shift_voxels` `(x, y, z)`.
pub fn extract_multiscale(volume: &Volume, candidate: &Candidate, shift_voxels: [i64; 3]) -> Result<PatchTriple> {
    if candidate.series_id != volume.series_id() {
        return Err(Error::SeriesMismatch {
            candidate: candidate.series_id.clone(),
            volume: volume.series_id().to_string(),
        });
    }
    let base = volume.nearest_voxel(candidate.world_mm);
    check_not_degenerate(volume, base)?;
    let center = std::array::from_fn(|a| base[a] + shift_voxels[a]);
    let [s1, s2, s3] = extract_at(volume, center)?;
    Ok(PatchTriple {
        s1,
        s2,
        s3,
        candidate: candidate.clone(),
    })
}

/// Rotation about the z axis in the transverse plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rotation {
    Deg90,
    Deg180,
    Deg270,
}

impl Rotation {
    pub const ALL: [Rotation; 3] = [Rotation::Deg90, Rotation::Deg180, Rotation::Deg270];

    pub fn quarter_turns(self) -> usize {
        match self {
            Rotation::Deg90 => 1,
            Rotation::Deg180 => 2,
            Rotation::Deg270 => 3,
        }
    }

    pub fn degrees(self) -> u32 {
        90 * self.quarter_turns() as u32
    }
}

/// One augmentation: a transverse rotation combined with a one-voxel shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub rotation: Rotation,
    /// `(x, y, z)` shift in source voxels, each in `{-1, 0, 1}`.
    pub shift_voxels: [i8; 3],
}

impl AugmentationSpec {
    /// All 81 specs, rotation-major, then z, y, x shift.
    pub fn all() -> Vec<AugmentationSpec> {
        let mut out = Vec::with_capacity(81);
        for rotation in Rotation::ALL {
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        out.push(AugmentationSpec {
                            rotation,
                            shift_voxels: [dx, dy, dz],
                        });
                    }
                }
            }
        }
        out
    }

    pub fn shift(&self) -> [i64; 3] {
        self.shift_voxels.map(i64::from)
    }
}

/// Number of augmented samples generated per nodule.
pub const AUGMENTATIONS_PER_NODULE: usize = 81;

/// Every rotation x shift variant of a nodule candidate. The unaugmented
/// sample is not included.
pub fn enumerate_augmentations(volume: &Volume, candidate: &Candidate) -> Result<Vec<PatchTriple>> {
    if !candidate.is_nodule() {
        return Err(Error::NotANodule);
    }
    AugmentationSpec::all()
        .into_iter()
        .map(|spec| Ok(extract_multiscale(volume, candidate, spec.shift())?.rotated(spec.rotation)))
        .collect()
}

/// One augmentation regenerated from a cached context crop.
pub(crate) fn augment_context(ctx: &ContextCrop, candidate: &Candidate, spec: &AugmentationSpec) -> Result<PatchTriple> {
    let center = std::array::from_fn(|a| ctx.center[a] + spec.shift()[a]);
    let [s1, s2, s3] = extract_at(&ctx.volume, center)?;
    Ok(PatchTriple {
        s1,
        s2,
        s3,
        candidate: candidate.clone(),
    }
    .rotated(spec.rotation))
}

/// Value used for out-of-volume voxels after normalisation.
pub fn pad_value() -> f32 {
    (AIR_HU as f32 - HU_MIN) / (HU_MAX - HU_MIN)
}
