//! Deterministic phantom CT scans: soft-tissue spheres as nodules and
//! randomly oriented tubes as vessel-like distractors.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{write_ground_truth, GroundTruthNodule};
use crate::volume_io::{save_volume, write_candidates, Candidate, Label, Volume, AIR_HU};

/// Placement attempts per object before giving up.
pub const MAX_PLACEMENT_RETRIES: usize = 200;

/// Distance kept between an object and the scan border, or between a
/// nodule and any other object.
const CLEARANCE_MM: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoduleSpec {
    pub count: usize,
    pub radius_mm: [f64; 2],
    pub intensity_hu: [f64; 2],
}

impl Default for NoduleSpec {
    fn default() -> Self {
        NoduleSpec {
            count: 3,
            radius_mm: [2.0, 5.0],
            intensity_hu: [-50.0, 150.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeSpec {
    pub count: usize,
    pub radius_mm: [f64; 2],
    pub length_mm: [f64; 2],
    pub intensity_hu: [f64; 2],
}

impl Default for TubeSpec {
    fn default() -> Self {
        TubeSpec {
            count: 15,
            radius_mm: [1.0, 2.5],
            length_mm: [15.0, 40.0],
            intensity_hu: [-50.0, 150.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_scans: usize,
    /// `(nx, ny, nz)` voxels.
    pub volume_shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub nodules: NoduleSpec,
    pub distractors: TubeSpec,
    pub noise_sigma_hu: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_scans: 40,
            volume_shape: [96, 96, 48],
            spacing_mm: [0.7, 0.7, 1.25],
            nodules: NoduleSpec::default(),
            distractors: TubeSpec::default(),
            noise_sigma_hu: 20.0,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    let ok = r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && (!positive || r[0] > 0.0);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be an ordered{} range, got {r:?}", if positive { " positive" } else { "" })))
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.volume_shape.contains(&0) {
            return Err(Error::InvalidConfig(format!("volume_shape must be positive, got {:?}", self.volume_shape)));
        }
        if self.spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidConfig(format!("spacing_mm must be positive, got {:?}", self.spacing_mm)));
        }
        if !(self.noise_sigma_hu.is_finite() && self.noise_sigma_hu >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise_sigma_hu must be >= 0, got {}", self.noise_sigma_hu)));
        }
        check_range("nodules.radius_mm", self.nodules.radius_mm, true)?;
        check_range("nodules.intensity_hu", self.nodules.intensity_hu, false)?;
        check_range("distractors.radius_mm", self.distractors.radius_mm, true)?;
        check_range("distractors.length_mm", self.distractors.length_mm, true)?;
        check_range("distractors.intensity_hu", self.distractors.intensity_hu, false)
    }

    fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.volume_shape[a] as f64 * self.spacing_mm[a])
    }

    /// World origin that centres the grid on zero in x/y.
    fn origin_mm(&self) -> [f64; 3] {
        let e = self.extent_mm();
        [-e[0] / 2.0, -e[1] / 2.0, -e[2]]
    }

    pub fn series_id(&self, scan: usize) -> String {
        format!("synth-{:016x}-{scan:03}", self.seed)
    }
}

/// One generated scan plus its labelled objects.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScan {
    pub volume: Volume,
    pub ground_truth: Vec<GroundTruthNodule>,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub volumes: Vec<Volume>,
    pub ground_truth: Vec<GroundTruthNodule>,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedPaths {
    pub volume_dir: PathBuf,
    pub candidates: PathBuf,
    pub ground_truth: PathBuf,
}

struct Sphere {
    center: [f64; 3],
    radius: f64,
    hu: f64,
}

struct Tube {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    hu: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist_to_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    dot(sub(p, q), sub(p, q)).sqrt()
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Uniform point at least `margin` away from every face of the box.
fn interior_point(rng: &mut ChaCha8Rng, lo: [f64; 3], extent: [f64; 3], margin: f64) -> Option<[f64; 3]> {
    let mut p = [0.0; 3];
    for a in 0..3 {
        let span = extent[a] - 2.0 * margin;
        if span < 0.0 {
            return None;
        }
        p[a] = lo[a] + margin + rng.gen::<f64>() * span;
    }
    Some(p)
}

/// Voxel bounding box (inclusive) of a world-space axis-aligned box.
fn voxel_box(vol: &Volume, lo_mm: [f64; 3], hi_mm: [f64; 3]) -> Option<([usize; 3], [usize; 3])> {
    let lo = vol.world_to_voxel(lo_mm);
    let hi = vol.world_to_voxel(hi_mm);
    let size = vol.size();
    let mut a = [0; 3];
    let mut b = [0; 3];
    for k in 0..3 {
        let l = lo[k].floor().max(0.0);
        let h = hi[k].ceil().min(size[k] as f64 - 1.0);
        if l > h {
            return None;
        }
        a[k] = l as usize;
        b[k] = h as usize;
    }
    Some((a, b))
}

/// Sets every voxel whose centre satisfies `inside` to `hu`.
fn paint(voxels: &mut [f64], vol: &Volume, lo_mm: [f64; 3], hi_mm: [f64; 3], hu: f64, inside: impl Fn([f64; 3]) -> bool) {
    let Some((lo, hi)) = voxel_box(vol, lo_mm, hi_mm) else {
        return;
    };
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                if inside(vol.voxel_to_world([x as f64, y as f64, z as f64])) {
                    voxels[vol.index(x, y, z)] = hu;
                }
            }
        }
    }
}

/// Generates scan `index` of the dataset; each scan has its own RNG stream.
pub fn generate_scan(spec: &SyntheticSpec, index: usize) -> Result<SyntheticScan> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let series = spec.series_id(index);
    let origin = spec.origin_mm();
    let extent = spec.extent_mm();
    let blank = Volume::filled(&series, spec.volume_shape, spec.spacing_mm, origin, AIR_HU)?;

    let mut spheres: Vec<Sphere> = Vec::with_capacity(spec.nodules.count);
    for n in 0..spec.nodules.count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let radius = uniform(&mut rng, spec.nodules.radius_mm);
            let Some(center) = interior_point(&mut rng, origin, extent, radius + CLEARANCE_MM) else {
                continue;
            };
            let clear = spheres
                .iter()
                .all(|s| dot(sub(s.center, center), sub(s.center, center)).sqrt() >= s.radius + radius + CLEARANCE_MM);
            if clear {
                placed = Some(Sphere {
                    center,
                    radius,
                    hu: uniform(&mut rng, spec.nodules.intensity_hu),
                });
                break;
            }
        }
        let s = placed.ok_or_else(|| {
            Error::Synthetic(format!(
                "{series}: could not place nodule {n} after {MAX_PLACEMENT_RETRIES} attempts"
            ))
        })?;
        spheres.push(s);
    }

    let mut tubes: Vec<Tube> = Vec::with_capacity(spec.distractors.count);
    for n in 0..spec.distractors.count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let radius = uniform(&mut rng, spec.distractors.radius_mm);
            let half = uniform(&mut rng, spec.distractors.length_mm) / 2.0;
            let Some(mid) = interior_point(&mut rng, origin, extent, radius + CLEARANCE_MM) else {
                continue;
            };
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let a = std::array::from_fn(|k| mid[k] - half * dir[k]);
            let b = std::array::from_fn(|k| mid[k] + half * dir[k]);
            let clear = spheres
                .iter()
                .all(|s| dist_to_segment(s.center, a, b) >= s.radius + radius + CLEARANCE_MM);
            if clear {
                placed = Some(Tube {
                    a,
                    b,
                    radius,
                    hu: uniform(&mut rng, spec.distractors.intensity_hu),
                });
                break;
            }
        }
        let t = placed.ok_or_else(|| {
            Error::Synthetic(format!(
                "{series}: could not place distractor {n} after {MAX_PLACEMENT_RETRIES} attempts"
            ))
        })?;
        tubes.push(t);
    }

    let mut hu = vec![AIR_HU as f64; blank.voxels().len()];
    for t in &tubes {
        let lo = std::array::from_fn(|k| t.a[k].min(t.b[k]) - t.radius);
        let hi = std::array::from_fn(|k| t.a[k].max(t.b[k]) + t.radius);
        paint(&mut hu, &blank, lo, hi, t.hu, |p| dist_to_segment(p, t.a, t.b) <= t.radius);
    }
    for s in &spheres {
        let lo = s.center.map(|c| c - s.radius);
        let hi = s.center.map(|c| c + s.radius);
        paint(&mut hu, &blank, lo, hi, s.hu, |p| dot(sub(p, s.center), sub(p, s.center)).sqrt() <= s.radius);
    }
    if spec.noise_sigma_hu > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma_hu).expect("validated sigma");
        for v in hu.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let voxels = hu
        .into_iter()
        .map(|v| v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
        .collect();
    let volume = Volume::new(&series, spec.volume_shape, spec.spacing_mm, origin, voxels)?;

    let mut ground_truth = Vec::with_capacity(spheres.len());
    let mut candidates = Vec::with_capacity(spheres.len() + tubes.len());
    for s in &spheres {
        ground_truth.push(GroundTruthNodule::new(&series, s.center, s.radius)?);
        candidates.push(Candidate::new(&series, s.center, Some(Label::Nodule)));
    }
    for t in &tubes {
        let mid = std::array::from_fn(|k| (t.a[k] + t.b[k]) / 2.0);
        candidates.push(Candidate::new(&series, mid, Some(Label::NonNodule)));
    }
    Ok(SyntheticScan {
        volume,
        ground_truth,
        candidates,
    })
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut out = SyntheticDataset {
        volumes: Vec::with_capacity(spec.num_scans),
        ground_truth: Vec::new(),
        candidates: Vec::new(),
    };
    for i in 0..spec.num_scans {
        let scan = generate_scan(spec, i)?;
        out.volumes.push(scan.volume);
        out.ground_truth.extend(scan.ground_truth);
        out.candidates.extend(scan.candidates);
    }
    Ok(out)
}

pub const VOLUME_DIR: &str = "volumes";
pub const CANDIDATES_FILE: &str = "candidates.csv";
pub const GROUND_TRUTH_FILE: &str = "annotations.csv";

/// Writes `<dir>/volumes/*.mhd|raw`, `<dir>/candidates.csv` and
/// `<dir>/annotations.csv`. The CSVs are written last.
pub fn export(data: &SyntheticDataset, dir: impl AsRef<Path>) -> Result<ExportedPaths> {
    let dir = dir.as_ref();
    let volume_dir = dir.join(VOLUME_DIR);
    fs::create_dir_all(&volume_dir).map_err(|e| Error::io(&volume_dir, e))?;
    for v in &data.volumes {
        save_volume(v, &volume_dir)?;
    }
    let candidates = dir.join(CANDIDATES_FILE);
    let ground_truth = dir.join(GROUND_TRUTH_FILE);
    write_candidates(&candidates, &data.candidates)?;
    write_ground_truth(&ground_truth, &data.ground_truth)?;
    Ok(ExportedPaths {
        volume_dir,
        candidates,
        ground_truth,
    })
}

#[cfg(test)]
mod tests;
