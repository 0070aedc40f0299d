//! On-disk patch cache.
//!
//! Layout (all integers and floats little endian):
//!
//! ```text
//! magic   b"MGIPATCH"
//! version u32
//! count   u64
//! record * count:
//!   series_id   u32 length + UTF-8 bytes
//!   world_mm    3 x f64
//!   label       i8   (-1 none, 0 non-nodule, 1 nodule)
//!   s1, s2, s3  3 x 2400 x f32, z-major 20x20x6
//!   context     u8 flag; when 1:
//!     size      3 x u32 (x, y, z)
//!     center    3 x i64 (voxel index of the candidate inside the crop)
//!     voxels    i16 * product(size)
//! ```
//!
//! The optional context is the raw HU neighbourhood of a nodule, wide enough
//! to regenerate every shifted augmentation without the source volume.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{
    augment_context, check_not_degenerate, crop_hu, extract_at, AugmentationSpec, Patch, PatchTriple, PATCH_LEN, PATCH_SIZE, SCALES,
};
use crate::error::{Error, Result};
use crate::volume_io::{Candidate, Label, Volume};

const MAGIC: &[u8; 8] = b"MGIPATCH";
pub const CACHE_VERSION: u32 = 1;

/// Context crop size: the largest scale plus one voxel of shift on each side.
pub const CONTEXT_SIZE: [usize; 3] = [SCALES[0][0] + 2, SCALES[0][1] + 2, SCALES[0][2] + 2];

/// Raw HU neighbourhood around a candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextCrop {
    pub volume: Volume,
    pub center: [i64; 3],
}

/// One cached candidate: its unaugmented triple plus optional context.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub triple: PatchTriple,
    pub context: Option<ContextCrop>,
}

impl PatchRecord {
    /// Extracts the record for a candidate; nodules carry a context crop.
    pub fn extract(volume: &Volume, candidate: &Candidate) -> Result<Self> {
        let triple = super::extract_multiscale(volume, candidate, [0, 0, 0])?;
        let context = if candidate.is_nodule() {
            let center = volume.nearest_voxel(candidate.world_mm);
            check_not_degenerate(volume, center)?;
            let crop = crop_hu(volume, center, CONTEXT_SIZE);
            let voxels = crop.data().iter().map(|&v| v as i16).collect();
            let ctx = Volume::new(
                volume.series_id(),
                CONTEXT_SIZE,
                volume.spacing_mm(),
                [0.0; 3],
                voxels,
            )?;
            let c = CONTEXT_SIZE.map(|n| (n / 2) as i64);
            Some(ContextCrop { volume: ctx, center: c })
        } else {
            None
        };
        Ok(PatchRecord { triple, context })
    }

    /// One augmented triple, regenerated from the context crop.
    pub fn augmentation(&self, spec: &AugmentationSpec) -> Result<PatchTriple> {
        if !self.triple.candidate.is_nodule() {
            return Err(Error::NotANodule);
        }
        let ctx = self
            .context
            .as_ref()
            .ok_or_else(|| Error::MissingPatch(format!("{} (no context crop)", self.triple.candidate.series_id)))?;
        augment_context(ctx, &self.triple.candidate, spec)
    }

    /// All 81 augmented triples in [`AugmentationSpec::all`] order.
    pub fn augmentations(&self) -> Result<Vec<PatchTriple>> {
        AugmentationSpec::all().iter().map(|s| self.augmentation(s)).collect()
    }

    /// Base triple recomputed from the context; equals `self.triple`.
    pub fn base_from_context(&self) -> Option<Result<PatchTriple>> {
        self.context.as_ref().map(|ctx| {
            let [s1, s2, s3] = extract_at(&ctx.volume, ctx.center)?;
            Ok(PatchTriple {
                s1,
                s2,
                s3,
                candidate: self.triple.candidate.clone(),
            })
        })
    }
}

fn put_patch(w: &mut impl Write, p: &Patch) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(PATCH_LEN * 4);
    for v in p.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_cache(path: impl AsRef<Path>, records: &[PatchRecord]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let f = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io)?;
    for r in records {
        let c = &r.triple.candidate;
        let id = c.series_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(id).map_err(io)?;
        for v in c.world_mm {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        let label: i8 = c.label.map_or(-1, |l| l.class() as i8);
        w.write_all(&label.to_le_bytes()).map_err(io)?;
        for p in r.triple.scales() {
            if p.size() != PATCH_SIZE {
                return Err(Error::Format(format!("patch size {:?} is not {PATCH_SIZE:?}", p.size())));
            }
            put_patch(&mut w, p).map_err(io)?;
        }
        match &r.context {
            None => w.write_all(&[0]).map_err(io)?,
            Some(ctx) => {
                w.write_all(&[1]).map_err(io)?;
                for n in ctx.volume.size() {
                    w.write_all(&(n as u32).to_le_bytes()).map_err(io)?;
                }
                for c in ctx.center {
                    w.write_all(&c.to_le_bytes()).map_err(io)?;
                }
                let mut buf = Vec::with_capacity(ctx.volume.voxels().len() * 2);
                for v in ctx.volume.voxels() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated cache at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

/// Reads a cache, rejecting unknown versions; `spacing_mm` of each context
/// crop is not stored and comes back as unit spacing.
pub fn read_cache(path: impl AsRef<Path>) -> Result<Vec<PatchRecord>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Format(format!("{} is not a patch cache", path.display())));
    }
    let version = cur.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported cache version {version}")));
    }
    let count = u64::from_le_bytes(cur.array()?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(n)?)
            .map_err(|_| Error::Format("series id is not UTF-8".into()))?
            .to_string();
        let world: [f64; 3] = [
            f64::from_le_bytes(cur.array()?),
            f64::from_le_bytes(cur.array()?),
            f64::from_le_bytes(cur.array()?),
        ];
        let label = match i8::from_le_bytes(cur.array()?) {
            -1 => None,
            c => Some(Label::from_class(c as u8).ok_or_else(|| Error::Format(format!("bad label {c}")))?),
        };
        let mut patches = Vec::with_capacity(3);
        for _ in 0..3 {
            let raw = cur.take(PATCH_LEN * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            patches.push(Patch::new(PATCH_SIZE, data)?);
        }
        let [s1, s2, s3]: [Patch; 3] = patches.try_into().expect("three patches");
        let context = match cur.take(1)?[0] {
            0 => None,
            1 => {
                let size = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
                let center = [
                    i64::from_le_bytes(cur.array()?),
                    i64::from_le_bytes(cur.array()?),
                    i64::from_le_bytes(cur.array()?),
                ];
                let len: usize = size.iter().product();
                let voxels = cur
                    .take(len * 2)?
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect();
                let volume = Volume::new(id.clone(), size, [1.0; 3], [0.0; 3], voxels)?;
                Some(ContextCrop { volume, center })
            }
            f => return Err(Error::Format(format!("bad context flag {f}"))),
        };
        out.push(PatchRecord {
            triple: PatchTriple {
                s1,
                s2,
                s3,
                candidate: Candidate::new(id, world, label),
            },
            context,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::enumerate_augmentations;

    fn blob_volume() -> Volume {
        let size = [50, 50, 30];
        let vox = (0..size.iter().product::<usize>())
            .map(|i| ((i * 7919) % 1600) as i16 - 1100)
            .collect();
        Volume::new("blob", size, [0.7, 0.7, 1.25], [-10.0, -20.0, -30.0], vox).unwrap()
    }

    #[test]
    fn context_regenerates_augmentations_exactly() {
        let v = blob_volume();
        // near a face so padding is exercised too
        for vox in [[25.0, 25.0, 15.0], [2.0, 47.0, 1.0]] {
            let c = Candidate::new("blob", v.voxel_to_world(vox), Some(Label::Nodule));
            let rec = PatchRecord::extract(&v, &c).unwrap();
            assert_eq!(rec.base_from_context().unwrap().unwrap(), rec.triple);
            assert_eq!(rec.augmentations().unwrap(), enumerate_augmentations(&v, &c).unwrap());
        }
    }

    #[test]
    fn cache_round_trip() {
        let v = blob_volume();
        let recs = vec![
            PatchRecord::extract(&v, &Candidate::new("blob", v.voxel_to_world([10.0, 10.0, 10.0]), Some(Label::Nodule)))
                .unwrap(),
            PatchRecord::extract(&v, &Candidate::new("blob", v.voxel_to_world([30.0, 20.0, 5.0]), Some(Label::NonNodule)))
                .unwrap(),
        ];
        assert!(recs[1].context.is_none());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        write_cache(&p, &recs).unwrap();
        let back = read_cache(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&recs) {
            assert_eq!(a.triple, b.triple);
            assert_eq!(a.context.as_ref().map(|c| c.volume.voxels()), b.context.as_ref().map(|c| c.volume.voxels()));
        }
        assert_eq!(back[0].augmentations().unwrap(), recs[0].augmentations().unwrap());

        let mut bytes = fs::read(&p).unwrap();
        bytes[8] = 9;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_cache(&p), Err(Error::Format(_))));
    }
}
