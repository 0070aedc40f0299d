//! Training sample streams: every fold-train candidate once, plus the 81
//! rotation/shift variants of each nodule.

use std::collections::HashMap;

use log::warn;

use super::folds::FoldSplit;
use crate::error::{Error, Result};
use crate::patching::{AugmentationSpec, PatchRecord, PatchTriple, AUGMENTATIONS_PER_NODULE};
use crate::volume_io::{Candidate, Label};

/// Lookup of cached records by candidate identity.
#[derive(Debug)]
pub struct PatchIndex<'a> {
    records: &'a [PatchRecord],
    by_key: HashMap<(String, [u64; 3]), usize>,
}

fn key(c: &Candidate) -> (String, [u64; 3]) {
    (c.series_id.clone(), c.world_mm.map(f64::to_bits))
}

impl<'a> PatchIndex<'a> {
    pub fn new(records: &'a [PatchRecord]) -> Self {
        let by_key = records
            .iter()
            .enumerate()
            .map(|(i, r)| (key(&r.triple.candidate), i))
            .collect();
        PatchIndex { records, by_key }
    }

    pub fn find(&self, c: &Candidate) -> Option<usize> {
        self.by_key.get(&key(c)).copied()
    }

    pub fn records(&self) -> &'a [PatchRecord] {
        self.records
    }
}

/// One entry of a training stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    /// Index into the patch records.
    pub record: usize,
    /// Index into [`AugmentationSpec::all`], or `None` for the original.
    pub augmentation: Option<u8>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleStream {
    pub samples: Vec<Sample>,
    pub nodules: usize,
    pub non_nodules: usize,
}

impl SampleStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Nodule-class samples (originals + augmentations).
    pub fn positive_count(&self) -> usize {
        self.samples.iter().filter(|s| s.label == Label::Nodule).count()
    }

    /// Patches for one sample.
    pub fn materialize(&self, sample: &Sample, records: &[PatchRecord]) -> Result<PatchTriple> {
        let rec = records
            .get(sample.record)
            .ok_or_else(|| Error::MissingPatch(format!("record #{}", sample.record)))?;
        match sample.augmentation {
            None => Ok(rec.triple.clone()),
            Some(i) => {
                let specs = AugmentationSpec::all();
                rec.augmentation(&specs[i as usize])
            }
        }
    }
}

/// Expected stream length: `non_nodules + 82 * nodules`.
pub fn stream_len(nodules: usize, non_nodules: usize) -> usize {
    non_nodules + (1 + AUGMENTATIONS_PER_NODULE) * nodules
}

/// Builds the (unshuffled) training stream for a fold. Unlabeled
/// candidates are skipped.
pub fn assemble_training_set(fold: &FoldSplit, candidates: &[Candidate], index: &PatchIndex<'_>) -> Result<SampleStream> {
    let mut samples = Vec::new();
    let (mut nodules, mut non_nodules) = (0, 0);
    for c in fold.train_candidates(candidates) {
        let Some(label) = c.label else { continue };
        let record = index
            .find(c)
            .ok_or_else(|| Error::MissingPatch(format!("{} at {:?}", c.series_id, c.world_mm)))?;
        samples.push(Sample {
            record,
            augmentation: None,
            label,
        });
        match label {
            Label::NonNodule => non_nodules += 1,
            Label::Nodule => {
                nodules += 1;
                if index.records()[record].context.is_none() {
                    return Err(Error::MissingPatch(format!(
                        "{} at {:?} (nodule without context crop)",
                        c.series_id, c.world_mm
                    )));
                }
                samples.extend((0..AUGMENTATIONS_PER_NODULE as u8).map(|a| Sample {
                    record,
                    augmentation: Some(a),
                    label,
                }));
            }
        }
    }
    if nodules == 0 {
        warn!("training fold has no nodule candidates; the stream contains only non-nodules");
    }
    Ok(SampleStream {
        samples,
        nodules,
        non_nodules,
    })
}
