//! Prediction, ground-truth and FROC CSV files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FrocCurve, GroundTruthNodule};
use crate::error::{Error, Result};
use crate::volume_io::Candidate;

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    seriesuid: String,
    #[serde(rename = "coordX")]
    coord_x: f64,
    #[serde(rename = "coordY")]
    coord_y: f64,
    #[serde(rename = "coordZ")]
    coord_z: f64,
    probability: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtRow {
    seriesuid: String,
    #[serde(rename = "coordX")]
    coord_x: f64,
    #[serde(rename = "coordY")]
    coord_y: f64,
    #[serde(rename = "coordZ")]
    coord_z: f64,
    diameter_mm: f64,
}

fn csv_err(path: &Path, reason: impl ToString) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `seriesuid,coordX,coordY,coordZ,probability`.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Candidate>> {
    let path = path.as_ref();
    read_rows::<PredictionRow>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            Candidate::new(r.seriesuid, [r.coord_x, r.coord_y, r.coord_z], None)
                .with_probability(r.probability)
                .map_err(|e| csv_err(path, format!("row {}: {e}", i + 1)))
        })
        .collect()
}

/// Writes predictions; every candidate must carry a probability.
pub fn write_predictions(path: impl AsRef<Path>, predictions: &[Candidate]) -> Result<()> {
    let path = path.as_ref();
    let rows = predictions
        .iter()
        .map(|c| {
            Ok(PredictionRow {
                seriesuid: c.series_id.clone(),
                coord_x: c.world_mm[0],
                coord_y: c.world_mm[1],
                coord_z: c.world_mm[2],
                probability: super::prob(c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_rows(path, rows)
}

/// Reads `seriesuid,coordX,coordY,coordZ,diameter_mm`.
pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthNodule>> {
    let path = path.as_ref();
    read_rows::<GtRow>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            GroundTruthNodule::new(r.seriesuid, [r.coord_x, r.coord_y, r.coord_z], r.diameter_mm / 2.0)
                .map_err(|e| csv_err(path, format!("row {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_ground_truth(path: impl AsRef<Path>, gt: &[GroundTruthNodule]) -> Result<()> {
    write_rows(
        path.as_ref(),
        gt.iter().map(|g| GtRow {
            seriesuid: g.series_id.clone(),
            coord_x: g.center_mm[0],
            coord_y: g.center_mm[1],
            coord_z: g.center_mm[2],
            diameter_mm: g.diameter_mm(),
        }),
    )
}

/// `fp_per_scan,sensitivity,threshold`, one row per curve point.
pub fn write_froc_csv(path: impl AsRef<Path>, curve: &FrocCurve) -> Result<()> {
    write_rows(path.as_ref(), &curve.points)
}
