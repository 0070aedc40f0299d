//! Candidate list CSV: `seriesuid,coordX,coordY,coordZ,class`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Candidate, Label};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    seriesuid: String,
    #[serde(rename = "coordX")]
    coord_x: f64,
    #[serde(rename = "coordY")]
    coord_y: f64,
    #[serde(rename = "coordZ")]
    coord_z: f64,
    class: u8,
}

pub fn read_candidates(path: impl AsRef<Path>) -> Result<Vec<Candidate>> {
    let path = path.as_ref();
    let csv_err = |reason: String| Error::Csv {
        path: path.to_path_buf(),
        reason,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| csv_err(e.to_string()))?;
        let label = Label::from_class(row.class)
            .ok_or_else(|| csv_err(format!("row {}: class must be 0 or 1, got {}", i + 1, row.class)))?;
        out.push(Candidate::new(
            row.seriesuid,
            [row.coord_x, row.coord_y, row.coord_z],
            Some(label),
        ));
    }
    Ok(out)
}

/// Unlabeled candidates are written with class 0.
pub fn write_candidates(path: impl AsRef<Path>, candidates: &[Candidate]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for c in candidates {
        w.serialize(Row {
            seriesuid: c.series_id.clone(),
            coord_x: c.world_mm[0],
            coord_y: c.world_mm[1],
            coord_z: c.world_mm[2],
            class: c.label.map_or(0, Label::class),
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
