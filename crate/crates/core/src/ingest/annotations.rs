use std::path::Path;

use crate::{Error, Result};

/// Smallest nodule diameter in the reference standard, in mm.
pub const MIN_NODULE_DIAMETER_MM: f64 = 3.0;

/// A reference-standard nodule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoduleAnnotation {
    pub series_id: String,
    pub center_world: [f64; 3],
    pub diameter_mm: f64,
}

impl NoduleAnnotation {
    pub fn radius_mm(&self) -> f64 {
        self.diameter_mm / 2.0
    }
}

/// Reads `seriesuid,coordX,coordY,coordZ,diameter_mm` rows. Columns are
/// located by header name; any other column is ignored.
pub fn load_annotations(path: &Path) -> Result<Vec<NoduleAnnotation>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::format(path, format!("missing column `{name}`")))
    };
    let (ci, cx, cy, cz, cd) = (col("seriesuid")?, col("coordX")?, col("coordY")?, col("coordZ")?, col("diameter_mm")?);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::format(path, format!("row {}: bad number in column {i}", line + 2)))
        };
        let ann = NoduleAnnotation {
            series_id: rec.get(ci).unwrap_or_default().trim().to_string(),
            center_world: [num(cx)?, num(cy)?, num(cz)?],
            diameter_mm: num(cd)?,
        };
        if ann.diameter_mm < MIN_NODULE_DIAMETER_MM {
            return Err(Error::format(
                path,
                format!("row {}: diameter {} mm is below {MIN_NODULE_DIAMETER_MM} mm", line + 2, ann.diameter_mm),
            ));
        }
        out.push(ann);
    }
    Ok(out)
}

/// Writes annotations with the standard header.
pub fn write_annotations(path: &Path, anns: &[NoduleAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"])?;
    for a in anns {
        w.write_record([
            a.series_id.clone(),
            a.center_world[0].to_string(),
            a.center_world[1].to_string(),
            a.center_world[2].to_string(),
            a.diameter_mm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
