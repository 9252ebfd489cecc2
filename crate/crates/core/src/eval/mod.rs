//! Scoring against the reference standard: hit matching, stage-1 counts,
//! FROC analysis and the text/CSV/PNG report.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use report::{
    render_froc_png, render_summary, write_report, ReportInput, StreamRow, REFERENCE_FROC, REFERENCE_STAGE1, REFERENCE_STREAM_SENSITIVITY,
};

use crate::ingest::NoduleAnnotation;
use crate::merge::{Candidate, CandidateRecord};
use crate::{Error, Result};

/// FPs/scan budgets at which FROC sensitivity is reported.
pub const OPERATING_POINTS: [f64; 8] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
/// The seven budgets averaged into the competition performance metric.
pub const CPM_POINTS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
/// Lower bounds (mm) of the size strata `[3,10)`, `[10,20)`, `[20,∞)`.
pub const SIZE_STRATA: [f64; 3] = [3.0, 10.0, 20.0];

/// A scored location in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub series_id: String,
    pub center_world: [f64; 3],
    pub probability: f64,
}

impl From<&Candidate> for Detection {
    fn from(c: &Candidate) -> Self {
        Self {
            series_id: c.series_id.clone(),
            center_world: c.center_world,
            probability: c.probability,
        }
    }
}

impl From<&CandidateRecord> for Detection {
    fn from(c: &CandidateRecord) -> Self {
        Self {
            series_id: c.seriesuid.clone(),
            center_world: c.center_world(),
            probability: c.probability,
        }
    }
}

/// Reference standard for a set of scans.
#[derive(Debug, Clone, Default)]
pub struct Reference {
    pub nodules: Vec<NoduleAnnotation>,
    pub scan_ids: BTreeSet<String>,
    /// Findings whose hits are neither hits nor false positives.
    pub irrelevant: Vec<NoduleAnnotation>,
}

impl Reference {
    /// Keeps only the nodules of the listed scans.
    pub fn new(nodules: &[NoduleAnnotation], scan_ids: impl IntoIterator<Item = String>) -> Self {
        let scan_ids: BTreeSet<String> = scan_ids.into_iter().collect();
        Self {
            nodules: nodules.iter().filter(|n| scan_ids.contains(&n.series_id)).cloned().collect(),
            scan_ids,
            irrelevant: Vec::new(),
        }
    }

    pub fn with_irrelevant(mut self, findings: Vec<NoduleAnnotation>) -> Self {
        self.irrelevant = findings;
        self
    }

    pub fn scan_count(&self) -> usize {
        self.scan_ids.len()
    }
}

/// Whether a world point lies within a finding's radius.
pub fn is_hit(point: [f64; 3], n: &NoduleAnnotation) -> bool {
    let d2: f64 = point.iter().zip(&n.center_world).map(|(a, b)| (a - b).powi(2)).sum();
    d2 <= n.radius_mm().powi(2)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// Best probability among candidates hitting each nodule, if any.
    pub nodule_scores: Vec<Option<f64>>,
    /// Indices of candidates that hit at least one nodule.
    pub hitting: Vec<usize>,
    /// Indices of candidates that hit nothing.
    pub false_positives: Vec<usize>,
    /// Candidates dropped because they hit an irrelevant finding only.
    pub suppressed: Vec<usize>,
    /// Series of candidates outside the reference scan list; those
    /// candidates are not scored.
    pub unknown_series: BTreeSet<String>,
}

impl MatchResult {
    pub fn hits(&self) -> usize {
        self.nodule_scores.iter().filter(|s| s.is_some()).count()
    }

    pub fn missed(&self) -> Vec<usize> {
        (0..self.nodule_scores.len()).filter(|&i| self.nodule_scores[i].is_none()).collect()
    }
}

/// Matches candidates to nodules with the within-radius rule. Several
/// candidates on one nodule make a single hit.
pub fn match_candidates(cands: &[Detection], reference: &Reference) -> MatchResult {
    let mut by_series: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, n) in reference.nodules.iter().enumerate() {
        by_series.entry(n.series_id.as_str()).or_default().push(i);
    }
    let mut out = MatchResult {
        nodule_scores: vec![None; reference.nodules.len()],
        ..MatchResult::default()
    };
    for (ci, c) in cands.iter().enumerate() {
        if !reference.scan_ids.contains(&c.series_id) {
            out.unknown_series.insert(c.series_id.clone());
            continue;
        }
        let mut hit = false;
        for &ni in by_series.get(c.series_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            if is_hit(c.center_world, &reference.nodules[ni]) {
                hit = true;
                let s = &mut out.nodule_scores[ni];
                *s = Some(s.map_or(c.probability, |v| v.max(c.probability)));
            }
        }
        if hit {
            out.hitting.push(ci);
        } else if reference
            .irrelevant
            .iter()
            .any(|f| f.series_id == c.series_id && is_hit(c.center_world, f))
        {
            out.suppressed.push(ci);
        } else {
            out.false_positives.push(ci);
        }
    }
    if !out.unknown_series.is_empty() {
        log::warn!("candidates for unknown series ignored: {:?}", out.unknown_series);
    }
    out
}

/// Threshold-free counts for a candidate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    /// Detected nodules per size stratum.
    pub detected_by_size: [usize; 3],
    /// Reference nodules per size stratum.
    pub nodules_by_size: [usize; 3],
    pub detected: usize,
    pub nodules: usize,
    pub false_positives: usize,
    pub scans: usize,
}

impl Stage1Summary {
    /// Builds a summary from raw counts.
    pub fn from_counts(detected_by_size: [usize; 3], nodules: usize, false_positives: usize, scans: usize) -> Result<Self> {
        if nodules == 0 {
            return Err(Error::NoNodules);
        }
        Ok(Self {
            detected_by_size,
            nodules_by_size: [0; 3],
            detected: detected_by_size.iter().sum(),
            nodules,
            false_positives,
            scans,
        })
    }

    pub fn sensitivity(&self) -> f64 {
        self.detected as f64 / self.nodules as f64
    }

    pub fn fps_per_scan(&self) -> f64 {
        if self.scans == 0 {
            return 0.0;
        }
        self.false_positives as f64 / self.scans as f64
    }
}

/// Stratum index of a diameter; diameters below 3 mm fall in the first.
pub fn size_stratum(diameter_mm: f64) -> usize {
    SIZE_STRATA.iter().rposition(|&lo| diameter_mm >= lo).unwrap_or(0)
}

/// Counts hits, misses and false positives, ignoring probabilities.
pub fn stage1_metrics(cands: &[Detection], reference: &Reference) -> Result<Stage1Summary> {
    if reference.nodules.is_empty() {
        return Err(Error::NoNodules);
    }
    let m = match_candidates(cands, reference);
    let mut detected_by_size = [0; 3];
    let mut nodules_by_size = [0; 3];
    for (n, s) in reference.nodules.iter().zip(&m.nodule_scores) {
        let k = size_stratum(n.diameter_mm);
        nodules_by_size[k] += 1;
        if s.is_some() {
            detected_by_size[k] += 1;
        }
    }
    Ok(Stage1Summary {
        detected_by_size,
        nodules_by_size,
        detected: m.hits(),
        nodules: reference.nodules.len(),
        false_positives: m.false_positives.len(),
        scans: reference.scan_count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fps_per_scan: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocResult {
    /// One point per distinct probability, from the highest threshold down.
    pub points: Vec<FrocPoint>,
    /// `(budget, sensitivity)` at [`OPERATING_POINTS`].
    pub operating_points: Vec<(f64, f64)>,
    pub scan_count: usize,
    pub nodule_count: usize,
}

impl FrocResult {
    /// Best sensitivity among thresholds whose FPs/scan stay within the
    /// budget; 0 when none does.
    pub fn sensitivity_at(&self, budget: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fps_per_scan <= budget + 1e-12)
            .map(|p| p.sensitivity)
            .fold(0.0, f64::max)
    }

    /// Mean sensitivity over [`CPM_POINTS`].
    pub fn cpm(&self) -> f64 {
        CPM_POINTS.iter().map(|&b| self.sensitivity_at(b)).sum::<f64>() / CPM_POINTS.len() as f64
    }
}

/// Sweeps the detection threshold over every distinct candidate
/// probability.
pub fn froc(cands: &[Detection], reference: &Reference) -> Result<FrocResult> {
    if reference.nodules.is_empty() {
        return Err(Error::NoNodules);
    }
    if let Some(c) = cands.iter().find(|c| !(0.0..=1.0).contains(&c.probability)) {
        return Err(Error::Contract(format!("probability {} outside [0, 1]", c.probability)));
    }
    let m = match_candidates(cands, reference);
    let mut hit_scores: Vec<f64> = m.nodule_scores.iter().flatten().copied().collect();
    let mut fp_scores: Vec<f64> = m.false_positives.iter().map(|&i| cands[i].probability).collect();
    hit_scores.sort_by(|a, b| b.total_cmp(a));
    fp_scores.sort_by(|a, b| b.total_cmp(a));
    let mut thresholds: Vec<f64> = hit_scores.iter().chain(&fp_scores).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let scans = reference.scan_count().max(1) as f64;
    let n = reference.nodules.len() as f64;
    let (mut ih, mut ifp) = (0, 0);
    let mut points = Vec::with_capacity(thresholds.len());
    for t in thresholds {
        while ih < hit_scores.len() && hit_scores[ih] >= t {
            ih += 1;
        }
        while ifp < fp_scores.len() && fp_scores[ifp] >= t {
            ifp += 1;
        }
        points.push(FrocPoint {
            threshold: t,
            fps_per_scan: ifp as f64 / scans,
            sensitivity: ih as f64 / n,
        });
    }
    let mut r = FrocResult {
        points,
        operating_points: Vec::new(),
        scan_count: reference.scan_count(),
        nodule_count: reference.nodules.len(),
    };
    r.operating_points = OPERATING_POINTS.iter().map(|&b| (b, r.sensitivity_at(b))).collect();
    Ok(r)
}
