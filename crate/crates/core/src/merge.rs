//! Turning probability maps into candidate lists: contour extraction,
//! same-slice deduplication, cross-slice linking and stream fusion.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::ingest::Geometry;
use crate::label::{label_2d, Connectivity2};
use crate::mip::MipStack;
use crate::{Error, Result};

/// Default binarization threshold for probability maps.
pub const DEFAULT_THRESHOLD: f32 = 0.5;
/// Two boxes are the same object when centre distance divided by the larger
/// box side is at most this.
pub const DISTANCE_RATIO: f64 = 1.1;
/// Boxes more elongated than this are not nodule-like.
pub const MAX_ASPECT: f64 = 4.0;
/// Boxes with a smaller pixel area are dropped.
pub const MIN_BOX_AREA: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub series_id: String,
    /// Fractional voxel centre (x, y, z); z is a slice index.
    pub center_voxel: [f64; 3],
    pub center_world: [f64; 3],
    /// Side of the predicted square, in pixels.
    pub bbox_side: u32,
    /// Same side in mm along x.
    pub bbox_mm: f64,
    /// Slab thicknesses (mm) of the streams that produced this candidate.
    pub source_thicknesses: BTreeSet<u32>,
    pub probability: f64,
}

impl Candidate {
    /// Nearest voxel index `[z, y, x]`.
    pub fn voxel_index(&self) -> [usize; 3] {
        let r = |v: f64| v.round().max(0.0) as usize;
        [r(self.center_voxel[2]), r(self.center_voxel[1]), r(self.center_voxel[0])]
    }

    fn order_key(&self) -> (i64, i64, i64, u32) {
        // millivoxel precision keeps the key totally ordered
        let q = |v: f64| (v * 1000.0).round() as i64;
        (q(self.center_voxel[2]), q(self.center_voxel[0]), q(self.center_voxel[1]), self.bbox_side)
    }

    fn xy_ratio(&self, other: &Candidate) -> f64 {
        let dx = self.center_voxel[0] - other.center_voxel[0];
        let dy = self.center_voxel[1] - other.center_voxel[1];
        let side = self.bbox_side.max(other.bbox_side) as f64;
        (dx * dx + dy * dy).sqrt() / side
    }

    fn max_thickness(&self) -> u32 {
        self.source_thicknesses.iter().copied().max().unwrap_or(1)
    }
}

fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| {
        a.order_key()
            .cmp(&b.order_key())
            .then_with(|| a.source_thicknesses.cmp(&b.source_thicknesses))
    });
}

/// Foreground components (8-connected) that are not nested inside a hole
/// of another component. A component is outer when it touches the image
/// border or borders the background region connected to the border.
fn outer_components(mask: &Array2<bool>) -> (Array2<u32>, Vec<bool>) {
    let (h, w) = mask.dim();
    let (fg, sizes) = label_2d(mask, Connectivity2::Eight);
    let (bg, bg_sizes) = label_2d(&mask.mapv(|v| !v), Connectivity2::Four);
    let mut bg_outside = vec![false; bg_sizes.len()];
    let mut outer = vec![false; sizes.len()];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                bg_outside[bg[[y, x]] as usize] = true;
                outer[fg[[y, x]] as usize] = true;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let id = fg[[y, x]];
            if id == 0 || outer[id as usize] {
                continue;
            }
            let neighbours = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
            if neighbours
                .iter()
                .any(|&(ny, nx)| ny < h && nx < w && bg[[ny, nx]] != 0 && bg_outside[bg[[ny, nx]] as usize])
            {
                outer[id as usize] = true;
            }
        }
    }
    outer[0] = false;
    (fg, outer)
}

/// Binarizes each map at `threshold` and returns one candidate per outer
/// contour whose bounding box is nodule-like. Maps are indexed `[k, y, x]`
/// like the stack they came from.
pub fn extract_candidates(maps: &Array3<f32>, stack: &MipStack, threshold: f32) -> Result<Vec<Candidate>> {
    if maps.dim() != stack.images.dim() {
        return Err(Error::Contract(format!(
            "maps {:?} do not match stack {:?}",
            maps.dim(),
            stack.images.dim()
        )));
    }
    let mut out = Vec::new();
    for (k, map) in maps.axis_iter(Axis(0)).enumerate() {
        let mask = map.mapv(|v| v >= threshold);
        if !mask.iter().any(|&v| v) {
            continue;
        }
        let (labels, outer) = outer_components(&mask);
        // (min_x, min_y, max_x, max_y)
        let mut boxes = vec![(usize::MAX, usize::MAX, 0usize, 0usize); outer.len()];
        for ((y, x), &id) in labels.indexed_iter() {
            if id == 0 {
                continue;
            }
            let b = &mut boxes[id as usize];
            *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
        for (id, &(x0, y0, x1, y1)) in boxes.iter().enumerate().skip(1) {
            if !outer[id] {
                continue;
            }
            let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
            let aspect = bw.max(bh) as f64 / bw.min(bh) as f64;
            if aspect > MAX_ASPECT || bw * bh < MIN_BOX_AREA {
                continue;
            }
            out.push(candidate_at(
                stack,
                [(x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0, k as f64],
                bw.max(bh) as u32,
            ));
        }
    }
    Ok(out)
}

fn candidate_at(stack: &MipStack, center_voxel: [f64; 3], side: u32) -> Candidate {
    let g: &Geometry = &stack.geometry;
    Candidate {
        series_id: stack.series_id.clone(),
        center_voxel,
        center_world: g.voxel_to_world(center_voxel),
        bbox_side: side,
        bbox_mm: side as f64 * g.spacing[0],
        source_thicknesses: BTreeSet::from([stack.slab_thickness]),
        probability: 1.0,
    }
}

/// Merges same-slice candidates closer than the distance-ratio rule,
/// keeping the larger box (ties: smaller (z, x, y) centre) and uniting
/// their sources. Output is sorted by (z, x, y).
pub fn dedup_distance_ratio(cands: &[Candidate]) -> Vec<Candidate> {
    let mut order: Vec<Candidate> = cands.to_vec();
    sort_candidates(&mut order);
    // stable: larger boxes first, equal sizes keep (z, x, y) order
    order.sort_by(|a, b| b.bbox_side.cmp(&a.bbox_side));
    let mut kept: Vec<Candidate> = Vec::new();
    for c in order {
        let same_slice = |k: &&mut Candidate| k.series_id == c.series_id && k.center_voxel[2] == c.center_voxel[2];
        match kept.iter_mut().filter(same_slice).find(|k| k.xy_ratio(&c) <= DISTANCE_RATIO) {
            Some(k) => {
                k.source_thicknesses.extend(c.source_thicknesses.iter().copied());
                k.probability = k.probability.max(c.probability);
            }
            None => kept.push(c),
        }
    }
    sort_candidates(&mut kept);
    kept
}

/// Union-find grouping under `linked`, then one representative per group:
/// the member at the lower median of the (z, x, y) order. The group's
/// sources are united and its box is the group's largest.
fn group_and_pick(cands: &[Candidate], linked: impl Fn(&Candidate, &Candidate) -> bool) -> Vec<Candidate> {
    let mut items = cands.to_vec();
    sort_candidates(&mut items);
    let n = items.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if items[i].series_id == items[j].series_id && linked(&items[i], &items[j]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = find(&mut parent, i);
        groups[r].push(i);
    }
    let mut out: Vec<Candidate> = groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            let mut rep = items[g[(g.len() - 1) / 2]].clone();
            for &i in &g {
                rep.source_thicknesses.extend(items[i].source_thicknesses.iter().copied());
                rep.probability = rep.probability.max(items[i].probability);
                if items[i].bbox_side > rep.bbox_side {
                    rep.bbox_side = items[i].bbox_side;
                    rep.bbox_mm = items[i].bbox_mm;
                }
            }
            rep
        })
        .collect();
    sort_candidates(&mut out);
    out
}

/// Groups detections of one object on neighbouring outputs: the distance
/// ratio holds in (x, y) and the slice indices differ by at most the slab
/// thickness of either candidate.
pub fn link_across_slices(cands: &[Candidate]) -> Vec<Candidate> {
    group_and_pick(cands, |a, b| {
        let tol = a.max_thickness().max(b.max_thickness()) as f64;
        (a.center_voxel[2] - b.center_voxel[2]).abs() <= tol && a.xy_ratio(b) <= DISTANCE_RATIO
    })
}

/// Unites the per-stream lists and groups cross-stream duplicates with the
/// rule of [`link_across_slices`].
///
/// Candidates are visited thinnest source slab first, then in (z, x, y)
/// order. Each one joins the matching group whose anchor is nearest,
/// provided that group holds nothing from the same stream; otherwise it
/// anchors a new group. A group reports its anchor's position and box with
/// the union of its sources. Candidates of one stream are distinct objects
/// by that stream's own linking, so they never share a group, and every
/// candidate of the thinnest stream survives unchanged. The result does not
/// depend on the order of the streams.
pub fn fuse_streams(per_stream: &[Vec<Candidate>]) -> Vec<Candidate> {
    let mut items: Vec<Candidate> = per_stream.iter().flatten().cloned().collect();
    sort_candidates(&mut items);
    let thinnest = |c: &Candidate| c.source_thicknesses.iter().copied().min().unwrap_or(1);
    items.sort_by_key(|c| thinnest(c));
    let mut groups: Vec<(Candidate, BTreeSet<u32>)> = Vec::new();
    for c in items {
        let mut best: Option<(usize, f64)> = None;
        for (i, (anchor, members)) in groups.iter().enumerate() {
            let tol = anchor.max_thickness().max(c.max_thickness()) as f64;
            let dz = (anchor.center_voxel[2] - c.center_voxel[2]).abs();
            if anchor.series_id != c.series_id
                || dz > tol
                || anchor.xy_ratio(&c) > DISTANCE_RATIO
                || !members.is_disjoint(&c.source_thicknesses)
            {
                continue;
            }
            let d2: f64 = (0..3).map(|a| (anchor.center_voxel[a] - c.center_voxel[a]).powi(2)).sum();
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((i, d2));
            }
        }
        match best {
            Some((i, _)) => {
                let (anchor, members) = &mut groups[i];
                members.extend(c.source_thicknesses.iter().copied());
                anchor.source_thicknesses.extend(c.source_thicknesses.iter().copied());
                anchor.probability = anchor.probability.max(c.probability);
            }
            None => {
                let members = c.source_thicknesses.clone();
                groups.push((c, members));
            }
        }
    }
    let mut out: Vec<Candidate> = groups.into_iter().map(|(c, _)| c).collect();
    sort_candidates(&mut out);
    out
}

/// Full merging for one stream: extraction, per-slice dedup, z linking.
pub fn stream_candidates(maps: &Array3<f32>, stack: &MipStack, threshold: f32) -> Result<Vec<Candidate>> {
    let raw = extract_candidates(maps, stack, threshold)?;
    Ok(link_across_slices(&dedup_distance_ratio(&raw)))
}

/// Row of a candidate CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub seriesuid: String,
    #[serde(rename = "coordX")]
    pub coord_x: f64,
    #[serde(rename = "coordY")]
    pub coord_y: f64,
    #[serde(rename = "coordZ")]
    pub coord_z: f64,
    #[serde(default)]
    pub bbox_mm: Option<f64>,
    pub probability: f64,
}

impl From<&Candidate> for CandidateRecord {
    fn from(c: &Candidate) -> Self {
        Self {
            seriesuid: c.series_id.clone(),
            coord_x: c.center_world[0],
            coord_y: c.center_world[1],
            coord_z: c.center_world[2],
            bbox_mm: Some(c.bbox_mm),
            probability: c.probability,
        }
    }
}

impl CandidateRecord {
    pub fn center_world(&self) -> [f64; 3] {
        [self.coord_x, self.coord_y, self.coord_z]
    }
}

pub fn write_candidates(path: &Path, cands: &[Candidate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cands {
        w.serialize(CandidateRecord::from(c))?;
    }
    if cands.is_empty() {
        w.write_record(["seriesuid", "coordX", "coordY", "coordZ", "bbox_mm", "probability"])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `seriesuid,coordX,coordY,coordZ[,bbox_mm],probability` rows.
pub fn read_candidates(path: &Path) -> Result<Vec<CandidateRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
