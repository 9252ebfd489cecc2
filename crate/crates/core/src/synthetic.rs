//! Small chest-like phantoms with implanted spherical nodules and
//! tube-shaped vessel distractors, written as MetaImage scans plus an
//! annotation table.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::{write_annotations, write_volume, CtVolume, ElementType, NoduleAnnotation};
use crate::{Error, Result};

const AIR_HU: f32 = -1000.0;
const TISSUE_HU: f32 = 40.0;
const LUNG_HU: f32 = -850.0;
const NODULE_HU: f32 = 30.0;
const VESSEL_HU: f32 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub scans: usize,
    /// In-plane side in pixels.
    pub size: usize,
    /// Source slice count.
    pub slices: usize,
    /// (x, y, z) spacing in mm.
    pub spacing: [f64; 3],
    pub nodules_per_scan: usize,
    /// Nodule diameter range in pixels.
    pub diameter_px: (f64, f64),
    pub tubes_per_scan: usize,
    /// Tube radius range in pixels.
    pub tube_radius_px: (f64, f64),
    pub noise_hu: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            scans: 6,
            size: 64,
            slices: 48,
            spacing: [1.0, 1.0, 1.25],
            nodules_per_scan: 5,
            diameter_px: (4.0, 12.0),
            tubes_per_scan: 6,
            tube_radius_px: (1.0, 1.5),
            noise_hu: 20.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScan {
    pub volume: CtVolume,
    pub nodules: Vec<NoduleAnnotation>,
}

/// Lung ellipsoid in voxel units: centre (x, y, z) and semi-axes.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    fn value(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.c[a]) / self.r[a]).powi(2)).sum()
    }
}

fn lungs(size: usize, depth_mm: f64, spacing: [f64; 3]) -> [Ellipsoid; 2] {
    let s = size as f64;
    let zc = depth_mm / 2.0 / spacing[2];
    let rz = depth_mm * 0.42 / spacing[2];
    let r = [s * 0.17, s * 0.31, rz];
    [
        Ellipsoid { c: [s * 0.31, s * 0.5, zc], r },
        Ellipsoid { c: [s * 0.69, s * 0.5, zc], r },
    ]
}

/// Voxel-space point to physical mm offsets, so distances are isotropic.
fn mm(p: [f64; 3], sp: [f64; 3]) -> [f64; 3] {
    [p[0] * sp[0], p[1] * sp[1], p[2] * sp[2]]
}

fn dist_to_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

/// Generates one phantom. Nodules sit fully inside a lung, apart from each
/// other and from every vessel.
pub fn generate_scan(cfg: &SyntheticConfig, series_id: &str, rng: &mut ChaCha8Rng) -> Result<SyntheticScan> {
    if cfg.size < 32 || cfg.slices < 8 {
        return Err(Error::Parameter("synthetic scans need at least 32 px and 8 slices".into()));
    }
    let sp = cfg.spacing;
    let (n, d) = (cfg.size, cfg.slices);
    let depth_mm = d as f64 * sp[2];
    let lung = lungs(n, depth_mm, sp);
    let origin = [-(n as f64) * sp[0] / 2.0, -(n as f64) * sp[1] / 2.0, -depth_mm / 2.0];

    // nodule centres in voxel space with diameters in mm
    let mut nodules: Vec<([f64; 3], f64)> = Vec::new();
    let mut tries = 0;
    while nodules.len() < cfg.nodules_per_scan {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::Parameter("could not place nodules; volume too small".into()));
        }
        let diam_px = rng.gen_range(cfg.diameter_px.0..=cfg.diameter_px.1);
        let diam = diam_px * sp[0];
        let l = lung[rng.gen_range(0..2)];
        let p = [
            rng.gen_range(l.c[0] - l.r[0]..l.c[0] + l.r[0]),
            rng.gen_range(l.c[1] - l.r[1]..l.c[1] + l.r[1]),
            rng.gen_range(l.c[2] - l.r[2]..l.c[2] + l.r[2]),
        ];
        // keep a margin of two voxels from the lung wall along every axis
        let margin = diam / 2.0 + 2.0;
        let inside = (0..3).all(|a| {
            let mut q = p;
            q[a] += margin / sp[a];
            let mut r = p;
            r[a] -= margin / sp[a];
            l.value(q) < 1.0 && l.value(r) < 1.0
        });
        let apart = nodules.iter().all(|(q, dq)| {
            let (a, b) = (mm(p, sp), mm(*q, sp));
            let dist = (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
            dist > (diam + dq) / 2.0 + 6.0
        });
        if inside && apart {
            nodules.push((p, diam));
        }
    }

    // vessel segments (mm space) crossing a lung, away from nodules
    let mut tubes: Vec<([f64; 3], [f64; 3], f64)> = Vec::new();
    tries = 0;
    while tubes.len() < cfg.tubes_per_scan && tries < 10_000 {
        tries += 1;
        let l = lung[rng.gen_range(0..2)];
        let pick = |rng: &mut ChaCha8Rng| {
            [
                rng.gen_range(l.c[0] - l.r[0]..l.c[0] + l.r[0]),
                rng.gen_range(l.c[1] - l.r[1]..l.c[1] + l.r[1]),
                rng.gen_range(l.c[2] - l.r[2]..l.c[2] + l.r[2]),
            ]
        };
        let (a, b) = (pick(rng), pick(rng));
        let (am, bm) = (mm(a, sp), mm(b, sp));
        let len = (0..3).map(|i| (am[i] - bm[i]).powi(2)).sum::<f64>().sqrt();
        if len < 20.0 {
            continue;
        }
        let radius = rng.gen_range(cfg.tube_radius_px.0..=cfg.tube_radius_px.1) * sp[0];
        let clear = nodules
            .iter()
            .all(|(p, dp)| dist_to_segment(mm(*p, sp), am, bm) > dp / 2.0 + radius + 4.0);
        if clear {
            tubes.push((am, bm, radius));
        }
    }

    let noise = Normal::new(0.0, cfg.noise_hu.max(1e-9)).map_err(|e| Error::Parameter(e.to_string()))?;
    let (bx, by) = (n as f64 * 0.47, n as f64 * 0.44);
    let centre = n as f64 / 2.0;
    let mut vox = Array3::<f32>::from_elem((d, n, n), AIR_HU);
    for ((z, y, x), v) in vox.indexed_iter_mut() {
        let p = [x as f64, y as f64, z as f64];
        let body = ((p[0] - centre) / bx).powi(2) + ((p[1] - centre) / by).powi(2) <= 1.0;
        if !body {
            continue;
        }
        let in_lung = lung.iter().any(|l| l.value(p) <= 1.0);
        let mut hu = if in_lung { LUNG_HU } else { TISSUE_HU };
        if in_lung {
            let pm = mm(p, sp);
            if tubes.iter().any(|(a, b, r)| dist_to_segment(pm, *a, *b) <= *r) {
                hu = VESSEL_HU;
            }
            for (c, diam) in &nodules {
                let cm = mm(*c, sp);
                let d2: f64 = (0..3).map(|i| (pm[i] - cm[i]).powi(2)).sum();
                if d2 <= (diam / 2.0).powi(2) {
                    hu = NODULE_HU;
                }
            }
        }
        *v = hu + noise.sample(rng) as f32;
    }
    let volume = CtVolume::new(vox, sp, origin, series_id)?;
    let annotations = nodules
        .iter()
        .map(|(c, diam)| NoduleAnnotation {
            series_id: series_id.to_string(),
            center_world: volume.voxel_to_world(*c),
            diameter_mm: *diam,
        })
        .collect();
    Ok(SyntheticScan {
        volume,
        nodules: annotations,
    })
}

/// Series id of the `i`-th synthetic scan.
pub fn series_name(i: usize) -> String {
    format!("synth-{i:03}")
}

/// Generates the whole mini-dataset in memory.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<SyntheticScan>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.scans).map(|i| generate_scan(cfg, &series_name(i), &mut rng)).collect()
}

/// Writes `<series>.mhd/.raw` for every scan plus `annotations.csv` into
/// `dir`, returning all annotations.
pub fn write_dataset(dir: &Path, cfg: &SyntheticConfig) -> Result<Vec<NoduleAnnotation>> {
    std::fs::create_dir_all(dir)?;
    let mut all = Vec::new();
    for scan in generate(cfg)? {
        write_volume(&dir.join(format!("{}.mhd", scan.volume.series_id)), &scan.volume, ElementType::I16)?;
        all.extend(scan.nodules);
    }
    write_annotations(&dir.join("annotations.csv"), &all)?;
    Ok(all)
}
