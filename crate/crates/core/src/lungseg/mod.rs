//! Lung parenchyma segmentation.
//!
//! Steps, on a normalized 1 mm volume:
//! 1. global mean threshold splits dark (air, lung) from bright (body);
//! 2. per axial slice, dark regions 4-connected to the slice border are
//!    removed (outside air, detector noise along the edge);
//! 3. the two largest 26-connected dark components are kept as lungs;
//! 4. per slice, binary closing then dilation widen the boundary so
//!    wall-attached nodules stay inside;
//! 5. per slice, holes are filled (vessels, nodules).

pub mod morph;

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::ingest::CtVolume;
use crate::label::{label_2d, label_3d, Connectivity2};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LungSegConfig {
    /// Disk radius (voxels) of the per-slice closing.
    pub closing_radius: usize,
    /// Disk radius (voxels) of the per-slice dilation after closing.
    pub dilation_radius: usize,
    /// Number of largest dark components kept as lungs.
    pub max_components: usize,
}

impl Default for LungSegConfig {
    fn default() -> Self {
        Self {
            closing_radius: 5,
            dilation_radius: 3,
            max_components: 2,
        }
    }
}

/// Boolean lung mask aligned to its source volume (`[z, y, x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LungMask {
    pub mask: Array3<bool>,
    pub volume_fraction: f64,
}

impl LungMask {
    pub fn from_mask(mask: Array3<bool>) -> Self {
        let n = mask.len().max(1);
        let fraction = mask.iter().filter(|&&b| b).count() as f64 / n as f64;
        Self {
            mask,
            volume_fraction: fraction,
        }
    }
}

/// Intermediate masks, exposed for inspection and tests.
#[derive(Debug, Clone)]
pub struct SegmentationStages {
    pub threshold: f32,
    /// Dark voxels left after border clearing (step 2).
    pub interior: Array3<bool>,
    /// Union of the selected lung components (step 3).
    pub lungs: Array3<bool>,
    pub result: LungMask,
}

pub fn segment_lungs(v: &CtVolume, cfg: &LungSegConfig) -> Result<LungMask> {
    segment_lungs_staged(v, cfg).map(|s| s.result)
}

pub fn segment_lungs_staged(v: &CtVolume, cfg: &LungSegConfig) -> Result<SegmentationStages> {
    let n = v.voxels.len();
    if n == 0 {
        return Err(Error::Segmentation("empty volume".into()));
    }
    let threshold = (v.voxels.iter().map(|&x| x as f64).sum::<f64>() / n as f64) as f32;
    let dark = v.voxels.mapv(|x| x < threshold);
    let dark_count = dark.iter().filter(|&&b| b).count();

    let mut interior = dark;
    for mut plane in interior.axis_iter_mut(Axis(0)) {
        let owned = plane.to_owned();
        let (labels, sizes) = label_2d(&owned, Connectivity2::Four);
        let (h, w) = owned.dim();
        let mut touches = vec![false; sizes.len()];
        for y in 0..h {
            for x in 0..w {
                if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                    touches[labels[[y, x]] as usize] = true;
                }
            }
        }
        Zip::from(&mut plane).and(&labels).for_each(|m, &l| {
            if l != 0 && touches[l as usize] {
                *m = false;
            }
        });
    }

    let (labels, sizes) = label_3d(&interior);
    let mut order: Vec<usize> = (1..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    order.truncate(cfg.max_components);
    if order.is_empty() {
        return Err(Error::Segmentation(format!(
            "{}: no internal dark component (threshold {threshold:.4}, {dark_count} dark voxels of {n}, \
             all connected to the image border)",
            v.series_id
        )));
    }
    let mut keep = vec![false; sizes.len()];
    for &id in &order {
        keep[id] = true;
    }
    let lungs = labels.mapv(|l| keep[l as usize]);

    let mut mask = lungs.clone();
    for mut plane in mask.axis_iter_mut(Axis(0)) {
        let owned = plane.to_owned();
        if !owned.iter().any(|&b| b) {
            continue;
        }
        let closed = morph::close(&owned, cfg.closing_radius);
        let dilated = morph::dilate(&closed, cfg.dilation_radius);
        plane.assign(&morph::fill_holes(&dilated));
    }
    Ok(SegmentationStages {
        threshold,
        interior,
        lungs,
        result: LungMask::from_mask(mask),
    })
}

/// Zeroes every voxel outside the mask.
pub fn apply_mask(v: &CtVolume, m: &LungMask) -> Result<CtVolume> {
    if v.voxels.dim() != m.mask.dim() {
        return Err(Error::Contract(format!(
            "mask shape {:?} does not match volume shape {:?}",
            m.mask.dim(),
            v.voxels.dim()
        )));
    }
    let mut out = v.clone();
    Zip::from(&mut out.voxels).and(&m.mask).for_each(|x, &keep| {
        if !keep {
            *x = 0.0;
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Body cylinder (0.8) holding two dark ellipsoids (0.05) on a dark
    /// background. Returns the volume and the ellipsoid and body masks.
    fn phantom() -> (CtVolume, Array3<bool>, Array3<bool>) {
        let (d, h, w) = (24, 64, 64);
        let mut ell = Array3::from_elem((d, h, w), false);
        let mut body = Array3::from_elem((d, h, w), false);
        let vox = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
            let (zf, yf, xf) = (z as f64, y as f64, x as f64);
            let in_body = ((xf - 31.5) / 29.0).powi(2) + ((yf - 31.5) / 27.0).powi(2) <= 1.0;
            let lung = |cx: f64| ((xf - cx) / 9.0).powi(2) + ((yf - 31.5) / 17.0).powi(2) + ((zf - 11.5) / 10.0).powi(2) <= 1.0;
            let in_lung = lung(19.0) || lung(44.0);
            body[[z, y, x]] = in_body;
            ell[[z, y, x]] = in_lung;
            if in_lung {
                0.05
            } else if in_body {
                0.8
            } else {
                0.0
            }
        });
        (CtVolume::new(vox, [1.0; 3], [0.0; 3], "phantom").unwrap(), ell, body)
    }

    #[test]
    fn phantom_lungs_are_covered_and_outside_is_excluded() {
        let (v, ell, body) = phantom();
        let m = segment_lungs(&v, &LungSegConfig::default()).unwrap();
        let inside = ell.iter().filter(|&&b| b).count();
        let covered = ell.iter().zip(m.mask.iter()).filter(|(&e, &k)| e && k).count();
        assert!(covered as f64 >= 0.95 * inside as f64, "{covered}/{inside}");
        let leaked = body.iter().zip(m.mask.iter()).filter(|(&b, &k)| !b && k).count();
        assert_eq!(leaked, 0);
        assert!(m.volume_fraction > 0.0 && m.volume_fraction < 1.0);
    }

    #[test]
    fn constant_volume_fails() {
        let v = CtVolume::new(Array3::from_elem((4, 8, 8), 0.3), [1.0; 3], [0.0; 3], "flat").unwrap();
        assert!(matches!(segment_lungs(&v, &LungSegConfig::default()), Err(Error::Segmentation(_))));
    }

    #[test]
    fn enclosed_vessel_hole_is_filled() {
        let (mut v, _, _) = phantom();
        // three bright voxels inside the left lung
        for x in 18..21 {
            v.voxels[[12, 31, x]] = 0.8;
        }
        let st = segment_lungs_staged(&v, &LungSegConfig::default()).unwrap();
        assert!(!st.lungs[[12, 31, 19]]);
        for x in 18..21 {
            assert!(st.result.mask[[12, 31, x]]);
        }
    }

    #[test]
    fn final_mask_contains_selected_components_and_has_no_holes() {
        let (v, _, _) = phantom();
        let st = segment_lungs_staged(&v, &LungSegConfig::default()).unwrap();
        assert!(st.lungs.iter().zip(st.result.mask.iter()).all(|(&a, &b)| !a || b));
        for plane in st.result.mask.axis_iter(Axis(0)) {
            let owned = plane.to_owned();
            assert_eq!(morph::fill_holes(&owned), owned);
        }
        let again = segment_lungs(&v, &LungSegConfig::default()).unwrap();
        assert_eq!(again, st.result);
    }

    #[test]
    fn apply_mask_contracts() {
        let (v, _, _) = phantom();
        let all = LungMask::from_mask(Array3::from_elem(v.voxels.dim(), true));
        assert_eq!(apply_mask(&v, &all).unwrap(), v);
        let none = LungMask::from_mask(Array3::from_elem(v.voxels.dim(), false));
        assert!(apply_mask(&v, &none).unwrap().voxels.iter().all(|&x| x == 0.0));
        let m = segment_lungs(&v, &LungSegConfig::default()).unwrap();
        let out = apply_mask(&v, &m).unwrap();
        for ((o, i), k) in out.voxels.iter().zip(v.voxels.iter()).zip(m.mask.iter()) {
            if *k {
                assert_eq!(o.to_bits(), i.to_bits());
            } else {
                assert_eq!(*o, 0.0);
            }
        }
        let wrong = LungMask::from_mask(Array3::from_elem((1, 1, 1), true));
        assert!(matches!(apply_mask(&v, &wrong), Err(Error::Contract(_))));
    }
}
