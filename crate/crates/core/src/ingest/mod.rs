//! CT volume ingestion: MetaImage loading, intensity windowing, z
//! resampling to a 1 mm grid and world/voxel coordinate conversion.
//!
//! Voxel arrays are indexed `[z, y, x]`. Spacing, origin and all world or
//! voxel coordinate triples are ordered `(x, y, z)`.

mod annotations;
pub mod container;
mod metaimage;

use ndarray::{Array3, Axis};

use crate::{Error, Result};

pub use annotations::{load_annotations, write_annotations, NoduleAnnotation, MIN_NODULE_DIAMETER_MM};
pub use metaimage::{load_volume, write_volume, ElementType};

/// Lower and upper bound of the intensity window, in HU.
pub const HU_WINDOW: (f32, f32) = (-1000.0, 400.0);

/// Thickest slice spacing accepted for screening, in mm.
pub const MAX_SLICE_THICKNESS_MM: f64 = 2.5;

/// Physical placement of a voxel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    /// mm per voxel along (x, y, z).
    pub spacing: [f64; 3],
    /// World position (mm) of voxel (0, 0, 0).
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    pub fn voxel_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        [
            idx[0] * self.spacing[0] + self.origin[0],
            idx[1] * self.spacing[1] + self.origin[1],
            idx[2] * self.spacing[2] + self.origin[2],
        ]
    }
}

/// A CT scan: voxel intensities plus physical metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub voxels: Array3<f32>,
    pub geometry: Geometry,
    pub series_id: String,
}

impl CtVolume {
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3], origin: [f64; 3], series_id: impl Into<String>) -> Result<Self> {
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::UnsupportedGeometry(format!("non-positive spacing {spacing:?}")));
        }
        Ok(Self {
            voxels,
            geometry: Geometry { spacing, origin },
            series_id: series_id.into(),
        })
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    /// Grid extent as (x, y, z).
    pub fn dims_xyz(&self) -> [usize; 3] {
        let (z, y, x) = self.voxels.dim();
        [x, y, z]
    }

    pub fn slice_count(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        self.geometry.world_to_voxel(p)
    }

    pub fn voxel_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        self.geometry.voxel_to_world(idx)
    }

    /// Whether a fractional (x, y, z) index lies within the grid after
    /// rounding to the nearest voxel.
    pub fn contains_voxel(&self, idx: [f64; 3]) -> bool {
        let d = self.dims_xyz();
        idx.iter()
            .zip(d)
            .all(|(&i, n)| i.round() >= 0.0 && (i.round() as usize) < n)
    }

    /// Rejects scans whose slice spacing exceeds the screening limit.
    pub fn ensure_screening_thickness(&self) -> Result<()> {
        let z = self.geometry.spacing[2];
        if z > MAX_SLICE_THICKNESS_MM {
            return Err(Error::UnsupportedGeometry(format!(
                "{}: slice spacing {z} mm exceeds {MAX_SLICE_THICKNESS_MM} mm",
                self.series_id
            )));
        }
        Ok(())
    }
}

/// Windows HU to [-1000, 400] and maps it linearly onto [0, 1].
pub fn normalize_hu_value(hu: f32) -> f32 {
    let (lo, hi) = HU_WINDOW;
    ((hu - lo) / (hi - lo)).clamp(0.0, 1.0)
}

pub fn normalize_hu(v: &CtVolume) -> CtVolume {
    CtVolume {
        voxels: v.voxels.mapv(normalize_hu_value),
        geometry: v.geometry,
        series_id: v.series_id.clone(),
    }
}

/// Number of 1 mm slices covering `count` slices at `spacing_z` mm.
pub fn resampled_slice_count(count: usize, spacing_z: f64) -> usize {
    (count as f64 * spacing_z).round() as usize
}

/// Linearly resamples along z onto a 1 mm grid sharing the original origin.
/// Positions past the last source slice take the last slice's value.
pub fn resample_z(v: &CtVolume) -> Result<CtVolume> {
    let (nz, ny, nx) = v.voxels.dim();
    let sz = v.geometry.spacing[2];
    if nz < 2 {
        return Err(Error::UnsupportedGeometry(format!(
            "{}: cannot resample a volume with {nz} slice(s)",
            v.series_id
        )));
    }
    if !(sz > 0.0) {
        return Err(Error::UnsupportedGeometry(format!("z spacing {sz} is not positive")));
    }
    let mut geometry = v.geometry;
    geometry.spacing[2] = 1.0;
    if sz == 1.0 {
        return Ok(CtVolume {
            voxels: v.voxels.clone(),
            geometry,
            series_id: v.series_id.clone(),
        });
    }
    let out_n = resampled_slice_count(nz, sz).max(1);
    let mut out = Array3::<f32>::zeros((out_n, ny, nx));
    for (j, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let src = (j as f64 / sz).min((nz - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(nz - 1);
        let w = (src - lo as f64) as f32;
        let a = v.voxels.index_axis(Axis(0), lo);
        if w == 0.0 || hi == lo {
            plane.assign(&a);
        } else {
            let b = v.voxels.index_axis(Axis(0), hi);
            ndarray::Zip::from(&mut plane)
                .and(&a)
                .and(&b)
                .for_each(|o, &p, &q| *o = p + w * (q - p));
        }
    }
    Ok(CtVolume {
        voxels: out,
        geometry,
        series_id: v.series_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(nz: usize, sz: f64) -> CtVolume {
        let vox = Array3::from_shape_fn((nz, 3, 2), |(z, _, _)| (z as f64 * sz) as f32);
        CtVolume::new(vox, [0.7, 0.7, sz], [0.0, 0.0, 0.0], "ramp").unwrap()
    }

    #[test]
    fn window_bounds_and_midpoint() {
        assert_eq!(normalize_hu_value(-1000.0), 0.0);
        assert_eq!(normalize_hu_value(400.0), 1.0);
        assert_eq!(normalize_hu_value(-300.0), 0.5);
        assert_eq!(normalize_hu_value(-3000.0), 0.0);
        assert_eq!(normalize_hu_value(3000.0), 1.0);
    }

    #[test]
    fn slice_count_rounds_half_up() {
        assert_eq!(resampled_slice_count(133, 2.5), 333);
        let v = ramp(133, 2.5);
        let r = resample_z(&v).unwrap();
        assert_eq!(r.slice_count(), 333);
        assert_eq!(r.spacing(), [0.7, 0.7, 1.0]);
    }

    #[test]
    fn unit_spacing_is_identity() {
        let v = ramp(9, 1.0);
        assert_eq!(resample_z(&v).unwrap(), v);
    }

    #[test]
    fn ramp_is_reproduced_inside_source_extent() {
        for sz in [0.625, 1.25, 2.0, 2.5] {
            let v = ramp(40, sz);
            let r = resample_z(&v).unwrap();
            let last_src_mm = 39.0 * sz;
            for (j, plane) in r.voxels.axis_iter(Axis(0)).enumerate() {
                // analytic ramp f(z) = z mm on the 1 mm grid
                let want = (j as f64).min(last_src_mm);
                for &val in plane.iter() {
                    assert!((val as f64 - want).abs() < 1e-4 * want.max(1.0), "sz={sz} j={j}");
                }
            }
        }
    }

    #[test]
    fn single_slice_is_rejected() {
        let v = CtVolume::new(Array3::zeros((1, 4, 4)), [1.0, 1.0, 2.0], [0.0; 3], "s").unwrap();
        assert!(matches!(resample_z(&v), Err(Error::UnsupportedGeometry(_))));
    }

    #[test]
    fn thick_slices_are_rejected_for_screening() {
        let v = ramp(4, 3.0);
        assert!(v.ensure_screening_thickness().is_err());
        assert!(ramp(4, 2.5).ensure_screening_thickness().is_ok());
    }

    #[test]
    fn non_positive_spacing_is_rejected() {
        assert!(CtVolume::new(Array3::zeros((2, 2, 2)), [1.0, 0.0, 1.0], [0.0; 3], "x").is_err());
    }

    #[test]
    fn coordinate_examples() {
        let v = CtVolume::new(Array3::zeros((2, 2, 2)), [0.7, 0.7, 1.0], [-200.0, -200.0, -100.0], "c").unwrap();
        assert_eq!(v.world_to_voxel(v.origin()), [0.0, 0.0, 0.0]);
        let idx = v.world_to_voxel([-199.3, -200.0, -99.0]);
        for (a, b) in idx.iter().zip([1.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn world_voxel_round_trip(
            sx in 0.3f64..3.0, sy in 0.3f64..3.0, sz in 0.3f64..3.0,
            ox in -400f64..400.0, oy in -400f64..400.0, oz in -400f64..400.0,
            px in -500f64..500.0, py in -500f64..500.0, pz in -500f64..500.0,
        ) {
            let g = Geometry { spacing: [sx, sy, sz], origin: [ox, oy, oz] };
            let p = [px, py, pz];
            let back = g.voxel_to_world(g.world_to_voxel(p));
            for k in 0..3 {
                prop_assert!((back[k] - p[k]).abs() < 1e-9);
            }
            let idx = [px / 10.0, py / 10.0, pz / 10.0];
            let again = g.world_to_voxel(g.voxel_to_world(idx));
            for k in 0..3 {
                prop_assert!((again[k] - idx[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn normalization_is_monotone_and_bounded(a in -5000f32..5000.0, b in -5000f32..5000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (nl, nh) = (normalize_hu_value(lo), normalize_hu_value(hi));
            prop_assert!(nl <= nh);
            prop_assert!((0.0..=1.0).contains(&nl) && (0.0..=1.0).contains(&nh));
        }

        #[test]
        fn resampling_never_overshoots(
            vals in proptest::collection::vec(-1000f32..1000.0, 6..30),
            sz in 0.5f64..2.5,
        ) {
            let n = vals.len();
            let vox = Array3::from_shape_fn((n, 1, 1), |(z, _, _)| vals[z]);
            let v = CtVolume::new(vox, [1.0, 1.0, sz], [0.0; 3], "p").unwrap();
            let r = resample_z(&v).unwrap();
            let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for &x in r.voxels.iter() {
                prop_assert!(x >= lo - 1e-3 && x <= hi + 1e-3);
            }
        }
    }
}
