//! Sliding-slab maximum intensity projection along z.
//!
//! Output image `k` of a stack with slab thickness `t` is the per-pixel
//! maximum over slices `k - ⌊t/2⌋ ..= k + ⌈t/2⌉ - 1`, clipped to the
//! volume. There is one output image per input slice.
//!
//! The running maximum uses the van Herk / Gil-Werman block scheme: the
//! padded z axis is cut into blocks of length `t`, prefix and suffix maxima
//! are taken inside each block, and every window is the max of one suffix
//! and one prefix. Cost is three comparisons per voxel whatever `t` is.
//! Whole slice rows are processed at once so memory access stays contiguous.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::ingest::{CtVolume, Geometry};
use crate::{Error, Result};

/// Default slab thicknesses in mm; 1 mm reproduces the axial slices.
pub const DEFAULT_THICKNESSES: [u32; 4] = [1, 5, 10, 15];

/// Rows of a slice processed together; bounds the scratch buffers.
const TILE_ROWS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct MipStack {
    /// Projection images indexed `[k, y, x]`.
    pub images: Array3<f32>,
    pub slab_thickness: u32,
    /// World z (mm) of each slab centre.
    pub z_centers: Vec<f64>,
    pub series_id: String,
    pub geometry: Geometry,
}

impl MipStack {
    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, k: usize) -> ArrayView2<'_, f32> {
        self.images.index_axis(Axis(0), k)
    }

    /// Inclusive slice range summarized by output image `k`.
    pub fn slab_range(&self, k: usize) -> (usize, usize) {
        slab_window(k, self.slab_thickness, self.len())
    }
}

/// Inclusive, clipped slice range of the slab centred on `k`.
pub fn slab_window(k: usize, t: u32, n: usize) -> (usize, usize) {
    let below = (t / 2) as usize;
    let above = (t as usize).div_ceil(2).saturating_sub(1);
    (k.saturating_sub(below), (k + above).min(n.saturating_sub(1)))
}

/// Validates a slab thickness in mm and returns it as an integer.
pub fn slab_thickness(t: f64) -> Result<u32> {
    if !(t >= 1.0) || t.fract() != 0.0 || t > u32::MAX as f64 {
        return Err(Error::Parameter(format!("slab thickness must be an integer ≥ 1 mm, got {t}")));
    }
    Ok(t as u32)
}

/// Sliding maximum over `n` consecutive lanes of equal length, each lane
/// stored contiguously (`src[i * lane..(i + 1) * lane]`). Window `k`
/// covers lanes `k - below ..= k - below + t - 1` clipped to `0..n`.
pub fn sliding_max_lanes(src: &[f32], n: usize, lane: usize, t: usize, below: usize, out: &mut [f32]) {
    assert!(t >= 1 && below < t);
    assert_eq!(src.len(), n * lane);
    assert_eq!(out.len(), n * lane);
    if t == 1 {
        out.copy_from_slice(src);
        return;
    }
    let ne = n + t - 1;
    let value = |e: usize| -> Option<&[f32]> {
        let i = e.checked_sub(below)?;
        (i < n).then(|| &src[i * lane..(i + 1) * lane])
    };
    let mut prefix = vec![f32::NEG_INFINITY; ne * lane];
    let mut suffix = vec![f32::NEG_INFINITY; ne * lane];
    for e in 0..ne {
        let (done, rest) = prefix.split_at_mut(e * lane);
        let cur = &mut rest[..lane];
        match (value(e), e % t) {
            (Some(v), 0) => cur.copy_from_slice(v),
            (None, 0) => {}
            (v, _) => {
                cur.copy_from_slice(&done[(e - 1) * lane..]);
                if let Some(v) = v {
                    for (c, x) in cur.iter_mut().zip(v) {
                        *c = c.max(*x);
                    }
                }
            }
        }
    }
    for e in (0..ne).rev() {
        let (head, tail) = suffix.split_at_mut((e + 1) * lane);
        let cur = &mut head[e * lane..];
        let block_end = e % t == t - 1 || e == ne - 1;
        if block_end {
            if let Some(v) = value(e) {
                cur.copy_from_slice(v);
            }
        } else {
            cur.copy_from_slice(&tail[..lane]);
            if let Some(v) = value(e) {
                for (c, x) in cur.iter_mut().zip(v) {
                    *c = c.max(*x);
                }
            }
        }
    }
    for k in 0..n {
        let s = &suffix[k * lane..(k + 1) * lane];
        let p = &prefix[(k + t - 1) * lane..(k + t) * lane];
        for ((o, a), b) in out[k * lane..(k + 1) * lane].iter_mut().zip(s).zip(p) {
            *o = a.max(*b);
        }
    }
}

/// Builds the MIP stack of slab thickness `t` (mm) from a 1 mm volume.
pub fn build_mip_stack(v: &CtVolume, t: f64) -> Result<MipStack> {
    let t = slab_thickness(t)?;
    if v.spacing()[2] != 1.0 {
        return Err(Error::Contract(format!(
            "MIP needs a 1 mm z grid, {} has {} mm",
            v.series_id,
            v.spacing()[2]
        )));
    }
    let (n, h, w) = v.voxels.dim();
    let src = v.voxels.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut images = Array3::<f32>::zeros((n, h, w));
    let below = (t / 2) as usize;
    {
        let dst = images.as_slice_mut().expect("fresh array is contiguous");
        let mut y0 = 0;
        while y0 < h {
            let rows = TILE_ROWS.min(h - y0);
            let lane = rows * w;
            let mut tile = Vec::with_capacity(n * lane);
            for z in 0..n {
                let off = (z * h + y0) * w;
                tile.extend_from_slice(&src[off..off + lane]);
            }
            let mut out = vec![0.0; n * lane];
            sliding_max_lanes(&tile, n, lane, t as usize, below, &mut out);
            for z in 0..n {
                let off = (z * h + y0) * w;
                dst[off..off + lane].copy_from_slice(&out[z * lane..(z + 1) * lane]);
            }
            y0 += rows;
        }
    }
    let z0 = v.origin()[2];
    Ok(MipStack {
        images,
        slab_thickness: t,
        z_centers: (0..n).map(|k| z0 + k as f64).collect(),
        series_id: v.series_id.clone(),
        geometry: v.geometry,
    })
}

/// Writes image `k` of a stack as an 8-bit grayscale PNG (values in [0, 1]).
pub fn export_png(stack: &MipStack, k: usize, path: &Path) -> Result<()> {
    if k >= stack.len() {
        return Err(Error::Parameter(format!("image {k} out of range (stack has {})", stack.len())));
    }
    save_gray_png(&stack.image(k).to_owned(), path)
}

pub(crate) fn save_gray_png(img: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let buf: Vec<u8> = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let out = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Parameter("image buffer size mismatch".into()))?;
    out.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(vals: &[f32], t: u32) -> Vec<f32> {
        (0..vals.len())
            .map(|k| {
                let (lo, hi) = slab_window(k, t, vals.len());
                vals[lo..=hi].iter().cloned().fold(f32::NEG_INFINITY, f32::max)
            })
            .collect()
    }

    fn volume(vox: Array3<f32>) -> CtVolume {
        CtVolume::new(vox, [0.8, 0.8, 1.0], [0.0, 0.0, -50.0], "m").unwrap()
    }

    #[test]
    fn window_bounds() {
        assert_eq!(slab_window(10, 1, 100), (10, 10));
        assert_eq!(slab_window(10, 5, 100), (8, 12));
        assert_eq!(slab_window(10, 10, 100), (5, 14));
        assert_eq!(slab_window(10, 15, 100), (3, 17));
        assert_eq!(slab_window(0, 15, 100), (0, 7));
        assert_eq!(slab_window(99, 15, 100), (92, 99));
    }

    #[test]
    fn unit_slab_reproduces_slices() {
        let vox = Array3::from_shape_fn((6, 3, 4), |(z, y, x)| (z * 13 + y * 5 + x) as f32 % 7.0);
        let v = volume(vox.clone());
        let s = build_mip_stack(&v, 1.0).unwrap();
        assert_eq!(s.images, vox);
        assert_eq!(s.z_centers[0], -50.0);
        let again = build_mip_stack(&volume(s.images.clone()), 1.0).unwrap();
        assert_eq!(again.images, s.images);
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = volume(Array3::from_elem((9, 4, 4), 0.37));
        for t in [1.0, 5.0, 10.0, 15.0] {
            assert!(build_mip_stack(&v, t).unwrap().images.iter().all(|&x| x == 0.37));
        }
    }

    #[test]
    fn bad_thickness_and_grid_are_rejected() {
        let v = volume(Array3::zeros((3, 2, 2)));
        assert!(matches!(build_mip_stack(&v, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(build_mip_stack(&v, 2.5), Err(Error::Parameter(_))));
        let thick = CtVolume::new(Array3::zeros((3, 2, 2)), [1.0, 1.0, 2.0], [0.0; 3], "t").unwrap();
        assert!(matches!(build_mip_stack(&thick, 5.0), Err(Error::Contract(_))));
    }

    #[test]
    fn slab_longer_than_volume() {
        let vals = [0.1f32, 0.9, 0.3];
        let v = volume(Array3::from_shape_fn((3, 1, 1), |(z, _, _)| vals[z]));
        let s = build_mip_stack(&v, 15.0).unwrap();
        assert_eq!(s.images.iter().cloned().collect::<Vec<_>>(), brute(&vals, 15));
    }

    #[test]
    fn png_export_writes_image() {
        let dir = tempfile::tempdir().unwrap();
        let v = volume(Array3::from_shape_fn((3, 5, 7), |(_, y, x)| (x + y) as f32 / 10.0));
        let s = build_mip_stack(&v, 5.0).unwrap();
        let p = dir.path().join("k1.png");
        export_png(&s, 1, &p).unwrap();
        let img = image::open(&p).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (7, 5));
        assert!(export_png(&s, 3, &p).is_err());
    }

    proptest! {
        #[test]
        fn streaming_max_equals_brute_force(
            vals in proptest::collection::vec(-1e3f32..1e3, 1..60),
            t in 1u32..20,
        ) {
            let n = vals.len();
            let mut out = vec![0.0; n];
            sliding_max_lanes(&vals, n, 1, t as usize, (t / 2) as usize, &mut out);
            prop_assert_eq!(out, brute(&vals, t));
        }

        #[test]
        fn thicker_slab_dominates(
            vals in proptest::collection::vec(0f32..1.0, 2..40),
            t1 in 1u32..16, extra in 0u32..8,
        ) {
            // same centre, t2 = t1 + 2·extra keeps slab(t1) ⊆ slab(t2)
            let t2 = t1 + 2 * extra;
            let a = brute(&vals, t1);
            let v = volume(Array3::from_shape_fn((vals.len(), 1, 1), |(z, _, _)| vals[z]));
            let b = build_mip_stack(&v, t2 as f64).unwrap();
            for (x, y) in a.iter().zip(b.images.iter()) {
                prop_assert!(y >= x);
            }
        }
    }
}
