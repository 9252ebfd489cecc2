use log::warn;
use ndarray::Array3;

use crate::ingest::NoduleAnnotation;
use crate::mip::MipStack;

/// Rasterizes nodules as filled squares (side = diameter) on every output
/// image whose slab intersects the nodule's z extent `[z − d/2, z + d/2]`.
///
/// A pixel belongs to the square when its centre lies in
/// `[c − s/2, c + s/2)` on both axes.
pub fn rasterize_labels(anns: &[NoduleAnnotation], stack: &MipStack) -> Array3<f32> {
    let (n, h, w) = stack.images.dim();
    let mut out = Array3::<f32>::zeros((n, h, w));
    let g = stack.geometry;
    for a in anns.iter().filter(|a| a.series_id == stack.series_id) {
        let c = g.world_to_voxel(a.center_world);
        let half = [
            a.diameter_mm / g.spacing[0] / 2.0,
            a.diameter_mm / g.spacing[1] / 2.0,
            a.diameter_mm / g.spacing[2] / 2.0,
        ];
        let (z_lo, z_hi) = (c[2] - half[2], c[2] + half[2]);
        let x_range = (c[0] - half[0]).ceil().max(0.0)..(c[0] + half[0]).ceil().min(w as f64);
        let y_range = (c[1] - half[1]).ceil().max(0.0)..(c[1] + half[1]).ceil().min(h as f64);
        let outside = z_hi < 0.0 || z_lo > (n as f64 - 1.0) || x_range.is_empty() || y_range.is_empty();
        if outside {
            warn!("{}: nodule at {:?} lies outside the volume, skipped", a.series_id, a.center_world);
            continue;
        }
        for k in 0..n {
            let (lo, hi) = stack.slab_range(k);
            if (hi as f64) < z_lo || (lo as f64) > z_hi {
                continue;
            }
            for y in y_range.start as usize..y_range.end as usize {
                for x in x_range.start as usize..x_range.end as usize {
                    out[[k, y, x]] = 1.0;
                }
            }
        }
    }
    out
}
