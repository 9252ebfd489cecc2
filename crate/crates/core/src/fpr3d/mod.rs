//! Second-stage false-positive reduction: cubic patches around candidates
//! scored by two 3-D classifiers and a size-routed combination of both.

mod net;
mod train;

use ndarray::{s, Array3, Axis};
use rand::Rng;

pub use net::{Archi, ArchiSpec, FprNet};
pub use train::{
    score_candidates, train_fpr, FprEnsemble, FprModel, FprOutcome, LabelledPatch, TrainConfig3D,
};

use crate::ingest::CtVolume;
use crate::merge::Candidate;
use crate::{Error, Result};

/// Candidates with a predicted box side below this (pixels) are routed to
/// the small-patch classifier.
pub const ROUTING_SIDE_PX: u32 = 16;

/// A cube cut from a normalized volume, indexed `[z, y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch3D {
    pub voxels: Array3<f32>,
    /// Voxel index `[z, y, x]` of the cube centre.
    pub center: [usize; 3],
    pub side: usize,
}

/// Cuts the `side³` cube spanning `center − side/2 .. center + side/2`
/// around the candidate's rounded centre, zero-filled outside the volume.
pub fn extract_patch(v: &CtVolume, c: &Candidate, side: usize) -> Result<Patch3D> {
    if !v.contains_voxel(c.center_voxel) {
        return Err(Error::Contract(format!(
            "candidate centre {:?} lies outside the {:?} volume",
            c.center_voxel,
            v.dims_xyz()
        )));
    }
    Ok(extract_at(v, c.voxel_index(), side))
}

pub(crate) fn extract_at(v: &CtVolume, center: [usize; 3], side: usize) -> Patch3D {
    let dims = v.voxels.dim();
    let dims = [dims.0, dims.1, dims.2];
    let half = (side / 2) as isize;
    let mut lo_src = [0usize; 3];
    let mut hi_src = [0usize; 3];
    let mut lo_dst = [0usize; 3];
    let mut empty = false;
    for a in 0..3 {
        let start = center[a] as isize - half;
        let end = start + side as isize;
        let s0 = start.max(0);
        let s1 = end.min(dims[a] as isize);
        if s1 <= s0 {
            empty = true;
            break;
        }
        lo_src[a] = s0 as usize;
        hi_src[a] = s1 as usize;
        lo_dst[a] = (s0 - start) as usize;
    }
    let mut voxels = Array3::zeros((side, side, side));
    if !empty {
        let src = v.voxels.slice(s![lo_src[0]..hi_src[0], lo_src[1]..hi_src[1], lo_src[2]..hi_src[2]]);
        let (dz, dy, dx) = src.dim();
        voxels
            .slice_mut(s![lo_dst[0]..lo_dst[0] + dz, lo_dst[1]..lo_dst[1] + dy, lo_dst[2]..lo_dst[2] + dx])
            .assign(&src);
    }
    Patch3D { voxels, center, side }
}

/// Quarter turns about the z, y and x axes, applied in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Rotation3 {
    pub turns: [u8; 3],
}

impl Rotation3 {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            turns: [rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..4)],
        }
    }

    pub fn apply(&self, cube: &Array3<f32>) -> Array3<f32> {
        // rotation about an axis turns the plane of the other two
        const PLANES: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];
        let mut out = cube.clone();
        for (&(a, b), &t) in PLANES.iter().zip(&self.turns) {
            for _ in 0..t % 4 {
                let mut v = out.view();
                v.swap_axes(a, b);
                v.invert_axis(Axis(a));
                out = v.as_standard_layout().into_owned();
            }
        }
        out
    }
}

/// Random right-angle rotation of a cubic patch; the label is unchanged.
pub fn augment_3d<R: Rng + ?Sized>(patch: &Array3<f32>, label: bool, rng: &mut R) -> (Array3<f32>, bool) {
    (Rotation3::random(rng).apply(patch), label)
}

/// Binary cross-entropy and its derivative with respect to `p`.
pub fn binary_cross_entropy(p: f64, y: f64) -> (f64, f64) {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    (loss, (p - y) / (p * (1.0 - p)))
}

/// Equal-weight combination of the large-patch score, the small-patch score
/// and the score of whichever classifier the box size selects.
pub fn ensemble_probability(p_archi2: f64, p_archi3: f64, bbox_side: u32) -> f64 {
    let routed = if bbox_side < ROUTING_SIDE_PX { p_archi3 } else { p_archi2 };
    (p_archi2 + p_archi3 + routed) / 3.0
}

/// Scores one candidate with both classifiers.
pub fn ensemble_score(c: &Candidate, v: &CtVolume, models: &mut FprEnsemble) -> Result<f64> {
    Ok(score_candidates(v, std::slice::from_ref(c), models)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn volume() -> CtVolume {
        let v = Array3::from_shape_fn((40, 36, 44), |(z, y, x)| (z * 10000 + y * 100 + x) as f32);
        CtVolume::new(v, [1.0; 3], [0.0; 3], "v").unwrap()
    }

    fn cand(x: f64, y: f64, z: f64, side: u32) -> Candidate {
        Candidate {
            series_id: "v".into(),
            center_voxel: [x, y, z],
            center_world: [x, y, z],
            bbox_side: side,
            bbox_mm: side as f64,
            source_thicknesses: BTreeSet::from([1]),
            probability: 1.0,
        }
    }

    #[test]
    fn interior_patch_equals_slicing() {
        let v = volume();
        let p = extract_patch(&v, &cand(20.0, 18.0, 19.6, 8), 16).unwrap();
        assert_eq!(p.center, [20, 18, 20]);
        assert_eq!(p.voxels, v.voxels.slice(s![12..28, 10..26, 12..28]).to_owned());
        assert_eq!(p, extract_patch(&v, &cand(20.0, 18.0, 19.6, 8), 16).unwrap());
    }

    #[test]
    fn corner_patch_fills_one_octant() {
        let v = volume();
        let p = extract_patch(&v, &cand(0.0, 0.0, 0.0, 4), 16).unwrap();
        for ((z, y, x), &val) in p.voxels.indexed_iter() {
            if z >= 8 && y >= 8 && x >= 8 {
                assert_eq!(val, v.voxels[[z - 8, y - 8, x - 8]]);
            } else {
                assert_eq!(val, 0.0);
            }
        }
        assert!(matches!(extract_patch(&v, &cand(-3.0, 0.0, 0.0, 4), 16), Err(Error::Contract(_))));
    }

    #[test]
    fn rotation_identities() {
        let cube = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| (z * 16 + y * 4 + x) as f32);
        assert_eq!(Rotation3::default().apply(&cube), cube);
        let z90 = Rotation3 { turns: [1, 0, 0] };
        let mut r = cube.clone();
        for _ in 0..4 {
            r = z90.apply(&r);
        }
        assert_eq!(r, cube);
        assert_ne!(z90.apply(&cube), cube);
        // each quarter turn keeps the slice of its axis
        assert_eq!(z90.apply(&cube).index_axis(Axis(0), 2).sum(), cube.index_axis(Axis(0), 2).sum());
    }

    #[test]
    fn cross_entropy_identities() {
        assert!((binary_cross_entropy(0.5, 1.0).0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((binary_cross_entropy(0.5, 0.0).0 - std::f64::consts::LN_2).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p: f64 = rng.gen_range(0.01..0.99);
            let y = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            let h = 1e-6;
            let fd = (binary_cross_entropy(p + h, y).0 - binary_cross_entropy(p - h, y).0) / (2.0 * h);
            let g = binary_cross_entropy(p, y).1;
            assert!((fd - g).abs() <= 1e-3 * g.abs(), "{fd} vs {g}");
        }
    }

    #[test]
    fn ensemble_examples() {
        assert!((ensemble_probability(0.9, 0.3, 10) - 0.5).abs() < 1e-12);
        assert!((ensemble_probability(0.9, 0.3, 20) - 0.7).abs() < 1e-12);
        assert!((ensemble_probability(0.42, 0.42, 3) - 0.42).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rotation_permutes_voxels(t0 in 0u8..4, t1 in 0u8..4, t2 in 0u8..4) {
            let cube = Array3::from_shape_fn((5, 5, 5), |(z, y, x)| (z * 25 + y * 5 + x) as f32);
            let r = Rotation3 { turns: [t0, t1, t2] }.apply(&cube);
            let mut a: Vec<f32> = cube.iter().copied().collect();
            let mut b: Vec<f32> = r.iter().copied().collect();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ensemble_is_convex(p2 in 0.0f64..=1.0, p3 in 0.0f64..=1.0, side in 1u32..40) {
            let s = ensemble_probability(p2, p3, side);
            prop_assert!(s >= p2.min(p3) - 1e-12 && s <= p2.max(p3) + 1e-12);
        }
    }
}
