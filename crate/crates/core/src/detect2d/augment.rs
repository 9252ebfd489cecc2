use ndarray::Array2;
use rand::Rng;

/// Largest translation (pixels per axis) drawn by [`Augment2d::random`].
pub const MAX_SHIFT: isize = 30;

/// A rigid image transform: flips, then a quarter-turn rotation, then a
/// translation with zero fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment2d {
    /// Counter-clockwise quarter turns (0..4).
    pub quarter_turns: u8,
    pub flip_vertical: bool,
    pub flip_horizontal: bool,
    /// (dy, dx) translation in pixels.
    pub shift: (isize, isize),
}

impl Augment2d {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_shift: isize) -> Self {
        let flip = rng.gen_range(0..4u8);
        Self {
            quarter_turns: rng.gen_range(0..4),
            flip_vertical: flip & 1 == 1,
            flip_horizontal: flip & 2 == 2,
            shift: (rng.gen_range(-max_shift..=max_shift), rng.gen_range(-max_shift..=max_shift)),
        }
    }

    pub fn apply(&self, img: &Array2<f32>) -> Array2<f32> {
        let (h, w) = img.dim();
        assert_eq!(h, w, "augmentation needs square images");
        let n = h;
        let (dy, dx) = self.shift;
        Array2::from_shape_fn((n, n), |(y, x)| {
            // invert translation
            let (ty, tx) = (y as isize - dy, x as isize - dx);
            if ty < 0 || tx < 0 || ty >= n as isize || tx >= n as isize {
                return 0.0;
            }
            // invert rotation: output (r, c) of a CCW turn reads input (c, n-1-r)
            let (mut sy, mut sx) = (ty as usize, tx as usize);
            for _ in 0..self.quarter_turns % 4 {
                let (ny, nx) = (sx, n - 1 - sy);
                sy = ny;
                sx = nx;
            }
            if self.flip_vertical {
                sy = n - 1 - sy;
            }
            if self.flip_horizontal {
                sx = n - 1 - sx;
            }
            img[[sy, sx]]
        })
    }
}

/// Applies one random transform identically to an image and its label.
pub fn augment_2d<R: Rng + ?Sized>(image: &Array2<f32>, label: &Array2<f32>, rng: &mut R) -> (Array2<f32>, Array2<f32>) {
    let t = Augment2d::random(rng, MAX_SHIFT);
    (t.apply(image), t.apply(label))
}
