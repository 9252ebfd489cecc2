//! Binary morphology on axial slices with disk structuring elements.
//!
//! Dilation and erosion by a disk of radius `r` are evaluated through an
//! exact squared Euclidean distance transform, so cost does not grow with
//! the radius.

use ndarray::Array2;

const FAR: f64 = 1e12;

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from each pixel to the nearest `true` pixel.
pub fn squared_distance_to(features: &Array2<bool>) -> Array2<f64> {
    let (h, w) = features.dim();
    let mut d = features.mapv(|b| if b { 0.0 } else { FAR });
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = d[[y, x]];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            d[[y, x]] = out[y];
        }
    }
    for y in 0..h {
        for x in 0..w {
            f[x] = d[[y, x]];
        }
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        for x in 0..w {
            d[[y, x]] = out[x];
        }
    }
    d
}

pub fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 || !mask.iter().any(|&b| b) {
        return mask.clone();
    }
    let r2 = (radius * radius) as f64;
    squared_distance_to(mask).mapv(|d| d <= r2)
}

/// Erosion that treats pixels outside the slice as foreground.
pub fn erode(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let background = mask.mapv(|b| !b);
    if !background.iter().any(|&b| b) {
        return mask.clone();
    }
    let r2 = (radius * radius) as f64;
    squared_distance_to(&background).mapv(|d| d > r2)
}

/// Dilation followed by erosion; never removes foreground.
pub fn close(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    erode(&dilate(mask, radius), radius)
}

/// Sets every background region not 4-connected to the slice border.
pub fn fill_holes(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) && !mask[[y, x]] && !outside[[y, x]] {
                outside[[y, x]] = true;
                stack.push((y, x));
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        let nbrs = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        for (ny, nx) in nbrs {
            if ny < h && nx < w && !mask[[ny, nx]] && !outside[[ny, nx]] {
                outside[[ny, nx]] = true;
                stack.push((ny, nx));
            }
        }
    }
    outside.mapv(|o| !o)
}
