//! Connected-component labelling on 2-D and 3-D boolean grids.

use ndarray::{Array2, Array3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity2 {
    Four,
    Eight,
}

/// Labels foreground components; background is 0 and components are
/// numbered from 1 in raster order of their first pixel. Returns the label
/// image and the pixel count of each component (index 0 unused).
pub fn label_2d(mask: &Array2<bool>, conn: Connectivity2) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    let offsets: &[(isize, isize)] = match conn {
        Connectivity2::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity2::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            let id = sizes.len() as u32;
            let mut count = 0;
            labels[[y, x]] = id;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                count += 1;
                for &(dy, dx) in offsets {
                    let ny = cy as isize + dy;
                    let nx = cx as isize + dx;
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = id;
                        stack.push((ny, nx));
                    }
                }
            }
            sizes.push(count);
        }
    }
    (labels, sizes)
}

/// 26-connected labelling of a `[z, y, x]` volume.
pub fn label_3d(mask: &Array3<bool>) -> (Array3<u32>, Vec<usize>) {
    let (d, h, w) = mask.dim();
    let mut labels = Array3::<u32>::zeros((d, h, w));
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[[z, y, x]] || labels[[z, y, x]] != 0 {
                    continue;
                }
                let id = sizes.len() as u32;
                let mut count = 0;
                labels[[z, y, x]] = id;
                stack.push((z, y, x));
                while let Some((cz, cy, cx)) = stack.pop() {
                    count += 1;
                    for dz in -1isize..=1 {
                        for dy in -1isize..=1 {
                            for dx in -1isize..=1 {
                                let (nz, ny, nx) = (cz as isize + dz, cy as isize + dy, cx as isize + dx);
                                if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                                    continue;
                                }
                                let p = [nz as usize, ny as usize, nx as usize];
                                if mask[p] && labels[p] == 0 {
                                    labels[p] = id;
                                    stack.push((p[0], p[1], p[2]));
                                }
                            }
                        }
                    }
                }
                sizes.push(count);
            }
        }
    }
    (labels, sizes)
}
