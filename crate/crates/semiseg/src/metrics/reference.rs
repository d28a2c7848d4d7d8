//! Independent brute-force reference implementations of the evaluation
//! metrics.
//!
//! Everything here is written against the metric definitions directly —
//! triple loops, pairwise O(n^2) distances, no shared kernels with the
//! optimized paths — and exists so the optimized implementations can be
//! checked against an oracle that cannot share their bugs. Use the optimized
//! [`crate::metrics`] functions everywhere else.

use crate::volumes::BinaryMask;

pub fn dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let [d, h, w] = a.shape;
    let mut inter = 0usize;
    let mut sa = 0usize;
    let mut sb = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let va = *a.get(z, y, x) == 1;
                let vb = *b.get(z, y, x) == 1;
                if va {
                    sa += 1;
                }
                if vb {
                    sb += 1;
                }
                if va && vb {
                    inter += 1;
                }
            }
        }
    }
    if sa + sb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sa + sb) as f64
    }
}

pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let [d, h, w] = a.shape;
    let mut inter = 0usize;
    let mut union = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let va = *a.get(z, y, x) == 1;
                let vb = *b.get(z, y, x) == 1;
                if va && vb {
                    inter += 1;
                }
                if va || vb {
                    union += 1;
                }
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Boundary voxel coordinates found by direct neighbor inspection.
fn boundary_coords(m: &BinaryMask) -> Vec<[usize; 3]> {
    let [d, h, w] = m.shape;
    let is_bg = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            return true;
        }
        *m.get(z as usize, y as usize, x as usize) == 0
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if *m.get(z, y, x) != 1 {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                if is_bg(zi - 1, yi, xi)
                    || is_bg(zi + 1, yi, xi)
                    || is_bg(zi, yi - 1, xi)
                    || is_bg(zi, yi + 1, xi)
                    || is_bg(zi, yi, xi - 1)
                    || is_bg(zi, yi, xi + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// All pairwise-minimum directed distances `surface(a) -> surface(b)` and the
/// reverse, by exhaustive search.
pub fn surface_distances(
    a: &BinaryMask,
    b: &BinaryMask,
    spacing: [f64; 3],
) -> (Vec<f64>, Vec<f64>) {
    let ba = boundary_coords(a);
    let bb = boundary_coords(b);
    assert!(
        !ba.is_empty() && !bb.is_empty(),
        "reference surface distance needs non-empty masks"
    );
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let dz = (p[0] as f64 - q[0] as f64) * spacing[0];
                        let dy = (p[1] as f64 - q[1] as f64) * spacing[1];
                        let dx = (p[2] as f64 - q[2] as f64) * spacing[2];
                        (dz * dz + dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    (directed(&ba, &bb), directed(&bb, &ba))
}

pub fn asd(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> f64 {
    let (ab, ba) = surface_distances(a, b, spacing);
    let n = (ab.len() + ba.len()) as f64;
    (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / n
}

pub fn hd95(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> f64 {
    let (ab, ba) = surface_distances(a, b, spacing);
    let mut all: Vec<f64> = ab.into_iter().chain(ba).collect();
    all.sort_by(f64::total_cmp);
    let rank = 0.95 * (all.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < all.len() {
        all[lo] * (1.0 - frac) + all[lo + 1] * frac
    } else {
        all[lo]
    }
}
