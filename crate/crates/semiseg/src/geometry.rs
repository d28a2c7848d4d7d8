//! Binary-mask geometry kernels: connected components, exact Euclidean
//! distance transforms, boundary extraction, and ball morphology.
//!
//! The distance transform is the separable lower-envelope algorithm of
//! Felzenszwalb & Huttenlocher, run once per axis with anisotropic voxel
//! spacing folded into the sample coordinates. It returns exact squared
//! Euclidean distances to the nearest seed voxel center.

use crate::grid::{idx3, Grid3};
use crate::volumes::BinaryMask;

/// Label 6-connected foreground components. Returns per-voxel labels
/// (0 = background, components numbered from 1) and the component count.
pub fn connected_components_6(mask: &BinaryMask) -> (Grid3<u32>, u32) {
    let shape = mask.shape;
    let [d, h, w] = shape;
    let mut labels: Grid3<u32> = Grid3::zeros(shape);
    let mut next = 0u32;
    let mut stack: Vec<usize> = Vec::new();

    for start in 0..mask.data.len() {
        if mask.data[start] == 0 || labels.data[start] != 0 {
            continue;
        }
        next += 1;
        labels.data[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let x = i % w;
            let y = (i / w) % h;
            let z = i / (w * h);
            let mut visit = |j: usize| {
                if mask.data[j] == 1 && labels.data[j] == 0 {
                    labels.data[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if z > 0 {
                visit(i - w * h);
            }
            if z + 1 < d {
                visit(i + w * h);
            }
        }
    }
    (labels, next)
}

/// Keep only the largest 6-connected component (ties broken by lowest label,
/// i.e. first encountered in scan order). An empty mask stays empty.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (labels, count) = connected_components_6(mask);
    if count == 0 {
        return BinaryMask::zeros(mask.shape);
    }
    let mut sizes = vec![0usize; count as usize + 1];
    for &l in &labels.data {
        sizes[l as usize] += 1;
    }
    let best = (1..=count as usize)
        .max_by_key(|&l| (sizes[l], std::cmp::Reverse(l)))
        .unwrap() as u32;
    let data = labels
        .data
        .iter()
        .map(|&l| u8::from(l == best))
        .collect::<Vec<_>>();
    BinaryMask::from_vec(mask.shape, data)
}

/// Squared Euclidean distance from every voxel to the nearest seed voxel,
/// with per-axis spacing `[sd, sh, sw]`. Voxels with no seed anywhere get
/// `f64::INFINITY`.
pub fn edt_squared(seeds: &Grid3<u8>, spacing: [f64; 3]) -> Grid3<f64> {
    let shape = seeds.shape;
    let [d, h, w] = shape;
    let mut dist: Grid3<f64> = Grid3::filled(shape, f64::INFINITY);
    for (o, &s) in dist.data.iter_mut().zip(seeds.data.iter()) {
        if s != 0 {
            *o = 0.0;
        }
    }

    let n_max = d.max(h).max(w);
    let mut scratch = Envelope::new(n_max);
    let mut line = vec![0.0f64; n_max];

    // x axis
    for z in 0..d {
        for y in 0..h {
            let base = idx3(shape, z, y, 0);
            line[..w].copy_from_slice(&dist.data[base..base + w]);
            scratch.transform(&line[..w], spacing[2], &mut dist.data[base..base + w]);
        }
    }
    // y axis
    let mut out = vec![0.0f64; n_max];
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = dist.data[idx3(shape, z, y, x)];
            }
            scratch.transform(&line[..h], spacing[1], &mut out[..h]);
            for y in 0..h {
                dist.data[idx3(shape, z, y, x)] = out[y];
            }
        }
    }
    // z axis
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = dist.data[idx3(shape, z, y, x)];
            }
            scratch.transform(&line[..d], spacing[0], &mut out[..d]);
            for z in 0..d {
                dist.data[idx3(shape, z, y, x)] = out[z];
            }
        }
    }
    dist
}

/// Lower envelope of parabolas for one 1D distance-transform pass.
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Envelope {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    /// `out[q] = min_p ( (q-p)^2 * s^2 + f[p] )` for sample spacing `s`.
    fn transform(&mut self, f: &[f64], s: f64, out: &mut [f64]) {
        let n = f.len();
        let s2 = s * s;
        let Some(first) = f.iter().position(|v| v.is_finite()) else {
            out[..n].fill(f64::INFINITY);
            return;
        };
        let mut k = 0usize;
        self.v[0] = first;
        self.z[0] = f64::NEG_INFINITY;
        self.z[1] = f64::INFINITY;
        for q in first + 1..n {
            if f[q].is_infinite() {
                continue;
            }
            loop {
                let p = self.v[k];
                let denom = 2.0 * s2 * (q - p) as f64;
                // intersection of parabola at q with the current envelope head
                let sx = (f[q] - f[p] + s2 * ((q * q - p * p) as f64)) / denom;
                if sx > self.z[k] {
                    k += 1;
                    self.v[k] = q;
                    self.z[k] = sx;
                    self.z[k + 1] = f64::INFINITY;
                    break;
                }
                if k == 0 {
                    self.v[0] = q;
                    self.z[0] = f64::NEG_INFINITY;
                    self.z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            }
        }
        k = 0;
        for q in 0..n {
            while self.z[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.v[k];
            let dq = q as f64 - p as f64;
            out[q] = dq * dq * s2 + f[p];
        }
    }
}

/// Boundary voxels of a mask: foreground voxels with at least one background
/// 6-neighbor, where the volume border counts as background.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let shape = mask.shape;
    let [d, h, w] = shape;
    let mut out = BinaryMask::zeros(shape);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx3(shape, z, y, x);
                if mask.data[i] == 0 {
                    continue;
                }
                let at_border = z == 0 || z + 1 == d || y == 0 || y + 1 == h || x == 0 || x + 1 == w;
                let has_bg_neighbor = at_border
                    || mask.data[i - 1] == 0
                    || mask.data[i + 1] == 0
                    || mask.data[i - w] == 0
                    || mask.data[i + w] == 0
                    || mask.data[i - w * h] == 0
                    || mask.data[i + w * h] == 0;
                if has_bg_neighbor {
                    out.data[i] = 1;
                }
            }
        }
    }
    out
}

/// Distance from each foreground voxel to the nearest non-foreground voxel,
/// treating everything outside the volume as background. Background voxels
/// get 0. Distances are in voxel units.
pub fn interior_distance(mask: &BinaryMask) -> Grid3<f64> {
    let [d, h, w] = mask.shape;
    // pad by one background voxel so the volume border acts as background
    let padded_shape = [d + 2, h + 2, w + 2];
    let mut seeds: Grid3<u8> = Grid3::filled(padded_shape, 1);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if *mask.get(z, y, x) == 1 {
                    *seeds.get_mut(z + 1, y + 1, x + 1) = 0;
                }
            }
        }
    }
    // invert: seeds are background voxels
    let dist = edt_squared(&seeds, [1.0, 1.0, 1.0]);
    let mut out: Grid3<f64> = Grid3::zeros(mask.shape);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if *mask.get(z, y, x) == 1 {
                    *out.get_mut(z, y, x) = dist.get(z + 1, y + 1, x + 1).sqrt();
                }
            }
        }
    }
    out
}

/// Dilate by a Euclidean ball of radius `r` voxels: the result contains every
/// voxel within distance `r` of a foreground voxel.
pub fn dilate(mask: &BinaryMask, r: f64) -> BinaryMask {
    if r <= 0.0 {
        return mask.clone();
    }
    let seeds = Grid3::from_vec(mask.shape, mask.data.clone());
    let dist = edt_squared(&seeds, [1.0, 1.0, 1.0]);
    let r2 = r * r;
    let data = dist
        .data
        .iter()
        .map(|&d2| u8::from(d2 <= r2))
        .collect::<Vec<_>>();
    BinaryMask::from_vec(mask.shape, data)
}

/// Erode by a Euclidean ball of radius `r` voxels: keeps foreground voxels
/// strictly farther than `r` from any non-foreground voxel (the volume border
/// counts as background).
pub fn erode(mask: &BinaryMask, r: f64) -> BinaryMask {
    if r <= 0.0 {
        return mask.clone();
    }
    let dist = interior_distance(mask);
    let data = mask
        .data
        .iter()
        .zip(dist.data.iter())
        .map(|(&m, &d)| u8::from(m == 1 && d > r))
        .collect::<Vec<_>>();
    BinaryMask::from_vec(mask.shape, data)
}

/// Deterministic argmax of a scalar field restricted to mask voxels; ties go
/// to the lowest `(z, y, x)` in scan order. Returns `None` for an empty mask.
pub fn argmax_in_mask(field: &Grid3<f64>, mask: &BinaryMask) -> Option<(usize, usize, usize)> {
    debug_assert_eq!(field.shape, mask.shape);
    let mut best: Option<(f64, usize)> = None;
    for (i, (&v, &m)) in field.data.iter().zip(mask.data.iter()).enumerate() {
        if m == 1 && best.map_or(true, |(bv, _)| v > bv) {
            best = Some((v, i));
        }
    }
    best.map(|(_, i)| {
        let [_, h, w] = field.shape;
        (i / (w * h), (i / w) % h, i % w)
    })
}

pub fn checked_shape_pair(a: [usize; 3], b: [usize; 3], context: &str) -> crate::error::Result<()> {
    if a != b {
        return Err(crate::SegError::ShapeMismatch {
            context: context.to_string(),
            expected: a,
            got: b,
        });
    }
    Ok(())
}
