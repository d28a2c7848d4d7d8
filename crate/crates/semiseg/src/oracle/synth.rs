//! Synthetic oracle: degraded ground truth as a stand-in for a real
//! promptable segmentation backend during desk-scale training runs.
//!
//! Degradation is a morphological offset (Euclidean ball dilation for
//! positive radii, erosion for negative) followed by random flips of
//! boundary-adjacent voxels. The noise RNG is derived from the query content
//! (seed, case, patch offset, prompts), so answers are pure functions of the
//! query and caching cannot change training trajectories.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry;
use crate::oracle::{PromptSet, QueryKey};
use crate::rng::{derive_seed, hash_bytes};
use crate::volumes::{crop_like_patch, BinaryMask};

/// Degradation parameters: signed morphological radius (voxels) and the
/// boundary flip probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub radius: f64,
    pub flip_rate: f64,
}

impl Degradation {
    pub fn new(radius: f64, flip_rate: f64) -> Self {
        assert!((0.0..=1.0).contains(&flip_rate), "flip_rate must be in [0,1]");
        Degradation { radius, flip_rate }
    }

    pub fn identity() -> Self {
        Degradation {
            radius: 0.0,
            flip_rate: 0.0,
        }
    }
}

/// Voxels adjacent to the mask boundary: foreground voxels with a background
/// 6-neighbor plus background voxels with a foreground 6-neighbor.
pub fn boundary_adjacent(mask: &BinaryMask) -> BinaryMask {
    let [d, h, w] = mask.shape;
    let mut out = BinaryMask::zeros(mask.shape);
    let at = |z: isize, y: isize, x: isize| -> Option<u8> {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            None
        } else {
            Some(*mask.get(z as usize, y as usize, x as usize))
        }
    };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = *mask.get(z, y, x);
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let neighbors = [
                    at(zi - 1, yi, xi),
                    at(zi + 1, yi, xi),
                    at(zi, yi - 1, xi),
                    at(zi, yi + 1, xi),
                    at(zi, yi, xi - 1),
                    at(zi, yi, xi + 1),
                ];
                let adjacent = if v == 1 {
                    // volume border counts as background
                    neighbors.iter().any(|n| n.unwrap_or(0) == 0)
                } else {
                    neighbors.iter().any(|n| n == &Some(1))
                };
                if adjacent {
                    *out.get_mut(z, y, x) = 1;
                }
            }
        }
    }
    out
}

/// Apply a degradation to a ground-truth mask. Flips are drawn in scan order
/// from `rng`, one draw per boundary-adjacent voxel.
pub fn synth_oracle(ground_truth: &BinaryMask, degradation: Degradation, rng: &mut ChaCha8Rng) -> BinaryMask {
    let mut out = if degradation.radius > 0.0 {
        geometry::dilate(ground_truth, degradation.radius)
    } else if degradation.radius < 0.0 {
        geometry::erode(ground_truth, -degradation.radius)
    } else {
        ground_truth.clone()
    };
    if degradation.flip_rate > 0.0 {
        let adjacent = boundary_adjacent(&out);
        for (v, &adj) in out.data.iter_mut().zip(adjacent.data.iter()) {
            if adj == 1 && rng.gen::<f64>() < degradation.flip_rate {
                *v = 1 - *v;
            }
        }
    }
    out
}

/// Test-harness oracle backend holding the ground truth of every case.
pub struct SyntheticOracle {
    pub degradation: Degradation,
    pub seed: u64,
    truths: HashMap<String, BinaryMask>,
}

impl SyntheticOracle {
    pub fn new(degradation: Degradation, seed: u64, truths: HashMap<String, BinaryMask>) -> Self {
        SyntheticOracle {
            degradation,
            seed,
            truths,
        }
    }

    /// Answer a query: crop the case ground truth exactly like the sampled
    /// patch, then degrade it with a query-derived RNG.
    pub fn query(&self, key: &QueryKey, patch_shape: [usize; 3], prompts: &PromptSet) -> BinaryMask {
        let Some(truth) = self.truths.get(&key.case_id) else {
            // unknown case: answer with an empty mask
            return BinaryMask::zeros(patch_shape);
        };
        let cropped = crop_like_patch(truth, patch_shape, key.offset);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            &[
                hash_bytes(key.case_id.as_bytes()),
                key.offset[0] as u64,
                key.offset[1] as u64,
                key.offset[2] as u64,
                prompts.content_hash(),
            ],
        ));
        synth_oracle(&cropped, self.degradation, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::volumes::{make_phantom, PhantomSpec};

    fn sphere_mask(shape: [usize; 3], r: f64) -> BinaryMask {
        make_phantom(&PhantomSpec::sphere(shape, r, 1.0, 0.0)).unwrap().1
    }

    #[test]
    fn identity_degradation_is_identity() {
        let m = sphere_mask([16, 16, 16], 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = synth_oracle(&m, Degradation::identity(), &mut rng);
        assert_eq!(out, m);
    }

    #[test]
    fn dilation_dice_matches_voxelized_sphere_volumes() {
        // dilating the radius-10 ball by 1 approximates the radius-11 ball;
        // compute the expected Dice exactly from voxel counts
        let shape = [27, 27, 27];
        let m10 = sphere_mask(shape, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dilated = synth_oracle(&m10, Degradation::new(1.0, 0.0), &mut rng);

        // brute-force dilation oracle: voxels within distance 1 of the mask
        let mut brute = BinaryMask::zeros(shape);
        for z in 0..27usize {
            for y in 0..27usize {
                for x in 0..27usize {
                    let mut near = false;
                    'search: for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                if (dz * dz + dy * dy + dx * dx) as f64 > 1.0 {
                                    continue;
                                }
                                let (nz, ny, nx) =
                                    (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                                if nz >= 0
                                    && ny >= 0
                                    && nx >= 0
                                    && nz < 27
                                    && ny < 27
                                    && nx < 27
                                    && *m10.get(nz as usize, ny as usize, nx as usize) == 1
                                {
                                    near = true;
                                    break 'search;
                                }
                            }
                        }
                    }
                    if near {
                        *brute.get_mut(z, y, x) = 1;
                    }
                }
            }
        }
        assert_eq!(dilated, brute, "EDT dilation must equal brute-force dilation");

        let d = metrics::dice(&dilated, &m10).unwrap();
        let v10 = m10.count_fg() as f64;
        let v11 = sphere_mask(shape, 11.0).count_fg() as f64;
        let approx = 2.0 * v10 / (v10 + v11);
        assert!((d - approx).abs() < 0.03, "dice {d} vs sphere-volume approx {approx}");
    }

    #[test]
    fn full_flip_rate_flips_exactly_the_boundary_band() {
        let m = sphere_mask([16, 16, 16], 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = synth_oracle(&m, Degradation::new(0.0, 1.0), &mut rng);
        let adjacent = boundary_adjacent(&m);
        for i in 0..m.data.len() {
            if adjacent.data[i] == 1 {
                assert_eq!(out.data[i], 1 - m.data[i], "voxel {i} must flip");
            } else {
                assert_eq!(out.data[i], m.data[i], "voxel {i} must not change");
            }
        }
    }

    #[test]
    fn boundary_adjacent_matches_brute_force() {
        let m = sphere_mask([12, 12, 12], 3.5);
        let adj = boundary_adjacent(&m);
        let [d, h, w] = m.shape;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut near_opposite = false;
                    let v = *m.get(z, y, x);
                    for (dz, dy, dx) in
                        [(-1i64, 0i64, 0i64), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
                    {
                        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        let nv = if nz < 0 || ny < 0 || nx < 0 || nz >= d as i64 || ny >= h as i64 || nx >= w as i64
                        {
                            if v == 1 { Some(0) } else { None }
                        } else {
                            Some(*m.get(nz as usize, ny as usize, nx as usize))
                        };
                        if nv == Some(1 - v) {
                            near_opposite = true;
                        }
                    }
                    assert_eq!(*adj.get(z, y, x) == 1, near_opposite, "at ({z},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn erosion_shrinks_and_dilation_grows() {
        let m = sphere_mask([20, 20, 20], 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grown = synth_oracle(&m, Degradation::new(1.5, 0.0), &mut rng);
        let shrunk = synth_oracle(&m, Degradation::new(-1.5, 0.0), &mut rng);
        assert!(grown.count_fg() > m.count_fg());
        assert!(shrunk.count_fg() < m.count_fg());
        // erosion keeps a subset, dilation a superset
        for i in 0..m.data.len() {
            assert!(shrunk.data[i] <= m.data[i]);
            assert!(grown.data[i] >= m.data[i]);
        }
    }

    #[test]
    fn oracle_answers_are_query_deterministic() {
        let m = sphere_mask([14, 14, 14], 4.0);
        let mut truths = HashMap::new();
        truths.insert("k".to_string(), m);
        let o = SyntheticOracle::new(Degradation::new(1.0, 0.1), 9, truths);
        let key = QueryKey {
            case_id: "k".into(),
            offset: [0; 3],
        };
        let prompts = PromptSet::default();
        let a = o.query(&key, [14, 14, 14], &prompts);
        let b = o.query(&key, [14, 14, 14], &prompts);
        assert_eq!(a, b);
    }
}
