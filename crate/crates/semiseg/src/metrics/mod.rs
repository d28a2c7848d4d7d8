//! Evaluation metrics: Dice, Jaccard, average surface distance, and 95th
//! percentile Hausdorff distance, plus report assembly and emission.
//!
//! Surface distances use boundary voxels (foreground voxels with a background
//! 6-neighbor, volume border counting as background) and exact Euclidean
//! distances between boundary voxel centers, scaled by voxel spacing. The
//! optimized path runs a linear-time distance transform; [`reference`] holds
//! the independent O(n^2) implementations the optimized kernels are tested
//! against. The 95th percentile interpolates linearly between order
//! statistics.

pub mod reference;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::geometry;
use crate::grid::Grid3;
use crate::volumes::BinaryMask;

fn check_shapes(a: &BinaryMask, b: &BinaryMask, context: &str) -> Result<()> {
    geometry::checked_shape_pair(a.shape, b.shape, context)
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`; two empty masks score 1.0.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shapes(a, b, "dice")?;
    let inter = a
        .data
        .iter()
        .zip(b.data.iter())
        .filter(|(&x, &y)| x == 1 && y == 1)
        .count();
    let total = a.count_fg() + b.count_fg();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Jaccard index `|A∩B| / |A∪B|`; two empty masks score 1.0.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shapes(a, b, "jaccard")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        if x == 1 && y == 1 {
            inter += 1;
        }
        if x == 1 || y == 1 {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Directed boundary-to-boundary distances in both directions. Errors if
/// either mask is empty (no surface).
pub fn surface_distances(
    a: &BinaryMask,
    b: &BinaryMask,
    spacing: [f64; 3],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shapes(a, b, "surface_distances")?;
    if a.is_empty_mask() {
        return Err(SegError::EmptySurface("first mask".into()));
    }
    if b.is_empty_mask() {
        return Err(SegError::EmptySurface("second mask".into()));
    }
    let ba = geometry::boundary(a);
    let bb = geometry::boundary(b);
    let to_b = distances_at(&ba, &bb, spacing);
    let to_a = distances_at(&bb, &ba, spacing);
    Ok((to_b, to_a))
}

/// For each foreground voxel of `from`, the Euclidean distance to the nearest
/// foreground voxel of `to`, in scan order.
fn distances_at(from: &BinaryMask, to: &BinaryMask, spacing: [f64; 3]) -> Vec<f64> {
    let seeds = Grid3::from_vec(to.shape, to.data.clone());
    let d2 = geometry::edt_squared(&seeds, spacing);
    from.data
        .iter()
        .zip(d2.data.iter())
        .filter_map(|(&m, &d)| (m == 1).then(|| d.sqrt()))
        .collect()
}

/// Average surface distance: mean of both directed distance lists.
pub fn asd(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    let (ab, ba) = surface_distances(a, b, spacing)?;
    let n = ab.len() + ba.len();
    Ok(ab.iter().chain(ba.iter()).sum::<f64>() / n as f64)
}

/// 95th percentile of the concatenated directed distances, with linear
/// interpolation between order statistics.
pub fn hd95(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    let (mut ab, mut ba) = surface_distances(a, b, spacing)?;
    ab.append(&mut ba);
    Ok(percentile(&mut ab, 95.0))
}

/// Linear-interpolation percentile of an unsorted sample (sorts in place):
/// rank `q/100 * (n-1)` interpolated between adjacent order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    assert!((0.0..=100.0).contains(&q));
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < values.len() {
        values[lo] + frac * (values[lo + 1] - values[lo])
    } else {
        values[lo]
    }
}

/// Distance unit of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceUnit {
    Voxel,
    Millimeter,
}

/// Per-case metric values before sentinel substitution. `None` distances
/// mean the surface was undefined (an empty mask on either side).
#[derive(Debug, Clone)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice_pct: f64,
    pub jaccard_pct: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

/// Compute all four metrics for one prediction/reference pair. Distances use
/// unit voxel spacing in [`DistanceUnit::Voxel`] mode, the given spacing in
/// millimeter mode.
pub fn case_metrics(
    case_id: &str,
    pred: &BinaryMask,
    truth: &BinaryMask,
    spacing: [f64; 3],
    unit: DistanceUnit,
) -> Result<CaseMetrics> {
    let s = match unit {
        DistanceUnit::Voxel => [1.0, 1.0, 1.0],
        DistanceUnit::Millimeter => spacing,
    };
    let d = dice(pred, truth)?;
    let j = jaccard(pred, truth)?;
    let (asd_v, hd_v) = match surface_distances(pred, truth, s) {
        Ok((mut ab, mut ba)) => {
            let n = (ab.len() + ba.len()) as f64;
            let mean = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / n;
            ab.append(&mut ba);
            (Some(mean), Some(percentile(&mut ab, 95.0)))
        }
        Err(SegError::EmptySurface(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dice_pct: 100.0 * d,
        jaccard_pct: 100.0 * j,
        asd: asd_v,
        hd95: hd_v,
    })
}

/// One row of a finished report; undefined distances have been replaced by
/// the worst-in-split sentinel and flagged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub dice_pct: f64,
    pub jaccard_pct: f64,
    pub asd: f64,
    pub hd95: f64,
    pub distance_sentinel: bool,
}

/// Evaluation report: per-case rows plus aggregate means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub unit: DistanceUnit,
    pub cases: Vec<CaseRow>,
    pub mean_dice_pct: f64,
    pub mean_jaccard_pct: f64,
    pub mean_asd: f64,
    pub mean_hd95: f64,
}

impl MetricsReport {
    /// Assemble a report. Cases with undefined surface distances receive the
    /// worst (maximum) defined distance in the split as a sentinel and are
    /// flagged; if no case has a defined distance the sentinel is 0.
    pub fn from_cases(cases: Vec<CaseMetrics>, unit: DistanceUnit) -> Self {
        let max_asd = cases
            .iter()
            .filter_map(|c| c.asd)
            .fold(0.0f64, f64::max);
        let max_hd = cases
            .iter()
            .filter_map(|c| c.hd95)
            .fold(0.0f64, f64::max);
        let rows: Vec<CaseRow> = cases
            .into_iter()
            .map(|c| {
                let sentinel = c.asd.is_none() || c.hd95.is_none();
                CaseRow {
                    case_id: c.case_id,
                    dice_pct: c.dice_pct,
                    jaccard_pct: c.jaccard_pct,
                    asd: c.asd.unwrap_or(max_asd),
                    hd95: c.hd95.unwrap_or(max_hd),
                    distance_sentinel: sentinel,
                }
            })
            .collect();
        let n = rows.len().max(1) as f64;
        MetricsReport {
            unit,
            mean_dice_pct: rows.iter().map(|r| r.dice_pct).sum::<f64>() / n,
            mean_jaccard_pct: rows.iter().map(|r| r.jaccard_pct).sum::<f64>() / n,
            mean_asd: rows.iter().map(|r| r.asd).sum::<f64>() / n,
            mean_hd95: rows.iter().map(|r| r.hd95).sum::<f64>() / n,
            cases: rows,
        }
    }

    /// CSV with one row per case and a trailing aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,dice_pct,jaccard_pct,asd,hd95,distance_sentinel\n");
        for r in &self.cases {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.case_id, r.dice_pct, r.jaccard_pct, r.asd, r.hd95, r.distance_sentinel
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.6},\n",
            self.mean_dice_pct, self.mean_jaccard_pct, self.mean_asd, self.mean_hd95
        ));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_voxel(shape: [usize; 3], at: (usize, usize, usize)) -> BinaryMask {
        let mut m = BinaryMask::zeros(shape);
        *m.get_mut(at.0, at.1, at.2) = 1;
        m
    }

    fn random_mask(shape: [usize; 3], fill: f64, seed: u64) -> BinaryMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..crate::grid::numel(shape))
            .map(|_| u8::from(rng.gen_bool(fill)))
            .collect();
        BinaryMask::from_vec(shape, data)
    }

    #[test]
    fn overlap_hand_values() {
        let shape = [4, 5, 10];
        let mut a = BinaryMask::zeros(shape);
        let mut b = BinaryMask::zeros(shape);
        // |A| = |B| = 100, |A∩B| = 50
        for i in 0..100 {
            a.data[i] = 1;
            b.data[i + 50] = 1;
        }
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        // |A∩B| = 50, |A∪B| = 150
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_and_disjoint_masks() {
        let a = random_mask([6, 6, 6], 0.3, 1);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        let empty = BinaryMask::zeros([6, 6, 6]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        let b = single_voxel([6, 6, 6], (0, 0, 0));
        let c = single_voxel([6, 6, 6], (5, 5, 5));
        assert_eq!(dice(&b, &c).unwrap(), 0.0);
        assert_eq!(jaccard(&b, &c).unwrap(), 0.0);
    }

    #[test]
    fn jaccard_dice_identity_on_fuzz() {
        for seed in 0..50 {
            let a = random_mask([5, 5, 5], 0.4, seed);
            let b = random_mask([5, 5, 5], 0.4, seed + 1000);
            let d = dice(&a, &b).unwrap();
            let j = jaccard(&a, &b).unwrap();
            assert!((j - d / (2.0 - d)).abs() < 1e-12);
            // symmetry
            assert_eq!(d, dice(&b, &a).unwrap());
            assert_eq!(j, jaccard(&b, &a).unwrap());
        }
    }

    #[test]
    fn single_voxel_pairs_have_exact_distances() {
        let shape = [8, 8, 8];
        let a = single_voxel(shape, (1, 1, 1));
        let b = single_voxel(shape, (6, 1, 1));
        let (ab, ba) = surface_distances(&a, &b, [1.0; 3]).unwrap();
        assert_eq!(ab, vec![5.0]);
        assert_eq!(ba, vec![5.0]);
        assert_eq!(asd(&a, &b, [1.0; 3]).unwrap(), 5.0);
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), 5.0);
        // anisotropic spacing: displacement 3 voxels on the first axis
        let c = single_voxel(shape, (4, 1, 1));
        let (ac, _) = surface_distances(&a, &c, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(ac, vec![6.0]);
    }

    #[test]
    fn identical_masks_have_zero_distances() {
        let m = random_mask([8, 8, 8], 0.3, 5);
        assert_eq!(asd(&m, &m, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(&m, &m, [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = random_mask([4, 4, 4], 0.5, 2);
        let empty = BinaryMask::zeros([4, 4, 4]);
        assert!(matches!(
            surface_distances(&m, &empty, [1.0; 3]),
            Err(SegError::EmptySurface(_))
        ));
        assert!(matches!(
            surface_distances(&empty, &m, [1.0; 3]),
            Err(SegError::EmptySurface(_))
        ));
    }

    #[test]
    fn optimized_matches_reference_on_random_pairs() {
        for seed in 0..20 {
            let a = random_mask([8, 8, 8], 0.25, seed);
            let b = random_mask([8, 8, 8], 0.25, seed + 500);
            if a.is_empty_mask() || b.is_empty_mask() {
                continue;
            }
            let spacing = [1.0, 0.625, 2.0];
            assert!((dice(&a, &b).unwrap() - reference::dice(&a, &b)).abs() < 1e-12);
            assert!((jaccard(&a, &b).unwrap() - reference::jaccard(&a, &b)).abs() < 1e-12);
            let fast_asd = asd(&a, &b, spacing).unwrap();
            let slow_asd = reference::asd(&a, &b, spacing);
            assert!((fast_asd - slow_asd).abs() < 1e-9, "{fast_asd} vs {slow_asd}");
            let fast_hd = hd95(&a, &b, spacing).unwrap();
            let slow_hd = reference::hd95(&a, &b, spacing);
            assert!((fast_hd - slow_hd).abs() < 1e-9, "{fast_hd} vs {slow_hd}");
        }
    }

    #[test]
    fn metrics_are_translation_invariant() {
        let shape = [10, 10, 10];
        let mut a = BinaryMask::zeros(shape);
        let mut b = BinaryMask::zeros(shape);
        let mut a2 = BinaryMask::zeros(shape);
        let mut b2 = BinaryMask::zeros(shape);
        for (z, y, x) in [(2usize, 2usize, 2usize), (2, 2, 3), (3, 2, 2)] {
            *a.get_mut(z, y, x) = 1;
            *a2.get_mut(z + 2, y + 3, x + 1) = 1;
        }
        for (z, y, x) in [(4usize, 4usize, 4usize), (4, 5, 4)] {
            *b.get_mut(z, y, x) = 1;
            *b2.get_mut(z + 2, y + 3, x + 1) = 1;
        }
        let s = [1.0; 3];
        assert_eq!(dice(&a, &b).unwrap(), dice(&a2, &b2).unwrap());
        assert!((asd(&a, &b, s).unwrap() - asd(&a2, &b2, s).unwrap()).abs() < 1e-12);
        assert!((hd95(&a, &b, s).unwrap() - hd95(&a2, &b2, s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_applies_sentinels_and_aggregates() {
        let cases = vec![
            CaseMetrics {
                case_id: "a".into(),
                dice_pct: 80.0,
                jaccard_pct: 66.7,
                asd: Some(2.0),
                hd95: Some(6.0),
            },
            CaseMetrics {
                case_id: "b".into(),
                dice_pct: 0.0,
                jaccard_pct: 0.0,
                asd: None,
                hd95: None,
            },
        ];
        let report = MetricsReport::from_cases(cases, DistanceUnit::Voxel);
        assert_eq!(report.cases[1].asd, 2.0);
        assert_eq!(report.cases[1].hd95, 6.0);
        assert!(report.cases[1].distance_sentinel);
        assert!(!report.cases[0].distance_sentinel);
        assert_eq!(report.mean_dice_pct, 40.0);
        assert_eq!(report.mean_asd, 2.0);
        let csv = report.to_csv();
        assert!(csv.lines().count() == 4);
        assert!(csv.contains("mean,"));
        let json = report.to_json().unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.cases.len(), 2);
    }

    #[test]
    fn jaccard_never_exceeds_dice() {
        for seed in 0..30 {
            let a = random_mask([6, 6, 6], 0.35, seed);
            let b = random_mask([6, 6, 6], 0.35, seed + 31);
            assert!(jaccard(&a, &b).unwrap() <= dice(&a, &b).unwrap() + 1e-12);
        }
    }
}
