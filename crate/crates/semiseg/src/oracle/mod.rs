//! Prompt extraction and the promptable-oracle backend contract.
//!
//! The student's coarse prediction is binarized, reduced to its largest
//! 6-connected component, and turned into point prompts: the first point is
//! the deepest-interior voxel (argmax of the interior distance transform,
//! guaranteed inside even for non-convex shapes), further points are sampled
//! from the component interior with a minimum pairwise separation when
//! feasible. An empty prediction yields an empty prompt set, which signals
//! "skip the oracle this step" — the cold-start rule.
//!
//! Backends: a synthetic oracle for desk-scale testing (degraded ground
//! truth), an out-of-process spool-directory adapter speaking a versioned
//! wire format, and an always-skip stub for ablation runs.

pub mod adapter;
pub mod synth;

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::geometry;
use crate::network::ProbMap;
use crate::rng::hash_bytes;
use crate::volumes::BinaryMask;

pub use adapter::SpoolAdapter;
pub use synth::{synth_oracle, Degradation, SyntheticOracle};

/// Prompt point polarity: a positive point marks the object, a negative
/// point marks background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A single voxel-coordinate prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPoint {
    pub z: usize,
    pub y: usize,
    pub x: usize,
    pub polarity: Polarity,
}

/// Ordered point prompts for one oracle query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSet {
    pub points: Vec<PromptPoint>,
}

impl PromptSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Stable content hash, used to derive per-query RNG streams and cache keys.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.points.len() * 25);
        for p in &self.points {
            bytes.extend_from_slice(&(p.z as u64).to_le_bytes());
            bytes.extend_from_slice(&(p.y as u64).to_le_bytes());
            bytes.extend_from_slice(&(p.x as u64).to_le_bytes());
            bytes.push(matches!(p.polarity, Polarity::Positive) as u8);
        }
        hash_bytes(&bytes)
    }
}

/// Minimum pairwise separation between sampled prompt points, in voxels.
pub const MIN_PROMPT_SEPARATION: f64 = 4.0;

/// Extract positive point prompts from a probability map.
///
/// The foreground is binarized at 0.5 (ties to background), reduced to its
/// largest 6-connected component; the first prompt is the interior
/// distance-transform argmax, further prompts are drawn uniformly from the
/// component interior, keeping [`MIN_PROMPT_SEPARATION`] from previous points
/// when feasible. Returns an empty set when the prediction has no foreground.
pub fn extract_prompts(prob_map: &ProbMap, k_positive: usize, rng: &mut ChaCha8Rng) -> PromptSet {
    assert!(k_positive >= 1, "k_positive must be at least 1");
    let fg = prob_map.foreground();
    let bin = BinaryMask::from_vec(
        prob_map.shape,
        fg.iter().map(|&p| u8::from(p > 0.5)).collect(),
    );
    if bin.is_empty_mask() {
        return PromptSet::default();
    }
    let component = geometry::largest_component(&bin);
    let depth = geometry::interior_distance(&component);
    let Some(first) = geometry::argmax_in_mask(&depth, &component) else {
        return PromptSet::default();
    };
    let mut points = vec![PromptPoint {
        z: first.0,
        y: first.1,
        x: first.2,
        polarity: Polarity::Positive,
    }];

    if k_positive > 1 {
        // interior candidates: voxels strictly inside the component; fall
        // back to the whole component for thin shapes
        let [_, h, w] = component.shape;
        let mut interior: Vec<usize> = depth
            .data
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| (d > 1.0).then_some(i))
            .collect();
        if interior.len() < k_positive {
            interior = component.fg_indices();
        }
        let sep_sq = MIN_PROMPT_SEPARATION * MIN_PROMPT_SEPARATION;
        let far_enough = |i: usize, chosen: &[PromptPoint]| -> bool {
            let (z, y, x) = (i / (w * h), (i / w) % h, i % w);
            chosen.iter().all(|p| {
                let dz = z as f64 - p.z as f64;
                let dy = y as f64 - p.y as f64;
                let dx = x as f64 - p.x as f64;
                dz * dz + dy * dy + dx * dx >= sep_sq
            })
        };
        while points.len() < k_positive && points.len() < interior.len() + 1 {
            let mut pick = None;
            for _ in 0..64 {
                let i = interior[rng.gen_range(0..interior.len())];
                if far_enough(i, &points) {
                    pick = Some(i);
                    break;
                }
            }
            // separation infeasible: accept an arbitrary interior voxel
            let i = pick.unwrap_or_else(|| interior[rng.gen_range(0..interior.len())]);
            let (z, y, x) = (i / (w * h), (i / w) % h, i % w);
            if points.iter().any(|p| (p.z, p.y, p.x) == (z, y, x)) {
                continue;
            }
            points.push(PromptPoint {
                z,
                y,
                x,
                polarity: Polarity::Positive,
            });
        }
    }
    PromptSet { points }
}

/// Which backend produced a pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Synthetic,
    ExternalAdapter,
    AlwaysSkip,
}

/// An oracle answer: a binary mask plus provenance, or a recorded skip.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub mask: Option<BinaryMask>,
    pub prompts: PromptSet,
    pub backend: BackendKind,
    pub elapsed_ms: u64,
    pub skip_reason: Option<String>,
}

impl PseudoLabel {
    pub fn skipped(&self) -> bool {
        self.mask.is_none()
    }

    fn skip(backend: BackendKind, prompts: PromptSet, elapsed_ms: u64, reason: String) -> Self {
        PseudoLabel {
            mask: None,
            prompts,
            backend,
            elapsed_ms,
            skip_reason: Some(reason),
        }
    }
}

/// Identifies the patch a query refers to, so harness backends can look up
/// ground truth. The offset is in the padded frame of
/// [`crate::volumes::sample_patch`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QueryKey {
    pub case_id: String,
    pub offset: [usize; 3],
}

/// The available oracle backends.
pub enum OracleBackend {
    Synthetic(SyntheticOracle),
    Adapter(SpoolAdapter),
    /// Answers every query with a skip; ablation runs use this to prove the
    /// oracle branch is inert when disabled.
    AlwaysSkip,
}

impl OracleBackend {
    pub fn kind(&self) -> BackendKind {
        match self {
            OracleBackend::Synthetic(_) => BackendKind::Synthetic,
            OracleBackend::Adapter(_) => BackendKind::ExternalAdapter,
            OracleBackend::AlwaysSkip => BackendKind::AlwaysSkip,
        }
    }
}

/// Query the oracle for a pseudo-label on `patch`.
///
/// Preconditions: `prompts` must be non-empty (checked before any backend
/// work). Backend failures and timeouts are mapped to a skipped pseudo-label,
/// never an error, so a training loop cannot crash mid-run on oracle trouble.
pub fn query_oracle(
    backend: &OracleBackend,
    key: &QueryKey,
    patch: &crate::volumes::Volume,
    prompts: &PromptSet,
) -> Result<PseudoLabel> {
    if prompts.is_empty() {
        return Err(SegError::EmptyPrompts);
    }
    let start = Instant::now();
    match backend {
        OracleBackend::AlwaysSkip => Ok(PseudoLabel::skip(
            BackendKind::AlwaysSkip,
            prompts.clone(),
            0,
            "always-skip backend".into(),
        )),
        OracleBackend::Synthetic(s) => {
            let mask = s.query(key, patch.shape, prompts);
            Ok(PseudoLabel {
                mask: Some(mask),
                prompts: prompts.clone(),
                backend: BackendKind::Synthetic,
                elapsed_ms: start.elapsed().as_millis() as u64,
                skip_reason: None,
            })
        }
        OracleBackend::Adapter(a) => match a.query(patch, prompts) {
            Ok(mask) => Ok(PseudoLabel {
                mask: Some(mask),
                prompts: prompts.clone(),
                backend: BackendKind::ExternalAdapter,
                elapsed_ms: start.elapsed().as_millis() as u64,
                skip_reason: None,
            }),
            Err(reason) => Ok(PseudoLabel::skip(
                BackendKind::ExternalAdapter,
                prompts.clone(),
                start.elapsed().as_millis() as u64,
                reason,
            )),
        },
    }
}

/// LRU cache over oracle queries keyed by `(case, patch offset, prompts)`.
/// Skipped answers are not cached (they are transient failures).
pub struct CachedOracle {
    pub backend: OracleBackend,
    capacity: usize,
    entries: HashMap<(QueryKey, PromptSet), (u64, PseudoLabel)>,
    clock: u64,
    pub hits: u64,
    pub misses: u64,
}

impl CachedOracle {
    pub fn new(backend: OracleBackend, capacity: usize) -> Self {
        CachedOracle {
            backend,
            capacity: capacity.max(1),
            entries: HashMap::new(),
            clock: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn query(
        &mut self,
        key: &QueryKey,
        patch: &crate::volumes::Volume,
        prompts: &PromptSet,
    ) -> Result<PseudoLabel> {
        self.clock += 1;
        let cache_key = (key.clone(), prompts.clone());
        if let Some((used, label)) = self.entries.get_mut(&cache_key) {
            *used = self.clock;
            self.hits += 1;
            return Ok(label.clone());
        }
        self.misses += 1;
        let label = query_oracle(&self.backend, key, patch, prompts)?;
        if !label.skipped() {
            if self.entries.len() >= self.capacity {
                if let Some(oldest) = self
                    .entries
                    .iter()
                    .min_by_key(|(_, (used, _))| *used)
                    .map(|(k, _)| k.clone())
                {
                    self.entries.remove(&oldest);
                }
            }
            self.entries.insert(cache_key, (self.clock, label.clone()));
        }
        Ok(label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::numel;
    use crate::volumes::{make_phantom, PhantomSpec, Volume};
    use rand::SeedableRng;

    fn probs_from_mask(mask: &BinaryMask) -> ProbMap {
        let vol = numel(mask.shape);
        let mut data = vec![0.0; 2 * vol];
        for (i, &m) in mask.data.iter().enumerate() {
            let fg = if m == 1 { 0.9 } else { 0.1 };
            data[i] = 1.0 - fg;
            data[vol + i] = fg;
        }
        ProbMap {
            num_classes: 2,
            shape: mask.shape,
            data,
        }
    }

    /// Brute-force interior-distance argmax for the prompt oracle check.
    fn brute_deepest_voxel(mask: &BinaryMask) -> (usize, usize, usize) {
        let [d, h, w] = mask.shape;
        let mut best = (f64::NEG_INFINITY, (0, 0, 0));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if *mask.get(z, y, x) != 1 {
                        continue;
                    }
                    // nearest non-foreground voxel, border counts as background
                    let mut nearest = f64::INFINITY;
                    for bz in -1..=(d as isize) {
                        for by in -1..=(h as isize) {
                            for bx in -1..=(w as isize) {
                                let outside = bz < 0
                                    || by < 0
                                    || bx < 0
                                    || bz >= d as isize
                                    || by >= h as isize
                                    || bx >= w as isize;
                                let bg = outside
                                    || *mask.get(bz as usize, by as usize, bx as usize) == 0;
                                if bg {
                                    let dz = z as f64 - bz as f64;
                                    let dy = y as f64 - by as f64;
                                    let dx = x as f64 - bx as f64;
                                    nearest = nearest.min(dz * dz + dy * dy + dx * dx);
                                }
                            }
                        }
                    }
                    if nearest > best.0 {
                        best = (nearest, (z, y, x));
                    }
                }
            }
        }
        best.1
    }

    #[test]
    fn sphere_prompt_is_at_center() {
        let spec = PhantomSpec::sphere([21, 21, 21], 6.0, 1.0, 0.0);
        let (_, mask) = make_phantom(&spec).unwrap();
        let probs = probs_from_mask(&mask);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = extract_prompts(&probs, 1, &mut rng);
        assert_eq!(ps.len(), 1);
        let p = ps.points[0];
        let c = 10.0;
        let dist = ((p.z as f64 - c).powi(2) + (p.y as f64 - c).powi(2) + (p.x as f64 - c).powi(2))
            .sqrt();
        assert!(dist <= 1.0, "prompt {p:?} off center by {dist}");
        // and it agrees with the brute-force deepest voxel up to ties
        let brute = brute_deepest_voxel(&mask);
        let bd = ((p.z as f64 - brute.0 as f64).powi(2)
            + (p.y as f64 - brute.1 as f64).powi(2)
            + (p.x as f64 - brute.2 as f64).powi(2))
        .sqrt();
        assert!(bd <= 1.0 + 1e-9, "{p:?} vs brute {brute:?}");
    }

    #[test]
    fn empty_prediction_gives_empty_prompts() {
        let probs = ProbMap::uniform(2, [8, 8, 8]); // fg = 0.5, ties go to background
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(extract_prompts(&probs, 3, &mut rng).is_empty());
    }

    #[test]
    fn torus_prompt_lies_inside_material() {
        // solid ring in one z-slab; its centroid falls in the hole
        let shape = [8, 24, 24];
        let mut mask = BinaryMask::zeros(shape);
        let (cy, cx, ring_r, tube_r) = (11.5f64, 11.5f64, 7.0f64, 2.5f64);
        for z in 2..6 {
            for y in 0..24 {
                for x in 0..24 {
                    let rr = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    if (rr - ring_r).abs() <= tube_r && (z as f64 - 3.5).abs() <= tube_r {
                        *mask.get_mut(z, y, x) = 1;
                    }
                }
            }
        }
        assert!(mask.count_fg() > 0);
        let probs = probs_from_mask(&mask);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = extract_prompts(&probs, 1, &mut rng);
        let p = ps.points[0];
        assert_eq!(*mask.get(p.z, p.y, p.x), 1, "prompt must be inside the ring");
    }

    #[test]
    fn prompts_always_inside_mask_on_random_blobs() {
        for seed in 0..200u64 {
            let mut spec = PhantomSpec::sphere([18, 18, 18], 4.0, 1.0, 0.0);
            spec.center_range = [[6.0, 11.0]; 3];
            spec.radii_range = [[2.5, 5.0]; 3];
            spec.wobble = 0.12;
            spec.geom_seed = seed;
            let (_, mask) = make_phantom(&spec).unwrap();
            let probs = probs_from_mask(&mask);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ps = extract_prompts(&probs, 3, &mut rng);
            assert!(!ps.is_empty());
            for p in &ps.points {
                assert_eq!(*mask.get(p.z, p.y, p.x), 1, "seed {seed}: {p:?} outside mask");
            }
        }
    }

    #[test]
    fn multi_prompt_separation_when_feasible() {
        let spec = PhantomSpec::sphere([32, 32, 32], 12.0, 1.0, 0.0);
        let (_, mask) = make_phantom(&spec).unwrap();
        let probs = probs_from_mask(&mask);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = extract_prompts(&probs, 4, &mut rng);
        assert_eq!(ps.len(), 4);
        for i in 0..ps.len() {
            for j in 0..i {
                let a = ps.points[i];
                let b = ps.points[j];
                let d = ((a.z as f64 - b.z as f64).powi(2)
                    + (a.y as f64 - b.y as f64).powi(2)
                    + (a.x as f64 - b.x as f64).powi(2))
                .sqrt();
                assert!(d >= MIN_PROMPT_SEPARATION, "points {i},{j} at distance {d}");
            }
        }
    }

    #[test]
    fn query_rejects_empty_prompts_before_backend_work() {
        let backend = OracleBackend::AlwaysSkip;
        let key = QueryKey {
            case_id: "c".into(),
            offset: [0; 3],
        };
        let patch = Volume::zeros([4, 4, 4], [1.0; 3]);
        let err = query_oracle(&backend, &key, &patch, &PromptSet::default());
        assert!(matches!(err, Err(SegError::EmptyPrompts)));
    }

    #[test]
    fn always_skip_backend_always_skips() {
        let backend = OracleBackend::AlwaysSkip;
        let key = QueryKey {
            case_id: "c".into(),
            offset: [0; 3],
        };
        let patch = Volume::zeros([4, 4, 4], [1.0; 3]);
        let prompts = PromptSet {
            points: vec![PromptPoint {
                z: 1,
                y: 1,
                x: 1,
                polarity: Polarity::Positive,
            }],
        };
        let label = query_oracle(&backend, &key, &patch, &prompts).unwrap();
        assert!(label.skipped());
        assert_eq!(label.backend, BackendKind::AlwaysSkip);
    }

    #[test]
    fn synthetic_pseudo_label_quality_sits_in_the_degradation_band() {
        // dilate-by-1 plus 5% boundary flips on a phantom: the pseudo-label
        // Dice against the generating mask must sit in the band implied by
        // the voxelized sphere volumes (around 2*V_r/(V_r + V_{r+1}))
        let spec = PhantomSpec::sphere([24, 24, 24], 7.0, 1.0, 0.0);
        let (vol, mask) = make_phantom(&spec).unwrap();
        let mut truths = HashMap::new();
        truths.insert("c0".to_string(), mask.clone());
        let backend = OracleBackend::Synthetic(SyntheticOracle::new(
            Degradation::new(1.0, 0.05),
            3,
            truths,
        ));
        let key = QueryKey {
            case_id: "c0".into(),
            offset: [0; 3],
        };
        let prompts = PromptSet {
            points: vec![PromptPoint {
                z: 12,
                y: 12,
                x: 12,
                polarity: Polarity::Positive,
            }],
        };
        let label = query_oracle(&backend, &key, &vol, &prompts).unwrap();
        let d = crate::metrics::dice(label.mask.as_ref().unwrap(), &mask).unwrap();
        let v7 = mask.count_fg() as f64;
        let v8 = make_phantom(&PhantomSpec::sphere([24, 24, 24], 8.0, 1.0, 0.0))
            .unwrap()
            .1
            .count_fg() as f64;
        let center = 2.0 * v7 / (v7 + v8);
        assert!(
            (d - center).abs() < 0.08,
            "pseudo-label dice {d:.3} outside band around {center:.3}"
        );
    }

    #[test]
    fn cache_replays_synthetic_answers() {
        let spec = PhantomSpec::sphere([12, 12, 12], 4.0, 1.0, 0.0);
        let (vol, mask) = make_phantom(&spec).unwrap();
        let mut truths = HashMap::new();
        truths.insert("c0".to_string(), mask);
        let oracle = SyntheticOracle::new(Degradation::new(0.0, 0.2), 7, truths);
        let mut cached = CachedOracle::new(OracleBackend::Synthetic(oracle), 8);
        let key = QueryKey {
            case_id: "c0".into(),
            offset: [0; 3],
        };
        let prompts = PromptSet {
            points: vec![PromptPoint {
                z: 6,
                y: 6,
                x: 6,
                polarity: Polarity::Positive,
            }],
        };
        let a = cached.query(&key, &vol, &prompts).unwrap();
        let b = cached.query(&key, &vol, &prompts).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(cached.hits, 1);
        assert_eq!(cached.misses, 1);
    }
}
