//! Volume/mask data model, dataset splits, patch sampling, file ingestion,
//! and synthetic phantom generation.
//!
//! All operations are pure given an explicit RNG stream and are safe to call
//! from multiple threads on distinct streams. The loader is synchronous;
//! callers that prefetch must preserve the single-threaded patch order when
//! deterministic mode is requested.

pub mod nifti;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::grid::{idx3, numel};
use crate::rng::{derive_seed, standard_normal};

/// Guard against division blowup when normalizing near-constant volumes.
pub const NORM_EPSILON: f64 = 1e-8;

/// A 3D scalar image with voxel spacing. Shape is `[d, h, w]`, spacing
/// `[sd, sh, sw]` in millimeters per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Volume {
            shape,
            spacing,
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn from_vec(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Self {
        assert_eq!(data.len(), numel(shape), "volume data length mismatch");
        Volume {
            shape,
            spacing,
            data,
        }
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[idx3(self.shape, z, y, x)]
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    /// Validate ingestion invariants: finite intensities, positive spacing.
    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(SegError::NonPositiveSpacing(self.spacing));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(SegError::NonFiniteIntensity);
        }
        Ok(())
    }

    /// Z-score normalize in place: zero mean, unit variance, with an epsilon
    /// guard so constant volumes map to all zeros instead of blowing up.
    pub fn normalize_zscore(&mut self) {
        let n = self.data.len() as f64;
        if n == 0.0 {
            return;
        }
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let denom = var.sqrt() + NORM_EPSILON;
        for v in self.data.iter_mut() {
            *v = ((*v as f64 - mean) / denom) as f32;
        }
    }
}

/// A voxel-wise {0,1} label field paired with a volume of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(shape: [usize; 3]) -> Self {
        BinaryMask {
            shape,
            data: vec![0; numel(shape)],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<u8>) -> Self {
        assert_eq!(data.len(), numel(shape), "mask data length mismatch");
        debug_assert!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        BinaryMask { shape, data }
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> &u8 {
        &self.data[idx3(self.shape, z, y, x)]
    }

    #[inline]
    pub fn get_mut(&mut self, z: usize, y: usize, x: usize) -> &mut u8 {
        let i = idx3(self.shape, z, y, x);
        &mut self.data[i]
    }

    pub fn count_fg(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Indices of foreground voxels in scan order.
    pub fn fg_indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1).then_some(i))
            .collect()
    }
}

/// One dataset case: id, image, and ground truth when annotated.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub mask: Option<BinaryMask>,
}

/// Id-level dataset partition. The split is a pure function of the sorted
/// case-id list, `m_labeled`, `n_test`, and the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
}

/// Materialized dataset split.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled: Vec<(Volume, BinaryMask)>,
    pub unlabeled: Vec<Volume>,
    pub test: Vec<(Volume, BinaryMask)>,
    pub ids: SplitIds,
}

/// Partition case ids into labeled/unlabeled/test. Ids are canonicalized by
/// sorting before the seeded shuffle; the test block is taken from the end of
/// the shuffled order and the first `m_labeled` of the remaining training
/// pool become the labeled set.
pub fn split_case_ids(
    case_ids: &[String],
    m_labeled: usize,
    n_test: usize,
    seed: u64,
) -> Result<SplitIds> {
    if m_labeled == 0 {
        return Err(SegError::InvalidSplit("m_labeled must be at least 1".into()));
    }
    let unique: BTreeSet<&String> = case_ids.iter().collect();
    if unique.len() != case_ids.len() {
        return Err(SegError::InvalidSplit("duplicate case ids".into()));
    }
    if case_ids.len() < m_labeled + n_test + 1 {
        return Err(SegError::InvalidSplit(format!(
            "need at least {} cases for m_labeled={m_labeled}, n_test={n_test} with one unlabeled case, got {}",
            m_labeled + n_test + 1,
            case_ids.len()
        )));
    }
    let mut ids: Vec<String> = case_ids.to_vec();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let pool_len = ids.len() - n_test;
    let test = ids.split_off(pool_len);
    let unlabeled = ids.split_off(m_labeled);
    Ok(SplitIds {
        labeled: ids,
        unlabeled,
        test,
    })
}

/// Split materialized cases. Labeled and test cases must carry masks.
pub fn split_dataset(
    cases: &[Case],
    m_labeled: usize,
    n_test: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let split = split_case_ids(&ids, m_labeled, n_test, seed)?;
    let find = |id: &String| cases.iter().find(|c| &c.id == id).unwrap();
    let with_mask = |id: &String| -> Result<(Volume, BinaryMask)> {
        let c = find(id);
        let mask = c.mask.clone().ok_or_else(|| {
            SegError::InvalidSplit(format!("case {id} assigned a supervised role but has no mask"))
        })?;
        Ok((c.volume.clone(), mask))
    };
    Ok(DatasetSplit {
        labeled: split.labeled.iter().map(&with_mask).collect::<Result<_>>()?,
        unlabeled: split
            .unlabeled
            .iter()
            .map(|id| find(id).volume.clone())
            .collect(),
        test: split.test.iter().map(&with_mask).collect::<Result<_>>()?,
        ids: split,
    })
}

/// A sampled training patch. `offset` is the crop origin in the padded
/// coordinate frame; padding is the deterministic symmetric scheme of
/// [`pad_to`], so `(source shape, patch shape, offset)` fully determine the
/// crop.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub volume: Volume,
    pub mask: Option<BinaryMask>,
    pub offset: [usize; 3],
}

/// Symmetric zero-pad `shape` up to at least `target` per axis. Returns the
/// padded shape and the per-axis front padding.
pub fn pad_amounts(shape: [usize; 3], target: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let mut padded = shape;
    let mut before = [0usize; 3];
    for a in 0..3 {
        if shape[a] < target[a] {
            let pad = target[a] - shape[a];
            before[a] = pad / 2;
            padded[a] = target[a];
        }
    }
    (padded, before)
}

fn pad_volume(v: &Volume, target: [usize; 3]) -> (Volume, [usize; 3]) {
    let (padded, before) = pad_amounts(v.shape, target);
    if padded == v.shape {
        return (v.clone(), before);
    }
    let mut out = Volume::zeros(padded, v.spacing);
    copy_block(&v.data, v.shape, &mut out.data, padded, before);
    (out, before)
}

fn pad_mask(m: &BinaryMask, target: [usize; 3]) -> BinaryMask {
    let (padded, before) = pad_amounts(m.shape, target);
    if padded == m.shape {
        return m.clone();
    }
    let mut out = BinaryMask::zeros(padded);
    copy_block(&m.data, m.shape, &mut out.data, padded, before);
    out
}

fn copy_block<T: Copy>(
    src: &[T],
    src_shape: [usize; 3],
    dst: &mut [T],
    dst_shape: [usize; 3],
    at: [usize; 3],
) {
    let [d, h, w] = src_shape;
    for z in 0..d {
        for y in 0..h {
            let s = idx3(src_shape, z, y, 0);
            let o = idx3(dst_shape, z + at[0], y + at[1], at[2]);
            dst[o..o + w].copy_from_slice(&src[s..s + w]);
        }
    }
}

fn crop_block<T: Copy + Default>(
    src: &[T],
    src_shape: [usize; 3],
    offset: [usize; 3],
    out_shape: [usize; 3],
) -> Vec<T> {
    let mut out = vec![T::default(); numel(out_shape)];
    let [d, h, w] = out_shape;
    for z in 0..d {
        for y in 0..h {
            let s = idx3(src_shape, z + offset[0], y + offset[1], offset[2]);
            let o = idx3(out_shape, z, y, 0);
            out[o..o + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Re-create the patch crop of an arbitrary mask using the same padding and
/// offset a [`sample_patch`] call produced. Used by oracle harnesses that
/// need the ground-truth restriction of a sampled patch.
pub fn crop_like_patch(mask: &BinaryMask, patch_shape: [usize; 3], offset: [usize; 3]) -> BinaryMask {
    let padded = pad_mask(mask, patch_shape);
    BinaryMask::from_vec(
        patch_shape,
        crop_block(&padded.data, padded.shape, offset, patch_shape),
    )
}

/// Sample a training patch of exactly `patch_shape`, zero-padding the source
/// symmetrically when it is smaller.
///
/// When a mask is given and non-empty, with probability 0.5 the patch is
/// centered on a uniformly chosen foreground voxel (clamped into bounds);
/// otherwise the offset is uniform. RNG draw order: the centering coin (only
/// when a non-empty mask is present), then either one foreground index or
/// three per-axis offsets.
pub fn sample_patch(
    volume: &Volume,
    mask: Option<&BinaryMask>,
    patch_shape: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<PatchSample> {
    if let Some(m) = mask {
        crate::geometry::checked_shape_pair(volume.shape, m.shape, "sample_patch volume/mask")?;
    }
    let (padded_vol, _) = pad_volume(volume, patch_shape);
    let padded_mask = mask.map(|m| pad_mask(m, patch_shape));
    let padded_shape = padded_vol.shape;

    let max_offset = [
        padded_shape[0] - patch_shape[0],
        padded_shape[1] - patch_shape[1],
        padded_shape[2] - patch_shape[2],
    ];
    let fg = padded_mask.as_ref().map(|m| m.fg_indices());
    let centered = match &fg {
        Some(idx) if !idx.is_empty() => rng.gen_bool(0.5),
        _ => false,
    };
    let offset = if centered {
        let idx = fg.as_ref().unwrap();
        let pick = idx[rng.gen_range(0..idx.len())];
        let [_, h, w] = padded_shape;
        let v = [pick / (w * h), (pick / w) % h, pick % w];
        let mut o = [0usize; 3];
        for a in 0..3 {
            let want = v[a].saturating_sub(patch_shape[a] / 2);
            o[a] = want.min(max_offset[a]);
        }
        o
    } else {
        let mut o = [0usize; 3];
        for (a, slot) in o.iter_mut().enumerate() {
            *slot = rng.gen_range(0..=max_offset[a]);
        }
        o
    };

    let vol_data = crop_block(&padded_vol.data, padded_shape, offset, patch_shape);
    let patch_vol = Volume::from_vec(patch_shape, volume.spacing, vol_data);
    let patch_mask = padded_mask
        .map(|m| BinaryMask::from_vec(patch_shape, crop_block(&m.data, padded_shape, offset, patch_shape)));
    Ok(PatchSample {
        volume: patch_vol,
        mask: patch_mask,
        offset,
    })
}

/// Analytic object model for synthetic phantoms: a wobbled ellipsoid of
/// elevated intensity on a dark background plus Gaussian noise.
///
/// Geometry (center, radii, wobble phases) is driven by `geom_seed` only and
/// noise by `noise_seed` only, so phantoms with equal geometry seeds share a
/// bit-identical mask under different noise fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Per-axis inclusive center range in voxel coordinates.
    pub center_range: [[f64; 2]; 3],
    /// Per-axis inclusive radius range in voxels.
    pub radii_range: [[f64; 2]; 3],
    /// Sinusoidal surface perturbation amplitude as a fraction of the radius.
    pub wobble: f64,
    /// Foreground minus background intensity.
    pub contrast: f64,
    /// Additive Gaussian noise level.
    pub noise_sigma: f64,
    /// Amplitude of a smooth low-frequency additive field mixed into the
    /// noise (a bias-field analogue; 0 disables it).
    #[serde(default)]
    pub bias_amp: f64,
    /// Spatial wavelength of the bias field, in voxels.
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
    pub geom_seed: u64,
    pub noise_seed: u64,
}

fn default_bias_scale() -> f64 {
    24.0
}

impl PhantomSpec {
    /// A centered sphere with no wobble, handy for analytic checks.
    pub fn sphere(shape: [usize; 3], radius: f64, contrast: f64, noise_sigma: f64) -> Self {
        let c = [
            (shape[0] as f64 - 1.0) / 2.0,
            (shape[1] as f64 - 1.0) / 2.0,
            (shape[2] as f64 - 1.0) / 2.0,
        ];
        PhantomSpec {
            shape,
            spacing: [1.0; 3],
            center_range: [[c[0], c[0]], [c[1], c[1]], [c[2], c[2]]],
            radii_range: [[radius, radius]; 3],
            wobble: 0.0,
            contrast,
            noise_sigma,
            bias_amp: 0.0,
            bias_scale: default_bias_scale(),
            geom_seed: 0,
            noise_seed: 0,
        }
    }
}

/// Generate a phantom volume and its analytic ground-truth mask.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, BinaryMask)> {
    let [d, h, w] = spec.shape;
    if numel(spec.shape) == 0 {
        return Err(SegError::InvalidPhantom("empty shape".into()));
    }
    let mut geom = ChaCha8Rng::seed_from_u64(spec.geom_seed);
    let draw = |rng: &mut ChaCha8Rng, range: [f64; 2]| -> f64 {
        if range[0] >= range[1] {
            range[0]
        } else {
            rng.gen_range(range[0]..range[1])
        }
    };
    let center = [
        draw(&mut geom, spec.center_range[0]),
        draw(&mut geom, spec.center_range[1]),
        draw(&mut geom, spec.center_range[2]),
    ];
    let radii = [
        draw(&mut geom, spec.radii_range[0]),
        draw(&mut geom, spec.radii_range[1]),
        draw(&mut geom, spec.radii_range[2]),
    ];
    let phase = [
        geom.gen_range(0.0..std::f64::consts::TAU),
        geom.gen_range(0.0..std::f64::consts::TAU),
    ];
    if radii.iter().any(|&r| r < 1.0) {
        return Err(SegError::InvalidPhantom(format!("radii {radii:?} too small")));
    }
    let reach = 1.0 + spec.wobble.abs();
    for a in 0..3 {
        let lo = center[a] - radii[a] * reach;
        let hi = center[a] + radii[a] * reach;
        if lo < 0.0 || hi > spec.shape[a] as f64 - 1.0 {
            return Err(SegError::InvalidPhantom(format!(
                "object exceeds volume bounds on axis {a}: [{lo:.1}, {hi:.1}] vs [0, {}]",
                spec.shape[a] - 1
            )));
        }
    }

    let mut mask = BinaryMask::zeros(spec.shape);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = [
                    (z as f64 - center[0]) / radii[0],
                    (y as f64 - center[1]) / radii[1],
                    (x as f64 - center[2]) / radii[2],
                ];
                let rho = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let limit = if spec.wobble == 0.0 {
                    1.0
                } else if rho > 0.0 {
                    let theta = v[1].atan2(v[2]);
                    let psi = (v[0] / rho).asin();
                    1.0 + spec.wobble * (3.0 * theta + phase[0]).sin() * (2.0 * psi + phase[1]).cos()
                } else {
                    1.0
                };
                if rho <= limit {
                    *mask.get_mut(z, y, x) = 1;
                }
            }
        }
    }

    let (_, n_components) = crate::geometry::connected_components_6(&mask);
    if n_components != 1 {
        return Err(SegError::InvalidPhantom(format!(
            "generated mask has {n_components} components; adjust radii/wobble"
        )));
    }

    let mut noise = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    // bias-field parameters are drawn first so the white-noise stream is a
    // fixed function of the seed whether or not the field is enabled
    let bias = BiasField::draw(&mut noise, spec.bias_amp, spec.bias_scale);
    let mut volume = Volume::zeros(spec.shape, spec.spacing);
    let mut i = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let base = spec.contrast * mask.data[i] as f64;
                let n = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * standard_normal(&mut noise)
                } else {
                    0.0
                };
                volume.data[i] = (base + n + bias.at(z, y, x)) as f32;
                i += 1;
            }
        }
    }
    Ok((volume, mask))
}

/// A sum of three random plane waves: smooth, zero-mean, deterministic in
/// the drawing RNG.
struct BiasField {
    amp: f64,
    waves: [[f64; 4]; 3],
}

impl BiasField {
    fn draw(rng: &mut ChaCha8Rng, amp: f64, scale: f64) -> Self {
        let mut waves = [[0.0; 4]; 3];
        for wave in waves.iter_mut() {
            // random direction and phase at wavelength ~scale
            let dir = [
                standard_normal(rng),
                standard_normal(rng),
                standard_normal(rng),
            ];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2])
                .sqrt()
                .max(1e-9);
            let k = std::f64::consts::TAU / scale.max(1.0);
            wave[0] = dir[0] / norm * k;
            wave[1] = dir[1] / norm * k;
            wave[2] = dir[2] / norm * k;
            wave[3] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        BiasField { amp, waves }
    }

    #[inline]
    fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        if self.amp == 0.0 {
            return 0.0;
        }
        let mut v = 0.0;
        for w in &self.waves {
            v += (w[0] * z as f64 + w[1] * y as f64 + w[2] * x as f64 + w[3]).sin();
        }
        self.amp * v / 3.0f64.sqrt()
    }
}

/// Case entry of a phantom dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub role: String,
    pub spec: PhantomSpec,
}

/// Manifest written next to generated phantom datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub cases: Vec<ManifestCase>,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Generator spec for a whole phantom dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomDatasetSpec {
    pub n_cases: usize,
    pub shape: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    pub radii_range: [f64; 2],
    /// Center jitter around the volume middle, in voxels.
    pub center_jitter: f64,
    #[serde(default)]
    pub wobble: f64,
    pub contrast: f64,
    /// Optional per-case contrast spread: case contrast is drawn uniformly
    /// from `[contrast - contrast_jitter, contrast + contrast_jitter]`.
    #[serde(default)]
    pub contrast_jitter: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub bias_amp: f64,
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
    pub master_seed: u64,
    pub m_labeled: usize,
    pub n_test: usize,
    pub split_seed: u64,
}

fn default_spacing() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

impl PhantomDatasetSpec {
    pub fn case_id(i: usize) -> String {
        format!("case{i:03}")
    }

    pub fn case_spec(&self, i: usize) -> PhantomSpec {
        let mid = [
            (self.shape[0] as f64 - 1.0) / 2.0,
            (self.shape[1] as f64 - 1.0) / 2.0,
            (self.shape[2] as f64 - 1.0) / 2.0,
        ];
        let j = self.center_jitter;
        let contrast = if self.contrast_jitter > 0.0 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(self.master_seed, &[i as u64, 0x636f_6e74]));
            rng.gen_range(self.contrast - self.contrast_jitter..self.contrast + self.contrast_jitter)
        } else {
            self.contrast
        };
        PhantomSpec {
            shape: self.shape,
            spacing: self.spacing,
            center_range: [
                [mid[0] - j, mid[0] + j],
                [mid[1] - j, mid[1] + j],
                [mid[2] - j, mid[2] + j],
            ],
            radii_range: [self.radii_range; 3],
            wobble: self.wobble,
            contrast,
            noise_sigma: self.noise_sigma,
            bias_amp: self.bias_amp,
            bias_scale: self.bias_scale,
            geom_seed: derive_seed(self.master_seed, &[i as u64, 0x6765_6f6d]),
            noise_seed: derive_seed(self.master_seed, &[i as u64, 0x6e6f_6973]),
        }
    }

    /// Generate all cases in memory (ground truth attached to every case).
    pub fn generate(&self) -> Result<Vec<Case>> {
        (0..self.n_cases)
            .map(|i| {
                let (volume, mask) = make_phantom(&self.case_spec(i))?;
                Ok(Case {
                    id: Self::case_id(i),
                    volume,
                    mask: Some(mask),
                })
            })
            .collect()
    }

    /// Generate, write NIfTI files plus a manifest into `dir`, and return the
    /// id split used to assign roles.
    pub fn write_dataset(&self, dir: &Path) -> Result<SplitIds> {
        std::fs::create_dir_all(dir).map_err(|e| SegError::io(dir, e))?;
        let cases = self.generate()?;
        let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
        let split = split_case_ids(&ids, self.m_labeled, self.n_test, self.split_seed)?;
        let role_of = |id: &String| -> &'static str {
            if split.labeled.contains(id) {
                "labeled"
            } else if split.test.contains(id) {
                "test"
            } else {
                "unlabeled"
            }
        };
        let mut manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            cases: Vec::new(),
        };
        for (i, case) in cases.iter().enumerate() {
            let img = dir.join(format!("{}_img.nii.gz", case.id));
            nifti::write_nifti_f32(&img, case.volume.shape, case.volume.spacing, &case.volume.data)?;
            let mask = case.mask.as_ref().unwrap();
            let mask_path = dir.join(format!("{}_mask.nii.gz", case.id));
            nifti::write_nifti_u8(&mask_path, mask.shape, case.volume.spacing, &mask.data)?;
            manifest.cases.push(ManifestCase {
                id: case.id.clone(),
                role: role_of(&case.id).to_string(),
                spec: self.case_spec(i),
            });
        }
        let manifest_path = dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&manifest_path, json).map_err(|e| SegError::io(&manifest_path, e))?;
        Ok(split)
    }
}

/// Load one case from an image path, picking up `<id>_mask.nii[.gz]` next to
/// `<id>_img.nii[.gz]` when present. The volume is z-score normalized; the
/// mask is binarized at 0.5.
pub fn load_case(path: &Path) -> Result<(Volume, Option<BinaryMask>)> {
    let nv = nifti::read_nifti(path)?;
    let mut volume = Volume {
        shape: nv.shape,
        spacing: nv.spacing,
        data: nv.data,
    };
    volume.validate()?;
    volume.normalize_zscore();

    let mask = match mask_path_for(path) {
        Some(mp) if mp.exists() => {
            let nm = nifti::read_nifti(&mp)?;
            if nm.shape != volume.shape {
                return Err(SegError::ShapeMismatch {
                    context: format!("mask {} vs image {}", mp.display(), path.display()),
                    expected: volume.shape,
                    got: nm.shape,
                });
            }
            Some(BinaryMask::from_vec(
                nm.shape,
                nm.data.iter().map(|&v| u8::from(v > 0.5)).collect(),
            ))
        }
        _ => None,
    };
    Ok((volume, mask))
}

/// Derive the conventional mask path for an image path by replacing the
/// trailing `_img` stem suffix with `_mask`.
pub fn mask_path_for(image: &Path) -> Option<PathBuf> {
    let name = image.file_name()?.to_str()?;
    let replaced = if name.contains("_img.") {
        name.replacen("_img.", "_mask.", 1)
    } else {
        return None;
    };
    Some(image.with_file_name(replaced))
}

/// Load every `*_img.nii[.gz]` case in a directory, sorted by id.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| SegError::io(dir, e))?;
    let mut image_paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.contains("_img.nii"))
                .unwrap_or(false)
        })
        .collect();
    image_paths.sort();
    for path in image_paths {
        let id = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.split("_img.nii").next())
            .unwrap_or_default()
            .to_string();
        let (volume, mask) = load_case(&path)?;
        cases.push(Case { id, volume, mask });
    }
    if cases.is_empty() {
        return Err(SegError::InvalidConfig(format!(
            "no `*_img.nii[.gz]` cases found in {}",
            dir.display()
        )));
    }
    Ok(cases)
}
