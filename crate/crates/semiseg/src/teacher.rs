//! EMA teacher maintenance and uncertainty estimation/masking.
//!
//! The teacher is an exponential moving average of the student. For the
//! uncertainty-aware variant, predictive entropy is estimated from several
//! stochastic forward passes and the consistency loss is gated to
//! low-uncertainty voxels by a threshold that relaxes over training.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SegError};
use crate::grid::Grid3;
use crate::network::{Backbone, ForwardMode, ParamVector, ProbMap};
use crate::volumes::{BinaryMask, Volume};

/// EMA decay cap; below it the decay warms up as `1 - 1/(t+1)`.
pub const EMA_ALPHA_CAP: f64 = 0.99;

/// Per-voxel predictive entropy, in nats; bounded by `ln(num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

/// In-place EMA update: `theta' <- alpha * theta' + (1 - alpha) * theta`.
pub fn ema_update(teacher: &mut ParamVector, student: &ParamVector, alpha: f64) -> Result<()> {
    assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0, 1]");
    if teacher.len() != student.len() {
        return Err(SegError::ParamLayoutMismatch {
            expected: teacher.len(),
            got: student.len(),
        });
    }
    for (t, &s) in teacher.as_mut_slice().iter_mut().zip(student.as_slice()) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

/// Warm-up EMA decay: `min(1 - 1/(t+1), 0.99)`, so the teacher tracks the
/// student exactly at t=0 and settles to the cap.
pub fn ema_alpha(t: u64) -> f64 {
    (1.0 - 1.0 / (t as f64 + 1.0)).min(EMA_ALPHA_CAP)
}

/// Mean prediction and predictive entropy from `k_passes` stochastic forward
/// passes of the teacher. Entropy is `-sum_c p_c ln p_c` of the mean map,
/// with `p ln p -> 0` at `p = 0`.
///
/// Passes consume dropout draws from `rng` in pass order, so the result is a
/// pure function of `(params, patch, k_passes, rng state)`.
pub fn estimate_uncertainty(
    backbone: &Backbone,
    teacher_params: &ParamVector,
    patch: &Volume,
    k_passes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ProbMap, UncertaintyMap)> {
    if k_passes < 2 {
        return Err(SegError::TooFewPasses(k_passes));
    }
    let mut mean: Option<ProbMap> = None;
    for _ in 0..k_passes {
        let probs = backbone.forward(teacher_params, patch, ForwardMode::Stochastic(rng))?;
        match &mut mean {
            None => mean = Some(probs),
            Some(m) => {
                for (a, b) in m.data.iter_mut().zip(probs.data.iter()) {
                    *a += b;
                }
            }
        }
    }
    let mut mean = mean.unwrap();
    let scale = 1.0 / k_passes as f64;
    for v in mean.data.iter_mut() {
        *v *= scale;
    }
    let entropy = entropy_of(&mean);
    Ok((mean, entropy))
}

/// Entropy of a probability map, per voxel.
pub fn entropy_of(probs: &ProbMap) -> UncertaintyMap {
    let vol = probs.vol();
    let mut data = vec![0.0; vol];
    for c in 0..probs.num_classes {
        let ch = probs.channel(c);
        for (u, &p) in data.iter_mut().zip(ch.iter()) {
            if p > 0.0 {
                *u -= p * p.ln();
            }
        }
    }
    UncertaintyMap {
        shape: probs.shape,
        data,
    }
}

/// Gate mask for the teacher-consistency loss: voxels whose entropy is below
/// the relaxing threshold `H(t) = (0.75 + 0.25 * t/t_max) * ln 2`.
pub fn uncertainty_mask(u_map: &UncertaintyMap, t: u64, t_max: u64) -> BinaryMask {
    assert!(t_max > 0 && t <= t_max);
    let threshold = (0.75 + 0.25 * t as f64 / t_max as f64) * std::f64::consts::LN_2;
    BinaryMask::from_vec(
        u_map.shape,
        u_map.data.iter().map(|&u| u8::from(u < threshold)).collect(),
    )
}

/// Convenience wrapper mirroring [`UncertaintyMap`] as a grid for reporting.
pub fn uncertainty_grid(u: &UncertaintyMap) -> Grid3<f64> {
    Grid3::from_vec(u.shape, u.data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BackboneConfig;
    use rand::SeedableRng;

    #[test]
    fn ema_degenerate_alphas() {
        let student = ParamVector(vec![1.0, -2.0, 3.5]);
        let mut teacher = ParamVector(vec![10.0, 20.0, 30.0]);
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.0, student.0);
        let frozen = teacher.clone();
        ema_update(&mut teacher, &ParamVector(vec![9.0, 9.0, 9.0]), 1.0).unwrap();
        assert_eq!(teacher.0, frozen.0);
    }

    #[test]
    fn ema_direct_arithmetic() {
        let student = ParamVector(vec![1.0; 4]);
        let mut teacher = ParamVector(vec![0.0; 4]);
        ema_update(&mut teacher, &student, 0.99).unwrap();
        for &v in &teacher.0 {
            assert_eq!(v, 1.0 - 0.99);
            assert!((v - 0.01).abs() < 1e-16);
        }
    }

    #[test]
    fn ema_rejects_layout_mismatch() {
        let student = ParamVector(vec![1.0; 3]);
        let mut teacher = ParamVector(vec![0.0; 4]);
        assert!(matches!(
            ema_update(&mut teacher, &student, 0.5),
            Err(SegError::ParamLayoutMismatch { .. })
        ));
    }

    #[test]
    fn ema_alpha_warmup_and_cap() {
        assert_eq!(ema_alpha(0), 0.0);
        assert_eq!(ema_alpha(99), 0.99);
        assert_eq!(ema_alpha(1_000_000), 0.99);
        assert!((ema_alpha(9) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn ema_stays_in_convex_hull_of_trajectory() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut teacher = ParamVector(vec![0.5, -0.5]);
        let mut lo = teacher.0.clone();
        let mut hi = teacher.0.clone();
        for t in 0..50u64 {
            let student = ParamVector(vec![
                crate::rng::standard_normal(&mut rng),
                crate::rng::standard_normal(&mut rng),
            ]);
            for i in 0..2 {
                lo[i] = lo[i].min(student.0[i]);
                hi[i] = hi[i].max(student.0[i]);
            }
            ema_update(&mut teacher, &student, ema_alpha(t)).unwrap();
            for i in 0..2 {
                assert!(teacher.0[i] >= lo[i] - 1e-12 && teacher.0[i] <= hi[i] + 1e-12);
            }
        }
    }

    #[test]
    fn entropy_hand_values() {
        let mk = |fg: f64| ProbMap {
            num_classes: 2,
            shape: [1, 1, 1],
            data: vec![1.0 - fg, fg],
        };
        let u = entropy_of(&mk(0.5));
        assert!((u.data[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let u = entropy_of(&mk(0.1));
        let expect = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((u.data[0] - expect).abs() < 1e-12);
        assert!((u.data[0] - 0.3251).abs() < 1e-4);
        let u = entropy_of(&mk(0.0));
        assert_eq!(u.data[0], 0.0);
    }

    #[test]
    fn uncertainty_collapses_without_dropout() {
        let cfg = BackboneConfig {
            dropout_rate: 0.0,
            ..BackboneConfig::tiny()
        };
        let net = Backbone::new(cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let params = net.init_params(&mut rng);
        let patch = Volume::from_vec(
            [8, 8, 8],
            [1.0; 3],
            (0..512).map(|i| (i % 7) as f32 * 0.1).collect(),
        );
        let mut urng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (mean, u) = estimate_uncertainty(&net, &params, &patch, 4, &mut urng).unwrap();
        let single = net.forward(&params, &patch, ForwardMode::Deterministic).unwrap();
        for (a, b) in mean.data.iter().zip(single.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let u_single = entropy_of(&single);
        for (a, b) in u.data.iter().zip(u_single.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        mean.validate().unwrap();
        assert!(u.data.iter().all(|&v| (0.0..=std::f64::consts::LN_2 + 1e-12).contains(&v)));
    }

    #[test]
    fn uncertainty_requires_two_passes() {
        let net = Backbone::new(BackboneConfig::tiny()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let params = net.init_params(&mut rng);
        let patch = Volume::zeros([8, 8, 8], [1.0; 3]);
        let mut urng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            estimate_uncertainty(&net, &params, &patch, 1, &mut urng),
            Err(SegError::TooFewPasses(1))
        ));
    }

    #[test]
    fn mask_thresholds_follow_schedule() {
        let shape = [2, 2, 2];
        let zeros = UncertaintyMap {
            shape,
            data: vec![0.0; 8],
        };
        assert_eq!(uncertainty_mask(&zeros, 0, 100).count_fg(), 8);
        let maxed = UncertaintyMap {
            shape,
            data: vec![std::f64::consts::LN_2; 8],
        };
        for t in [0, 50, 99] {
            assert_eq!(uncertainty_mask(&maxed, t, 100).count_fg(), 0);
        }
        let mid = UncertaintyMap {
            shape,
            data: vec![0.8 * std::f64::consts::LN_2; 8],
        };
        assert_eq!(uncertainty_mask(&mid, 0, 100).count_fg(), 0);
        assert_eq!(uncertainty_mask(&mid, 100, 100).count_fg(), 8);
    }

    #[test]
    fn mask_coverage_is_monotone_in_t() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..64)
            .map(|_| rand::Rng::gen_range(&mut rng, 0.0..std::f64::consts::LN_2))
            .collect();
        let u = UncertaintyMap {
            shape: [4, 4, 4],
            data,
        };
        let mut prev = 0;
        for t in (0..=100).step_by(10) {
            let cov = uncertainty_mask(&u, t, 100).count_fg();
            assert!(cov >= prev);
            prev = cov;
        }
    }
}
