//! Objective terms and their weighted combination.
//!
//! The objective is `L_sup + lambda_c * L_con + lambda_s * L_sam`: a
//! supervised term on labeled patches, a teacher-consistency term on
//! unlabeled patches, and an oracle-consistency term against pseudo-labels,
//! with the two consistency weights coming from [`crate::schedules`].
//!
//! Every loss has a `*_with_grad` twin returning `dL/dprobs` in the prob-map
//! layout, which the trainer feeds into [`crate::network::Backbone::backward`].

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::network::ProbMap;
use crate::schedules;
use crate::volumes::BinaryMask;

/// Smoothing term in the soft Dice ratio.
pub const DICE_EPSILON: f64 = 1e-5;
/// Probability clamp for the cross-entropy term.
pub const CE_CLAMP: f64 = 1e-7;

fn check_pair(probs: &ProbMap, mask: &BinaryMask, context: &str) -> Result<()> {
    if probs.shape != mask.shape {
        return Err(SegError::ShapeMismatch {
            context: context.to_string(),
            expected: probs.shape,
            got: mask.shape,
        });
    }
    Ok(())
}

/// Soft Dice loss on the foreground channel:
/// `1 - (2*sum(p*y) + eps) / (sum(p^2) + sum(y^2) + eps)`.
pub fn dice_loss(probs: &ProbMap, mask: &BinaryMask) -> Result<f64> {
    Ok(dice_loss_with_grad(probs, mask)?.0)
}

pub fn dice_loss_with_grad(probs: &ProbMap, mask: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    check_pair(probs, mask, "dice_loss")?;
    let p = probs.foreground();
    let mut inter = 0.0;
    let mut p_sq = 0.0;
    let mut y_sum = 0.0;
    for (&pi, &yi) in p.iter().zip(mask.data.iter()) {
        let y = yi as f64;
        inter += pi * y;
        p_sq += pi * pi;
        y_sum += y;
    }
    let num = 2.0 * inter + DICE_EPSILON;
    let den = p_sq + y_sum + DICE_EPSILON;
    let loss = 1.0 - num / den;

    let vol = probs.vol();
    let mut grad = vec![0.0; probs.data.len()];
    let den_sq = den * den;
    for (i, (&pi, &yi)) in p.iter().zip(mask.data.iter()).enumerate() {
        let y = yi as f64;
        // d/dp of -(num/den)
        grad[vol + i] = -(2.0 * y * den - num * 2.0 * pi) / den_sq;
    }
    Ok((loss, grad))
}

/// Mean voxel-wise cross-entropy `-ln p_true`, with probabilities clamped to
/// `[CE_CLAMP, 1 - CE_CLAMP]`.
pub fn ce_loss(probs: &ProbMap, mask: &BinaryMask) -> Result<f64> {
    Ok(ce_loss_with_grad(probs, mask)?.0)
}

pub fn ce_loss_with_grad(probs: &ProbMap, mask: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    check_pair(probs, mask, "ce_loss")?;
    let vol = probs.vol();
    let n = vol as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.data.len()];
    for (i, &yi) in mask.data.iter().enumerate() {
        let c = yi as usize;
        let p = probs.data[c * vol + i];
        let clamped = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
        loss -= clamped.ln();
        // clamp has zero gradient outside its active range
        if (CE_CLAMP..=1.0 - CE_CLAMP).contains(&p) {
            grad[c * vol + i] = -1.0 / (n * clamped);
        }
    }
    Ok((loss / n, grad))
}

/// Supervised loss: equal-weight Dice + cross-entropy.
pub fn supervised_loss(probs: &ProbMap, mask: &BinaryMask) -> Result<f64> {
    Ok(supervised_loss_with_grad(probs, mask)?.0)
}

pub fn supervised_loss_with_grad(probs: &ProbMap, mask: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    let (ld, gd) = dice_loss_with_grad(probs, mask)?;
    let (lc, gc) = ce_loss_with_grad(probs, mask)?;
    let grad = gd
        .iter()
        .zip(gc.iter())
        .map(|(a, b)| 0.5 * a + 0.5 * b)
        .collect();
    Ok((0.5 * ld + 0.5 * lc, grad))
}

/// Mean squared difference between two probability maps over all class
/// channels. With a mask (uncertainty gating), only mask=1 voxels enter the
/// mean; an all-zero mask yields loss 0.
pub fn consistency_loss(
    student: &ProbMap,
    teacher: &ProbMap,
    gate: Option<&BinaryMask>,
) -> Result<f64> {
    Ok(consistency_loss_with_grad(student, teacher, gate)?.0)
}

pub fn consistency_loss_with_grad(
    student: &ProbMap,
    teacher: &ProbMap,
    gate: Option<&BinaryMask>,
) -> Result<(f64, Vec<f64>)> {
    if student.shape != teacher.shape || student.num_classes != teacher.num_classes {
        return Err(SegError::ShapeMismatch {
            context: "consistency_loss".to_string(),
            expected: student.shape,
            got: teacher.shape,
        });
    }
    if let Some(m) = gate {
        check_pair(student, m, "consistency_loss gate")?;
    }
    let vol = student.vol();
    let c = student.num_classes;
    let mut grad = vec![0.0; student.data.len()];
    let active: f64 = match gate {
        None => vol as f64,
        Some(m) => m.count_fg() as f64,
    };
    if active == 0.0 {
        return Ok((0.0, grad));
    }
    let denom = active * c as f64;
    let mut loss = 0.0;
    for ch in 0..c {
        for i in 0..vol {
            if let Some(m) = gate {
                if m.data[i] == 0 {
                    continue;
                }
            }
            let d = student.data[ch * vol + i] - teacher.data[ch * vol + i];
            loss += d * d;
            grad[ch * vol + i] = 2.0 * d / denom;
        }
    }
    Ok((loss / denom, grad))
}

/// One-hot encode a pseudo-label mask into the prob-map layout.
pub fn one_hot(mask: &BinaryMask, num_classes: usize) -> ProbMap {
    let vol = mask.data.len();
    let mut data = vec![0.0; num_classes * vol];
    for (i, &y) in mask.data.iter().enumerate() {
        data[(y as usize) * vol + i] = 1.0;
    }
    ProbMap {
        num_classes,
        shape: mask.shape,
        data,
    }
}

/// Consistency of the student against a hard oracle pseudo-label: mean
/// squared difference to the one-hot encoding.
pub fn sam_consistency_loss(student: &ProbMap, pseudo_label: &BinaryMask) -> Result<f64> {
    Ok(sam_consistency_loss_with_grad(student, pseudo_label)?.0)
}

pub fn sam_consistency_loss_with_grad(
    student: &ProbMap,
    pseudo_label: &BinaryMask,
) -> Result<(f64, Vec<f64>)> {
    check_pair(student, pseudo_label, "sam_consistency_loss")?;
    consistency_loss_with_grad(student, &one_hot(pseudo_label, student.num_classes), None)
}

/// The composed per-iteration objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_con: f64,
    pub l_sam: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub total: f64,
    pub sam_skipped: bool,
}

/// Combine the three loss components with the schedule weights at iteration
/// `t`. A skipped oracle term contributes exactly zero. Any non-finite
/// component aborts with a diagnostic naming the term.
pub fn total_objective(
    l_sup: f64,
    l_con: f64,
    l_sam: f64,
    t: u64,
    t_max: u64,
    sam_skipped: bool,
) -> Result<LossBreakdown> {
    total_objective_base(l_sup, l_con, l_sam, t, t_max, schedules::DEFAULT_W_BASE, sam_skipped)
}

pub fn total_objective_base(
    l_sup: f64,
    l_con: f64,
    l_sam: f64,
    t: u64,
    t_max: u64,
    w_base: f64,
    sam_skipped: bool,
) -> Result<LossBreakdown> {
    for (term, v) in [("l_sup", l_sup), ("l_con", l_con), ("l_sam", l_sam)] {
        if !v.is_finite() {
            return Err(SegError::NonFiniteLoss { term, t });
        }
    }
    let lambda_c = schedules::lambda_c_base(t, t_max, w_base);
    let lambda_s = schedules::lambda_s_base(t, t_max, w_base);
    let l_sam = if sam_skipped { 0.0 } else { l_sam };
    let total = l_sup + lambda_c * l_con + lambda_s * l_sam;
    if !total.is_finite() {
        return Err(SegError::NonFiniteLoss { term: "total", t });
    }
    Ok(LossBreakdown {
        l_sup,
        l_con,
        l_sam,
        lambda_c,
        lambda_s,
        total,
        sam_skipped,
    })
}
