//! Per-image vision-token masks: Bernoulli draws under a constant or
//! cosine ratio schedule, and substitution of the learned mask token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Mask-ratio schedule. The cosine kind ramps from 0 at step 0 to
/// `target_ratio` at `total_steps`; the constant kind is flat.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub kind: ScheduleKind,
    pub target_ratio: f64,
    pub total_steps: usize,
}

impl MaskSchedule {
    pub fn constant(target_ratio: f64, total_steps: usize) -> MaskSchedule {
        MaskSchedule {
            kind: ScheduleKind::Constant,
            target_ratio,
            total_steps,
        }
    }

    pub fn cosine(target_ratio: f64, total_steps: usize) -> MaskSchedule {
        MaskSchedule {
            kind: ScheduleKind::Cosine,
            target_ratio,
            total_steps,
        }
    }
}

/// One image's mask: `mask[i]` true means position i is replaced by the
/// mask token. `ratio_used` records the schedule value that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
    pub ratio_used: f64,
    pub image_id: u64,
}

impl MaskPlan {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Schedule value at `step`.
///
/// Cosine: `target * (1 - cos(pi * step / total)) / 2`, which is exactly 0
/// at step 0 and exactly `target` at `total_steps`.
pub fn ratio_at(schedule: &MaskSchedule, step: usize) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: schedule.total_steps,
        });
    }
    Ok(match schedule.kind {
        ScheduleKind::Constant => schedule.target_ratio,
        ScheduleKind::Cosine => {
            let w = cosine_ramp(step, schedule.total_steps);
            // target*(1-w) ... no: ramp weight applied multiplicatively so
            // the endpoints are exact in floating point.
            schedule.target_ratio * w
        }
    })
}

/// Ramp `(1 - cos(pi * step/total)) / 2` in [0,1]; exact at the endpoints.
pub(crate) fn cosine_ramp(step: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    if step == 0 {
        return 0.0;
    }
    if step == total {
        return 1.0;
    }
    0.5 * (1.0 - (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Draw an independent Bernoulli(ratio) mask over `n_tokens` positions.
pub fn draw_mask(rng: &mut Rng, n_tokens: usize, ratio: f64) -> Result<MaskPlan> {
    if n_tokens == 0 {
        return Err(Error::invalid("draw_mask", "n_tokens must be positive"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(
            "draw_mask",
            format!("ratio {ratio} outside [0,1]"),
        ));
    }
    let mask = (0..n_tokens).map(|_| rng.bernoulli(ratio)).collect();
    Ok(MaskPlan {
        mask,
        ratio_used: ratio,
        image_id: 0,
    })
}

/// Replace masked rows of `vision_tokens[N,D]` with `mask_embedding[D]`:
/// row i becomes the mask embedding where `plan.mask[i]`, otherwise it is
/// copied through untouched.
pub fn apply_mask(vision_tokens: &Tensor, plan: &MaskPlan, mask_embedding: &Tensor) -> Result<Tensor> {
    let (n, d) = vision_tokens.dims2("apply_mask")?;
    if plan.mask.len() != n {
        return Err(Error::shape(
            "apply_mask",
            format!("plan has {} bits for {} rows", plan.mask.len(), n),
        ));
    }
    if mask_embedding.numel() != d {
        return Err(Error::shape(
            "apply_mask",
            format!("mask embedding has {} dims, rows have {d}", mask_embedding.numel()),
        ));
    }
    let mut out = vision_tokens.clone();
    for (i, &masked) in plan.mask.iter().enumerate() {
        if masked {
            out.row_mut(i).copy_from_slice(mask_embedding.data());
        }
    }
    Ok(out)
}
