//! Exponential-moving-average teacher: a gradient-free copy of the
//! student parameters, refreshed every `update_every` optimizer steps as
//! `teacher = decay * teacher + (1 - decay) * student`, with the decay
//! either constant or ramped to 1.0 on a cosine.
//!
//! The update applies uniformly to every tensor, so `decay = 1` is an
//! exact fixed point and `decay = 0` is an exact student copy; the patch
//! projector tracks the student through the same rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::cosine_ramp;
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaScheduleKind {
    Constant,
    CosineToOne,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EmaConfig {
    pub decay: f64,
    pub schedule: EmaScheduleKind,
    pub update_every: usize,
    pub total_steps: usize,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            decay: 0.95,
            schedule: EmaScheduleKind::CosineToOne,
            update_every: 100,
            total_steps: 0,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::Config(format!("ema decay {} outside [0,1]", self.decay)));
        }
        if self.update_every == 0 {
            return Err(Error::Config("ema update_every must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// The teacher's parameter copy plus the step of its last refresh.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub params: ModelParams,
    pub last_update_step: usize,
}

/// Deep-copy the student; teacher and student start exactly equal.
pub fn init_teacher(student: &ModelParams) -> TeacherState {
    TeacherState {
        params: student.clone(),
        last_update_step: 0,
    }
}

/// Decay value at `step`: the base decay for the constant schedule, or a
/// cosine ramp from the base decay at step 0 to exactly 1.0 at
/// `total_steps`.
pub fn decay_at(cfg: &EmaConfig, step: usize) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    Ok(match cfg.schedule {
        EmaScheduleKind::Constant => cfg.decay,
        EmaScheduleKind::CosineToOne => {
            let w = cosine_ramp(step, cfg.total_steps);
            // written as a true convex combination so w = 1 lands on 1.0
            // exactly in floating point
            cfg.decay * (1.0 - w) + w
        }
    })
}

/// Refresh the teacher when at least `update_every` steps have passed
/// since the last refresh: every tensor becomes
/// `decay * teacher + (1 - decay) * student` and the step is recorded.
/// Otherwise the state is untouched, bit for bit.
pub fn maybe_update(
    teacher: &mut TeacherState,
    student: &ModelParams,
    cfg: &EmaConfig,
    step: usize,
) -> Result<bool> {
    if step < teacher.last_update_step {
        return Err(Error::invalid(
            "maybe_update",
            format!("step {step} precedes last update {}", teacher.last_update_step),
        ));
    }
    if step - teacher.last_update_step < cfg.update_every {
        return Ok(false);
    }
    let decay = decay_at(cfg, step)?;
    for (t, s) in teacher.params.tensors_mut().into_iter().zip(student.tensors()) {
        if t.shape() != s.shape() {
            return Err(Error::shape(
                "maybe_update",
                format!("teacher {:?} vs student {:?}", t.shape(), s.shape()),
            ));
        }
        if decay == 1.0 {
            continue; // exact fixed point
        }
        if decay == 0.0 {
            t.data_mut().copy_from_slice(s.data());
            continue;
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = (decay * *tv as f64 + (1.0 - decay) * sv as f64) as f32;
        }
    }
    teacher.last_update_step = step;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Rng;
    use approx::assert_abs_diff_eq;

    fn small_params(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            vocab_size: 4,
            visual_logit_dim: 4,
            vision_head_hidden: 6,
            patch_size: 2,
            grid_rows: 2,
            grid_cols: 2,
            channels: 1,
        };
        ModelParams::init(&cfg, &mut Rng::seeded(seed)).unwrap()
    }

    fn bit_equal(a: &ModelParams, b: &ModelParams) -> bool {
        a.tensors()
            .iter()
            .zip(b.tensors())
            .all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
    }

    #[test]
    fn init_is_exact_copy_and_detached() {
        let mut student = small_params(1);
        let teacher = init_teacher(&student);
        assert!(bit_equal(&teacher.params, &student));
        // mutating the student afterwards leaves the teacher untouched
        student.mask_embed.data_mut()[0] += 1.0;
        assert_ne!(
            teacher.params.mask_embed.data()[0].to_bits(),
            student.mask_embed.data()[0].to_bits()
        );
        // init is deterministic
        let teacher2 = init_teacher(&student);
        let teacher3 = init_teacher(&student);
        assert!(bit_equal(&teacher2.params, &teacher3.params));
    }

    #[test]
    fn decay_schedule_values() {
        let cfg = EmaConfig {
            decay: 0.95,
            schedule: EmaScheduleKind::CosineToOne,
            update_every: 100,
            total_steps: 1000,
        };
        assert_eq!(decay_at(&cfg, 0).unwrap(), 0.95);
        assert_eq!(decay_at(&cfg, 1000).unwrap(), 1.0);
        assert_abs_diff_eq!(decay_at(&cfg, 500).unwrap(), 0.975, epsilon = 1e-12);
        assert!(decay_at(&cfg, 1001).is_err());

        let flat = EmaConfig {
            schedule: EmaScheduleKind::Constant,
            ..cfg
        };
        assert_eq!(decay_at(&flat, 777).unwrap(), 0.95);
    }

    #[test]
    fn update_respects_frequency() {
        let student = small_params(2);
        let mut teacher = init_teacher(&student);
        let cfg = EmaConfig {
            decay: 0.5,
            schedule: EmaScheduleKind::Constant,
            update_every: 100,
            total_steps: 1000,
        };
        assert!(!maybe_update(&mut teacher, &student, &cfg, 99).unwrap());
        assert_eq!(teacher.last_update_step, 0);
        assert!(maybe_update(&mut teacher, &student, &cfg, 100).unwrap());
        assert_eq!(teacher.last_update_step, 100);
        assert!(!maybe_update(&mut teacher, &student, &cfg, 150).unwrap());
        assert!(maybe_update(&mut teacher, &student, &cfg, 200).unwrap());
    }

    #[test]
    fn decay_one_is_bit_identical_fixed_point() {
        let student = small_params(3);
        let other = small_params(4);
        let mut teacher = init_teacher(&student);
        let before = teacher.params.clone();
        let cfg = EmaConfig {
            decay: 1.0,
            schedule: EmaScheduleKind::Constant,
            update_every: 1,
            total_steps: 10,
        };
        assert!(maybe_update(&mut teacher, &other, &cfg, 5).unwrap());
        assert!(bit_equal(&teacher.params, &before));
    }

    #[test]
    fn decay_zero_copies_student_bitwise() {
        let student = small_params(5);
        let other = small_params(6);
        let mut teacher = init_teacher(&other);
        let cfg = EmaConfig {
            decay: 0.0,
            schedule: EmaScheduleKind::Constant,
            update_every: 1,
            total_steps: 10,
        };
        assert!(maybe_update(&mut teacher, &student, &cfg, 1).unwrap());
        assert!(bit_equal(&teacher.params, &student));
    }

    #[test]
    fn one_step_scalar_arithmetic() {
        let mut student = small_params(7);
        for t in student.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut teacher = init_teacher(&student);
        for t in teacher.params.tensors_mut() {
            t.data_mut().fill(1.0);
        }
        let cfg = EmaConfig {
            decay: 0.95,
            schedule: EmaScheduleKind::Constant,
            update_every: 1,
            total_steps: 10,
        };
        maybe_update(&mut teacher, &student, &cfg, 1).unwrap();
        // the f64 arithmetic is exact; storage rounds once to f32
        assert_eq!(0.95f64 * 1.0 + (1.0 - 0.95) * 0.0, 0.95);
        for t in teacher.params.tensors() {
            for &v in t.data() {
                assert_eq!(v, 0.95f32);
            }
        }
    }

    #[test]
    fn teacher_converges_geometrically_to_frozen_student() {
        let student = small_params(8);
        let mut teacher = init_teacher(&small_params(9));
        let cfg = EmaConfig {
            decay: 0.5,
            schedule: EmaScheduleKind::Constant,
            update_every: 1,
            total_steps: 100,
        };
        let initial_gap: f64 = teacher
            .params
            .tensors()
            .iter()
            .zip(student.tensors())
            .flat_map(|(t, s)| t.data().iter().zip(s.data()).map(|(&a, &b)| ((a - b) as f64).abs()))
            .fold(0.0, f64::max);
        for step in 1..=20 {
            maybe_update(&mut teacher, &student, &cfg, step).unwrap();
        }
        let gap: f64 = teacher
            .params
            .tensors()
            .iter()
            .zip(student.tensors())
            .flat_map(|(t, s)| t.data().iter().zip(s.data()).map(|(&a, &b)| ((a - b) as f64).abs()))
            .fold(0.0, f64::max);
        assert!(gap < initial_gap * 0.5f64.powi(18), "gap {gap} vs initial {initial_gap}");
    }
}
