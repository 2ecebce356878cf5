//! Teacher weights as an exponential moving average of the student.
//!
//! `teacher ← τ·teacher + (1 − τ)·student`, applied once per training step
//! after the optimizer update. The teacher never receives gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Real, Role};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub tau: f64,
    /// Optional linear ramp of τ from `start` to `tau` over `steps` updates.
    pub warmup: Option<TauWarmup>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauWarmup {
    pub start: f64,
    pub steps: u64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            tau: 0.999,
            warmup: None,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("ema.tau", "must lie in [0, 1]"));
        }
        if let Some(w) = self.warmup {
            if !(0.0..=1.0).contains(&w.start) {
                return Err(Error::config("ema.warmup.start", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// τ used for the update that follows `updates_done` earlier updates.
    pub fn tau_at(&self, updates_done: u64) -> f64 {
        match self.warmup {
            Some(w) if w.steps > 0 && updates_done < w.steps => {
                w.start + (self.tau - w.start) * updates_done as f64 / w.steps as f64
            }
            _ => self.tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<T = f32> {
    pub params: ModelParams<T>,
    pub last_update_step: u64,
}

/// Deep copy of the student, tagged as teacher.
pub fn init_teacher<T: Real>(student: &ModelParams<T>) -> TeacherState<T> {
    TeacherState {
        params: student.clone().with_role(Role::Teacher),
        last_update_step: 0,
    }
}

pub fn ema_update<T: Real>(
    teacher: &mut TeacherState<T>,
    student: &ModelParams<T>,
    config: &EmaConfig,
) -> Result<()> {
    teacher.params.check_same_structure(student)?;
    let tau = config.tau_at(teacher.last_update_step);
    blend(&mut teacher.params, student, tau);
    teacher.last_update_step += 1;
    Ok(())
}

fn blend<T: Real>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, tau: f64) {
    // exact at the endpoints
    if tau == 1.0 {
        return;
    }
    if tau == 0.0 {
        for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
            t.data.copy_from_slice(&s.data);
        }
        return;
    }
    let keep = T::from_f64_lossy(tau);
    let mix = T::from_f64_lossy(1.0 - tau);
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (a, &b) in t.data.iter_mut().zip(&s.data) {
            *a = keep * *a + mix * b;
        }
    }
}
