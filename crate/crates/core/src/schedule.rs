//! Optimiser hyper-parameters and the multi-step learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    /// Last step (1-based) of the independent phase; defaults to ⌈K/2⌉.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_threshold: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_factors")]
    pub decay_factors: Vec<f64>,
    #[serde(default = "default_milestones")]
    pub decay_milestones: Vec<f64>,
}

fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.2
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    1e-4
}
fn default_factors() -> Vec<f64> {
    vec![0.5, 0.2, 0.1]
}
fn default_milestones() -> Vec<f64> {
    vec![0.5, 0.7, 0.9]
}

impl ScheduleConfig {
    pub fn with_steps(total_steps: usize) -> Self {
        Self {
            total_steps,
            phase_threshold: None,
            batch_size: default_batch(),
            base_lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            decay_factors: default_factors(),
            decay_milestones: default_milestones(),
        }
    }

    /// τ, resolved.
    pub fn tau(&self) -> usize {
        self.phase_threshold.unwrap_or(self.total_steps.div_ceil(2))
    }

    pub fn resolve(&mut self) {
        self.phase_threshold = Some(self.tau());
    }

    /// Problems with this schedule, as `(field, message)` pairs.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.total_steps == 0 {
            out.push(("total_steps", "must be positive".to_string()));
        }
        if self.tau() > self.total_steps {
            out.push(("phase_threshold", format!("τ={} exceeds K={}", self.tau(), self.total_steps)));
        }
        if self.batch_size == 0 {
            out.push(("batch_size", "must be positive".to_string()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            out.push(("base_lr", "must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(("momentum", "must lie in [0, 1)".to_string()));
        }
        if self.weight_decay < 0.0 {
            out.push(("weight_decay", "must be non-negative".to_string()));
        }
        if self.decay_factors.len() != self.decay_milestones.len() {
            out.push(("decay_factors", "needs one factor per milestone".to_string()));
        }
        let ms = &self.decay_milestones;
        if ms.iter().any(|m| !(*m > 0.0 && *m < 1.0)) || ms.windows(2).any(|w| w[0] >= w[1]) {
            out.push(("decay_milestones", "must be strictly increasing fractions in (0, 1)".to_string()));
        }
        out
    }
}

/// Learning rate at 0-based `step`: the base rate times the factor of the
/// last milestone already reached (1.0 before the first).
pub fn lr_at(step: usize, schedule: &ScheduleConfig) -> f64 {
    let k = schedule.total_steps as f64;
    let factor = schedule
        .decay_milestones
        .iter()
        .zip(&schedule.decay_factors)
        .filter(|(m, _)| step as f64 >= **m * k)
        .map(|(_, f)| *f)
        .last()
        .unwrap_or(1.0);
    // Rounded to 15 significant digits so decimal rates such as 0.2 × 0.1
    // come out as the literal 0.02 rather than 0.020000000000000004.
    let lr = schedule.base_lr * factor;
    format!("{lr:.14e}").parse().unwrap_or(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestones_for_k_1000() {
        let s = ScheduleConfig::with_steps(1000);
        assert_eq!(lr_at(0, &s), 0.2);
        assert_eq!(lr_at(499, &s), 0.2);
        assert_eq!(lr_at(500, &s), 0.1);
        assert_eq!(lr_at(600, &s), 0.1);
        assert_eq!(lr_at(700, &s), 0.04);
        assert_eq!(lr_at(950, &s), 0.02);
    }

    #[test]
    fn tau_defaults_to_midpoint() {
        assert_eq!(ScheduleConfig::with_steps(2000).tau(), 1000);
        assert_eq!(ScheduleConfig::with_steps(7).tau(), 4);
    }

    #[test]
    fn bad_milestones_flagged() {
        let mut s = ScheduleConfig::with_steps(10);
        s.decay_milestones = vec![0.5, 0.5, 0.9];
        assert!(s.problems().iter().any(|(f, _)| *f == "decay_milestones"));
        s.decay_milestones = vec![0.5, 0.7, 1.0];
        assert!(s.problems().iter().any(|(f, _)| *f == "decay_milestones"));
    }
}
