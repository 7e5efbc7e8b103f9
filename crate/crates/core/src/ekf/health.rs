//! Per-sensor self-diagnosis.
//!
//! A sensor turns unhealthy once more than `reject_fraction · window` of its
//! last `window` gate evaluations were rejections. It recovers after
//! `recovery` consecutive gate-passing evaluations; the window is cleared on
//! recovery so the stale rejections cannot flip it straight back.

use std::collections::VecDeque;

use super::UpdateOutcome;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HealthConfig {
    pub window: usize,
    pub reject_fraction: f64,
    pub recovery: usize,
}

impl Default for HealthConfig {
    fn default() -> Self {
        HealthConfig {
            window: 50,
            reject_fraction: 0.5,
            recovery: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HealthStatus {
    Healthy,
    Unhealthy,
}

impl HealthStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            HealthStatus::Healthy => "healthy",
            HealthStatus::Unhealthy => "unhealthy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HealthTransition {
    pub from: HealthStatus,
    pub to: HealthStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorHealth {
    config: HealthConfig,
    /// true = rejected
    window: VecDeque<bool>,
    rejections: usize,
    status: HealthStatus,
    consecutive_accepts: usize,
}

impl SensorHealth {
    pub fn new(config: HealthConfig) -> Self {
        SensorHealth {
            config,
            window: VecDeque::with_capacity(config.window + 1),
            rejections: 0,
            status: HealthStatus::Healthy,
            consecutive_accepts: 0,
        }
    }

    pub fn status(&self) -> HealthStatus {
        self.status
    }

    pub fn is_healthy(&self) -> bool {
        self.status == HealthStatus::Healthy
    }

    pub fn consecutive_accepts(&self) -> usize {
        self.consecutive_accepts
    }

    /// Rejections among the last `window` evaluations.
    pub fn rejections_in_window(&self) -> usize {
        self.rejections
    }

    /// Records one gate evaluation; returns the status change, if any.
    pub fn step(&mut self, accepted: bool) -> Option<HealthTransition> {
        self.window.push_back(!accepted);
        if !accepted {
            self.rejections += 1;
        }
        if self.window.len() > self.config.window && self.window.pop_front() == Some(true) {
            self.rejections -= 1;
        }
        self.consecutive_accepts = if accepted { self.consecutive_accepts + 1 } else { 0 };

        let from = self.status;
        match self.status {
            HealthStatus::Healthy => {
                let limit = self.config.reject_fraction * self.config.window as f64;
                if self.rejections as f64 > limit {
                    self.status = HealthStatus::Unhealthy;
                }
            }
            HealthStatus::Unhealthy => {
                if self.consecutive_accepts >= self.config.recovery {
                    self.status = HealthStatus::Healthy;
                    self.window.clear();
                    self.rejections = 0;
                }
            }
        }
        (from != self.status).then_some(HealthTransition { from, to: self.status })
    }
}

pub fn health_step(h: &SensorHealth, o: &UpdateOutcome) -> SensorHealth {
    let mut next = h.clone();
    next.step(o.accepted);
    next
}
