//! Windowed threshold detector shared by the co-state and EKF monitors.
//!
//! Samples are grouped into consecutive non-overlapping windows. A window
//! "exceeds" when its mean is above the threshold; the alarm is raised once
//! `consecutive` windows in a row exceed, and stays raised while they keep
//! exceeding.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedAlarm {
    window: usize,
    consecutive: usize,
    threshold: f64,
    sum: f64,
    filled: usize,
    run: usize,
    windows: usize,
    alarmed_windows: usize,
    first_alarm_t: Option<f64>,
    active: bool,
}

/// Outcome of a completed window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowVerdict {
    pub mean: f64,
    pub exceeded: bool,
    pub alarm: bool,
}

impl WindowedAlarm {
    pub fn new(window: usize, consecutive: usize, threshold: f64) -> Self {
        WindowedAlarm {
            window: window.max(1),
            consecutive: consecutive.max(1),
            threshold,
            sum: 0.0,
            filled: 0,
            run: 0,
            windows: 0,
            alarmed_windows: 0,
            first_alarm_t: None,
            active: false,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = threshold;
    }

    /// Feeds one sample; returns a verdict when it closes a window.
    pub fn push(&mut self, t: f64, value: f64) -> Option<WindowVerdict> {
        self.sum += value;
        self.filled += 1;
        if self.filled < self.window {
            return None;
        }
        let mean = self.sum / self.window as f64;
        self.sum = 0.0;
        self.filled = 0;
        self.windows += 1;
        let exceeded = mean > self.threshold;
        self.run = if exceeded { self.run + 1 } else { 0 };
        self.active = self.run >= self.consecutive;
        if self.active {
            self.alarmed_windows += 1;
            if self.first_alarm_t.is_none() {
                self.first_alarm_t = Some(t);
            }
        }
        Some(WindowVerdict { mean, exceeded, alarm: self.active })
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn first_alarm_t(&self) -> Option<f64> {
        self.first_alarm_t
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn alarmed_windows(&self) -> usize {
        self.alarmed_windows
    }

    /// Fraction of completed windows evaluated in the alarm state.
    pub fn alarm_rate(&self) -> f64 {
        if self.windows == 0 {
            0.0
        } else {
            self.alarmed_windows as f64 / self.windows as f64
        }
    }
}
