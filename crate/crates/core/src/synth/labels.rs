//! Threat score and the twelve-class window labelling routine.

use serde::{Deserialize, Serialize};

use super::geometry::ROBOT_RADIUS;

/// Safe distance of the threat score (m).
pub const SAFE_DISTANCE: f64 = 0.8;
/// Mean threat above which a window counts as narrow.
pub const NARROW_THRESHOLD: f64 = 0.25;

pub const ROTATION_MAX_SPEED: f64 = 0.05;
pub const ROTATION_MIN_TURN_RATE: f64 = 0.3;
pub const FORWARD_MIN_SPEED: f64 = 0.05;
pub const STRAIGHT_MAX_TURN_RATE: f64 = 0.15;
pub const REVERSE_MAX_SPEED: f64 = -0.05;

pub const NUM_CLASSES: usize = 12;

/// Saturated mean proximity over all beams, in `[0, 1]`.
pub fn threat_score(ranges: &[f64], radius: f64, safe_distance: f64) -> f64 {
    if ranges.is_empty() {
        return 0.0;
    }
    ranges
        .iter()
        .map(|&l| ((safe_distance + radius - l) / safe_distance).clamp(0.0, 1.0))
        .sum::<f64>()
        / ranges.len() as f64
}

pub fn default_threat_score(ranges: &[f64]) -> f64 {
    threat_score(ranges, ROBOT_RADIUS, SAFE_DISTANCE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Manoeuvre {
    RotateLeft = 0,
    RotateRight = 1,
    Forward = 2,
    Reverse = 3,
    TurnLeft = 4,
    TurnRight = 5,
}

impl Manoeuvre {
    pub const ALL: [Manoeuvre; 6] = [
        Manoeuvre::RotateLeft,
        Manoeuvre::RotateRight,
        Manoeuvre::Forward,
        Manoeuvre::Reverse,
        Manoeuvre::TurnLeft,
        Manoeuvre::TurnRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Manoeuvre::RotateLeft => "rotate-left",
            Manoeuvre::RotateRight => "rotate-right",
            Manoeuvre::Forward => "forward",
            Manoeuvre::Reverse => "reverse",
            Manoeuvre::TurnLeft => "turn-left",
            Manoeuvre::TurnRight => "turn-right",
        }
    }

    /// Classifies mean commanded linear and angular velocity.
    pub fn from_mean_command(v: f64, omega: f64) -> Self {
        if v.abs() < ROTATION_MAX_SPEED && omega.abs() > ROTATION_MIN_TURN_RATE {
            if omega > 0.0 {
                Manoeuvre::RotateLeft
            } else {
                Manoeuvre::RotateRight
            }
        } else if v > FORWARD_MIN_SPEED && omega.abs() <= STRAIGHT_MAX_TURN_RATE {
            Manoeuvre::Forward
        } else if v < REVERSE_MAX_SPEED {
            Manoeuvre::Reverse
        } else if omega >= 0.0 {
            Manoeuvre::TurnLeft
        } else {
            Manoeuvre::TurnRight
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowLabel {
    pub manoeuvre: Manoeuvre,
    pub narrow: bool,
}

impl WindowLabel {
    /// `manoeuvre · 2 + narrow`.
    pub fn class_id(&self) -> usize {
        self.manoeuvre.index() * 2 + self.narrow as usize
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        Manoeuvre::from_index(id / 2).map(|manoeuvre| WindowLabel {
            manoeuvre,
            narrow: id % 2 == 1,
        })
    }

    pub fn name(&self) -> String {
        format!(
            "{} {}",
            if self.narrow { "narrow" } else { "wide" },
            self.manoeuvre.name()
        )
    }
}

/// Labels a window from its commands `(v, ω)` and range scans.
pub fn label_window(commands: &[(f64, f64)], scans: &[Vec<f64>]) -> WindowLabel {
    let n = commands.len().max(1) as f64;
    let v = commands.iter().map(|c| c.0).sum::<f64>() / n;
    let w = commands.iter().map(|c| c.1).sum::<f64>() / n;
    let threat = if scans.is_empty() {
        0.0
    } else {
        scans.iter().map(|s| default_threat_score(s)).sum::<f64>() / scans.len() as f64
    };
    WindowLabel {
        manoeuvre: Manoeuvre::from_mean_command(v, w),
        narrow: threat > NARROW_THRESHOLD,
    }
}
