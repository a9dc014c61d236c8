//! Scripted navigation episodes.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::geometry::{raycast, unicycle_step, Pose, WorldMap, ROBOT_RADIUS, TICK_SECONDS};
use super::labels::{default_threat_score, Manoeuvre};
use crate::error::{Error, Result};

pub const COMMAND_NOISE_V: f64 = 0.05;
pub const COMMAND_NOISE_OMEGA: f64 = 0.1;
pub const RANGE_NOISE: f64 = 0.01;
pub const MAX_PLACEMENTS: usize = 20;
/// Extra clearance demanded of a start position beyond the robot radius.
const START_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BehaviourMode {
    ForwardCruise = 0,
    LeftTurn = 1,
    RightTurn = 2,
    ReverseOut = 3,
    RotateLeft = 4,
    RotateRight = 5,
}

impl BehaviourMode {
    pub const ALL: [BehaviourMode; 6] = [
        BehaviourMode::ForwardCruise,
        BehaviourMode::LeftTurn,
        BehaviourMode::RightTurn,
        BehaviourMode::ReverseOut,
        BehaviourMode::RotateLeft,
        BehaviourMode::RotateRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BehaviourMode::ForwardCruise => "forward-cruise",
            BehaviourMode::LeftTurn => "left-turn",
            BehaviourMode::RightTurn => "right-turn",
            BehaviourMode::ReverseOut => "reverse-out",
            BehaviourMode::RotateLeft => "rotate-left",
            BehaviourMode::RotateRight => "rotate-right",
        }
    }

    /// The manoeuvre this mode is scripted to perform.
    pub fn manoeuvre(self) -> Manoeuvre {
        match self {
            BehaviourMode::ForwardCruise => Manoeuvre::Forward,
            BehaviourMode::LeftTurn => Manoeuvre::TurnLeft,
            BehaviourMode::RightTurn => Manoeuvre::TurnRight,
            BehaviourMode::ReverseOut => Manoeuvre::Reverse,
            BehaviourMode::RotateLeft => Manoeuvre::RotateLeft,
            BehaviourMode::RotateRight => Manoeuvre::RotateRight,
        }
    }

    /// Nominal `(v, ω)` before the per-episode speed factor.
    fn nominal_command(self) -> (f64, f64) {
        match self {
            BehaviourMode::ForwardCruise => (0.45, 0.0),
            BehaviourMode::LeftTurn => (0.3, 0.6),
            BehaviourMode::RightTurn => (0.3, -0.6),
            BehaviourMode::ReverseOut => (-0.3, 0.0),
            BehaviourMode::RotateLeft => (0.0, 0.7),
            BehaviourMode::RotateRight => (0.0, -0.7),
        }
    }

}

/// One simulated trial, sampled at 10 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: u32,
    pub map_id: u8,
    pub mode: BehaviourMode,
    /// Pose at which each tick's scan was taken.
    pub poses: Vec<Pose>,
    /// Commanded `(v, ω)` per tick.
    pub commands: Vec<(f64, f64)>,
    /// Range scan per tick.
    pub ranges: Vec<Vec<f64>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub ticks: usize,
    pub beams: usize,
    pub max_range: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            ticks: 40,
            beams: super::geometry::DEFAULT_BEAMS,
            max_range: super::geometry::SENSOR_MAX_RANGE,
        }
    }
}

/// Free space around a candidate start, summarized from a scan taken
/// with heading 0: nearest obstacle ahead and behind, mean range to
/// either side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surroundings {
    pub front: f64,
    pub rear: f64,
    pub left: f64,
    pub right: f64,
}

impl Surroundings {
    /// Reads the sector statistics for heading offset `shift` (in beams)
    /// from a world-frame scan.
    fn from_scan(ranges: &[f64], shift: usize) -> Self {
        let b = ranges.len();
        let at = |deg: f64| {
            let k = ((deg / 360.0 * b as f64).round() as i64).rem_euclid(b as i64) as usize;
            ranges[(k + shift) % b]
        };
        let sector = |lo: f64, hi: f64| {
            let step = 360.0 / b as f64;
            let mut vals = Vec::new();
            let mut d = lo;
            while d <= hi + 1e-9 {
                vals.push(at(d));
                d += step;
            }
            vals
        };
        let min = |v: Vec<f64>| v.into_iter().fold(f64::INFINITY, f64::min);
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        Surroundings {
            front: min(sector(-20.0, 20.0)),
            rear: min(sector(160.0, 200.0)),
            left: mean(sector(60.0, 120.0)),
            right: mean(sector(-120.0, -60.0)),
        }
    }
}

impl BehaviourMode {
    /// Where a driver would plausibly start this manoeuvre: cruising with
    /// open space ahead, reversing away from a close wall, turning or
    /// rotating towards the more open side.
    pub fn suits(self, s: &Surroundings) -> bool {
        let open_left = s.left - s.right >= 1.0;
        let open_right = s.right - s.left >= 1.0;
        match self {
            BehaviourMode::ForwardCruise => s.front >= 3.5,
            BehaviourMode::ReverseOut => (0.7..=1.4).contains(&s.front) && s.rear >= 2.2,
            BehaviourMode::RotateLeft => s.front <= 1.6 && open_left,
            BehaviourMode::RotateRight => s.front <= 1.6 && open_right,
            BehaviourMode::LeftTurn => s.front >= 2.0 && open_left,
            BehaviourMode::RightTurn => s.front >= 2.0 && open_right,
        }
    }
}

/// Beams of the coarse scan used to choose a start heading.
const CONTEXT_BEAMS: usize = 72;

fn sample_start<R: Rng + ?Sized>(map: &WorldMap, mode: BehaviourMode, rng: &mut R) -> Result<Option<Pose>> {
    let (Ok(xs), Ok(ys)) = (
        Uniform::new(map.bounds.x0, map.bounds.x1),
        Uniform::new(map.bounds.y0, map.bounds.y1),
    ) else {
        return Ok(None);
    };
    let jitter = Normal::new(0.0, 0.02).expect("valid sigma");
    for _ in 0..200 {
        let p = (xs.sample(rng), ys.sample(rng));
        if !map.is_free(p) || map.clearance(p) < ROBOT_RADIUS + START_MARGIN {
            continue;
        }
        let scan = raycast(&Pose::new(p.0, p.1, 0.0), map, CONTEXT_BEAMS, super::geometry::SENSOR_MAX_RANGE)?;
        let headings: Vec<usize> = (0..CONTEXT_BEAMS)
            .filter(|&k| mode.suits(&Surroundings::from_scan(&scan.ranges, k)))
            .collect();
        if headings.is_empty() {
            continue;
        }
        let k = headings[rng.random_range(0..headings.len())];
        let theta = 2.0 * PI * k as f64 / CONTEXT_BEAMS as f64 + jitter.sample(rng);
        return Ok(Some(Pose::new(p.0, p.1, theta)));
    }
    Ok(None)
}

fn simulate<R: Rng + ?Sized>(
    map: &WorldMap,
    mode: BehaviourMode,
    start: Pose,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Option<(Vec<Pose>, Vec<(f64, f64)>)>> {
    let scale = rng.random_range(0.8..1.2);
    let (v0, w0) = mode.nominal_command();
    let noise_v = Normal::new(0.0, COMMAND_NOISE_V).expect("valid sigma");
    let noise_w = Normal::new(0.0, COMMAND_NOISE_OMEGA).expect("valid sigma");
    let mut pose = start;
    let mut poses = Vec::with_capacity(cfg.ticks);
    let mut commands = Vec::with_capacity(cfg.ticks);
    for _ in 0..cfg.ticks {
        if !map.is_free((pose.x, pose.y)) || map.clearance((pose.x, pose.y)) < ROBOT_RADIUS {
            return Ok(None);
        }
        let cmd = (
            v0 * scale + noise_v.sample(rng),
            w0 * scale + noise_w.sample(rng),
        );
        poses.push(pose);
        commands.push(cmd);
        pose = unicycle_step(pose, cmd.0, cmd.1, TICK_SECONDS)?;
    }
    if !map.is_free((pose.x, pose.y)) || map.clearance((pose.x, pose.y)) < ROBOT_RADIUS {
        return Ok(None);
    }
    Ok(Some((poses, commands)))
}

/// Runs the scripted controller for `mode` from a random collision-free
/// start. Gives up after [`MAX_PLACEMENTS`] start placements.
pub fn generate_episode<R: Rng + ?Sized>(
    id: u32,
    map: &WorldMap,
    mode: BehaviourMode,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    let range_noise = Normal::new(0.0, RANGE_NOISE).expect("valid sigma");
    for _ in 0..MAX_PLACEMENTS {
        let Some(start) = sample_start(map, mode, rng)? else {
            continue;
        };
        let Some((poses, commands)) = simulate(map, mode, start, cfg, rng)? else {
            continue;
        };
        let mut ranges = Vec::with_capacity(poses.len());
        for p in &poses {
            let scan = raycast(p, map, cfg.beams, cfg.max_range)?;
            ranges.push(
                scan.ranges
                    .into_iter()
                    .map(|r| (r + range_noise.sample(rng)).clamp(0.0, cfg.max_range))
                    .collect::<Vec<_>>(),
            );
        }
        debug_assert!(saturated_run(&ranges) <= 3);
        return Ok(Episode {
            id,
            map_id: map.id,
            mode,
            poses,
            commands,
            ranges,
        });
    }
    Err(Error::Generation(format!(
        "no feasible start for {} in map {} after {MAX_PLACEMENTS} placements",
        mode.name(),
        map.id
    )))
}

/// Longest run of consecutive ticks whose threat score is saturated at 1.
pub fn saturated_run(ranges: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for r in ranges {
        if default_threat_score(r) >= 1.0 {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}
