//! Planar kinematics, wall maps and a ray-cast rangefinder.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Robot radius used for collision checks and the threat score (m).
pub const ROBOT_RADIUS: f64 = 0.5;
pub const SENSOR_MAX_RANGE: f64 = 10.0;
pub const DEFAULT_BEAMS: usize = 72;
/// Control and recording period (10 Hz).
pub const TICK_SECONDS: f64 = 0.1;

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// One Euler step of differential-drive (unicycle) kinematics.
pub fn unicycle_step(p: Pose, v: f64, omega: f64, dt: f64) -> Result<Pose> {
    ensure!(dt > 0.0, "time step must be positive, got {dt}");
    Ok(Pose::new(
        p.x + v * p.theta.cos() * dt,
        p.y + v * p.theta.sin() * dt,
        p.theta + omega * dt,
    ))
}

/// Integrates a command sequence from `start`, returning every visited
/// pose after the start.
pub fn integrate_commands(start: Pose, commands: &[(f64, f64)], dt: f64) -> Result<Vec<Pose>> {
    let mut pose = start;
    let mut out = Vec::with_capacity(commands.len());
    for &(v, w) in commands {
        pose = unicycle_step(pose, v, w, dt)?;
        out.push(pose);
    }
    Ok(out)
}

/// Constant-velocity forecast: repeats the last command for `n` ticks.
pub fn constant_velocity_rollout(start: Pose, last: (f64, f64), n: usize, dt: f64) -> Result<Vec<Pose>> {
    integrate_commands(start, &vec![last; n], dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

impl Segment {
    pub fn new(a: (f64, f64), b: (f64, f64)) -> Self {
        Segment { a, b }
    }

    /// Distance along the ray `origin + s·dir` to this segment, if hit.
    pub fn ray_hit(&self, origin: (f64, f64), dir: (f64, f64)) -> Option<f64> {
        let e = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let denom = dir.0 * e.1 - dir.1 * e.0;
        if denom.abs() < 1e-12 {
            return None;
        }
        let w = (self.a.0 - origin.0, self.a.1 - origin.1);
        let s = (w.0 * e.1 - w.1 * e.0) / denom;
        let u = (w.0 * dir.1 - w.1 * dir.0) / denom;
        if s >= 0.0 && (-1e-12..=1.0 + 1e-12).contains(&u) {
            Some(s)
        } else {
            None
        }
    }

    pub fn distance_to(&self, p: (f64, f64)) -> f64 {
        let e = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = e.0 * e.0 + e.1 * e.1;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.0 - self.a.0) * e.0 + (p.1 - self.a.1) * e.1) / len2).clamp(0.0, 1.0)
        };
        let c = (self.a.0 + t * e.0, self.a.1 + t * e.1);
        ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt()
    }
}

/// Axis-aligned solid rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        p.0 > self.x0 && p.0 < self.x1 && p.1 > self.y0 && p.1 < self.y1
    }

    pub fn edges(&self) -> [Segment; 4] {
        let (a, b, c, d) = ((self.x0, self.y0), (self.x1, self.y0), (self.x1, self.y1), (self.x0, self.y1));
        [Segment::new(a, b), Segment::new(b, c), Segment::new(c, d), Segment::new(d, a)]
    }
}

/// Closed outer boundary, solid blocks and free-standing thin walls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldMap {
    pub id: u8,
    pub bounds: Rect,
    pub solids: Vec<Rect>,
    pub walls: Vec<Segment>,
}

/// Result of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub ranges: Vec<f64>,
    /// Set when the pose is not in free space; ranges are then all max.
    pub outside: bool,
}

impl WorldMap {
    /// All wall segments seen by the rangefinder.
    pub fn segments(&self) -> Vec<Segment> {
        let mut segs: Vec<Segment> = self.bounds.edges().to_vec();
        for s in &self.solids {
            segs.extend_from_slice(&s.edges());
        }
        segs.extend_from_slice(&self.walls);
        segs
    }

    pub fn is_free(&self, p: (f64, f64)) -> bool {
        self.bounds.contains(p) && !self.solids.iter().any(|s| s.contains(p))
    }

    /// Distance from `p` to the nearest wall.
    pub fn clearance(&self, p: (f64, f64)) -> f64 {
        self.segments()
            .iter()
            .map(|s| s.distance_to(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Open hall with scattered pillars.
    pub fn open_hall() -> Self {
        WorldMap {
            id: 1,
            bounds: Rect::new(0.0, 0.0, 14.0, 12.0),
            solids: vec![
                Rect::new(3.0, 3.0, 4.0, 4.0),
                Rect::new(9.0, 7.0, 10.5, 8.0),
                Rect::new(5.0, 8.0, 6.0, 9.5),
                Rect::new(10.0, 2.5, 11.0, 3.5),
                Rect::new(0.0, 5.5, 2.0, 6.5),
            ],
            walls: vec![],
        }
    }

    /// Two rooms joined by a 1.4 m corridor.
    pub fn two_rooms() -> Self {
        WorldMap {
            id: 2,
            bounds: Rect::new(0.0, 0.0, 20.0, 10.0),
            solids: vec![
                Rect::new(8.0, 0.0, 12.0, 4.3),
                Rect::new(8.0, 5.7, 12.0, 10.0),
                Rect::new(3.5, 4.0, 5.0, 5.2),
                Rect::new(15.0, 6.0, 16.0, 7.5),
                Rect::new(18.8, 0.0, 20.0, 3.0),
            ],
            walls: vec![],
        }
    }

    /// Grid of 1.2 m corridors around solid blocks plus one room.
    pub fn narrow_office() -> Self {
        WorldMap {
            id: 3,
            bounds: Rect::new(0.0, 0.0, 16.0, 12.0),
            solids: vec![
                Rect::new(1.2, 1.2, 7.4, 5.4),
                Rect::new(8.6, 1.2, 14.8, 5.4),
                Rect::new(1.2, 6.6, 7.4, 10.8),
            ],
            walls: vec![
                Segment::new((8.6, 6.6), (11.1, 6.6)),
                Segment::new((12.3, 6.6), (14.8, 6.6)),
                Segment::new((8.6, 10.8), (14.8, 10.8)),
                Segment::new((8.6, 6.6), (8.6, 10.8)),
                Segment::new((14.8, 6.6), (14.8, 10.8)),
            ],
        }
    }

    /// Maps 1–3 by id.
    pub fn by_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Self::open_hall()),
            2 => Ok(Self::two_rooms()),
            3 => Ok(Self::narrow_office()),
            other => Err(crate::error::Error::Contract(format!(
                "unknown map id {other}, expected 1, 2 or 3"
            ))),
        }
    }

    pub fn all() -> [WorldMap; 3] {
        [Self::open_hall(), Self::two_rooms(), Self::narrow_office()]
    }
}

/// Bearing of beam `i` of `beams` relative to the robot heading.
pub fn beam_bearing(i: usize, beams: usize) -> f64 {
    2.0 * PI * i as f64 / beams as f64
}

/// Casts `beams` evenly spaced rays, beam 0 straight ahead and bearings
/// increasing counter-clockwise.
pub fn raycast(p: &Pose, map: &WorldMap, beams: usize, max_range: f64) -> Result<Scan> {
    ensure!(beams >= 1, "need at least one beam");
    ensure!(max_range > 0.0, "max range must be positive");
    if !map.is_free((p.x, p.y)) {
        return Ok(Scan {
            ranges: vec![max_range; beams],
            outside: true,
        });
    }
    let segments = map.segments();
    let ranges = (0..beams)
        .map(|i| {
            let bearing = p.theta + beam_bearing(i, beams);
            let dir = (bearing.cos(), bearing.sin());
            segments
                .iter()
                .filter_map(|s| s.ray_hit((p.x, p.y), dir))
                .fold(max_range, f64::min)
        })
        .collect();
    Ok(Scan {
        ranges,
        outside: false,
    })
}
