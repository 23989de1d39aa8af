//! Analytic kinematics for the ten motion classes.
//!
//! The skeleton is 5 joints × 3 coordinates (x right, y up, z forward),
//! flattened row-major per frame: root, left hand, right hand, left foot,
//! right foot. Every class is a closed-form trajectory in seconds, scaled by
//! a speed factor and an amplitude factor and (where meaningful) steered by
//! a direction; the corpus generator samples those parameters and adds
//! small Gaussian jitter on top.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOINTS: usize = 5;
pub const DIMS: usize = JOINTS * 3;

/// Rest pose: a standing figure at the origin facing +z.
const REST: [[f64; 3]; JOINTS] = [
    [0.0, 0.90, 0.0],   // root (pelvis)
    [-0.30, 0.90, 0.0], // left hand
    [0.30, 0.90, 0.0],  // right hand
    [-0.15, 0.05, 0.0], // left foot
    [0.15, 0.05, 0.0],  // right foot
];

pub const CLASS_NAMES: [&str; 10] =
    ["walk", "run", "jump", "circle", "turn", "wave", "squat", "kick", "sit", "stretch"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
    Left,
    Right,
}

impl Direction {
    /// Unit heading in the ground plane.
    pub fn heading(self) -> [f64; 3] {
        match self {
            Direction::Forward => [0.0, 0.0, 1.0],
            Direction::Backward => [0.0, 0.0, -1.0],
            Direction::Left => [-1.0, 0.0, 0.0],
            Direction::Right => [1.0, 0.0, 0.0],
        }
    }

    /// Sign convention for rotations: left is positive (counterclockwise).
    pub fn spin(self) -> f64 {
        match self {
            Direction::Left | Direction::Forward => 1.0,
            Direction::Right | Direction::Backward => -1.0,
        }
    }
}

/// Continuous parameters of one clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub speed: f64,
    pub amplitude: f64,
    pub direction: Direction,
}

/// Directions that matter for a class (used both for sampling and for the
/// caption slot).
pub fn allowed_directions(class: &str) -> &'static [Direction] {
    match class {
        "walk" | "run" => {
            &[Direction::Forward, Direction::Backward, Direction::Left, Direction::Right]
        }
        "circle" | "turn" | "kick" | "wave" => &[Direction::Left, Direction::Right],
        _ => &[Direction::Forward],
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Pose of `class` at time `t` seconds, without jitter.
pub fn pose_at(class: &str, p: &ClipParams, t: f64) -> Result<[f64; DIMS]> {
    let mut j = REST;
    let s = p.speed;
    let a = p.amplitude;
    let h = p.direction.heading();
    match class {
        "walk" | "run" => {
            let (v, freq, step, lift, swing, bob) = if class == "walk" {
                (0.7 * s, 1.6 * s, 0.25 * a, 0.08 * a, 0.15 * a, 0.03 * a)
            } else {
                (1.8 * s, 2.6 * s, 0.40 * a, 0.18 * a, 0.30 * a, 0.06 * a)
            };
            let phase = 2.0 * PI * freq * t;
            let travel = v * t;
            for joint in j.iter_mut() {
                joint[0] += h[0] * travel;
                joint[2] += h[2] * travel;
            }
            // Feet alternate along the heading; hands counter-swing.
            let gait = phase.sin();
            j[3][0] += h[0] * step * gait;
            j[3][2] += h[2] * step * gait;
            j[3][1] += lift * gait.max(0.0);
            j[4][0] -= h[0] * step * gait;
            j[4][2] -= h[2] * step * gait;
            j[4][1] += lift * (-gait).max(0.0);
            j[1][0] -= h[0] * swing * gait;
            j[1][2] -= h[2] * swing * gait;
            j[2][0] += h[0] * swing * gait;
            j[2][2] += h[2] * swing * gait;
            j[0][1] += bob * (2.0 * phase).sin();
        }
        "jump" => {
            // Repeated crouch-and-jump cycles in place.
            let period = 1.2 / s;
            let phi = (t / period).fract();
            let dy = if phi < 0.35 {
                -0.22 * a * (PI * phi / 0.35).sin()
            } else {
                let u = (phi - 0.35) / 0.65;
                0.45 * a * 4.0 * u * (1.0 - u)
            };
            let flight = if phi < 0.35 { 0.0 } else { (PI * (phi - 0.35) / 0.65).sin() };
            for joint in j.iter_mut() {
                joint[1] += dy;
            }
            j[1][1] += 0.45 * a * flight;
            j[2][1] += 0.45 * a * flight;
        }
        "circle" => {
            // Walk along a circular arc; spin sign picks the turning side.
            let r = 0.8 * a.max(0.3);
            let omega = 0.9 * s * p.direction.spin();
            let ang = omega * t;
            let cx = r * ang.sin();
            let cz = r * (1.0 - ang.cos());
            let freq = 1.6 * s;
            let gait = (2.0 * PI * freq * t).sin();
            for joint in j.iter_mut() {
                joint[0] += cx;
                joint[2] += cz;
            }
            j[3][1] += 0.08 * a * gait.max(0.0);
            j[4][1] += 0.08 * a * (-gait).max(0.0);
            j[0][1] += 0.03 * a * (4.0 * PI * freq * t).sin();
        }
        "turn" => {
            // Rotation in place about the vertical axis through the root.
            let omega = 1.2 * s * p.direction.spin();
            let ang = omega * t;
            let (sin, cos) = (ang.sin(), ang.cos());
            for joint in j.iter_mut().skip(1) {
                let (x, z) = (joint[0], joint[2]);
                joint[0] = x * cos + z * sin;
                joint[2] = -x * sin + z * cos;
            }
        }
        "wave" => {
            // One hand raised overhead, oscillating side to side.
            let hand = if p.direction == Direction::Left { 1 } else { 2 };
            let side = if hand == 1 { -1.0 } else { 1.0 };
            j[hand][1] = 1.55;
            j[hand][0] = side * 0.25 + 0.28 * a * (2.0 * PI * 1.5 * s * t).sin();
        }
        "squat" => {
            // Periodic dips; hands extend forward while low.
            let dip = 0.5 - 0.5 * (2.0 * PI * 0.7 * s * t).cos();
            let drop = 0.32 * a * dip;
            j[0][1] -= drop;
            j[1][1] -= drop;
            j[2][1] -= drop;
            j[1][2] += 0.25 * a * dip;
            j[2][2] += 0.25 * a * dip;
        }
        "kick" => {
            // Sharp periodic forward kicks with one foot.
            let foot = if p.direction == Direction::Left { 3 } else { 4 };
            let pulse = (2.0 * PI * 0.9 * s * t).sin().max(0.0).powi(3);
            j[foot][2] += 0.70 * a * pulse;
            j[foot][1] += 0.30 * a * pulse;
            j[0][2] -= 0.05 * a * pulse;
        }
        "sit" => {
            // One smooth transition to a seated hold.
            let u = smoothstep((t - 0.6) * 1.2 * s);
            let drop = 0.35 * a.min(1.2) * u;
            j[0][1] -= drop;
            j[1][1] -= drop;
            j[2][1] -= drop;
            j[1][2] += 0.18 * u;
            j[2][2] += 0.18 * u;
        }
        "stretch" => {
            // Both arms ramp overhead and hold, with a slow sway.
            let u = smoothstep(t * 0.8 * s);
            let rise = 0.65 * a * u;
            j[1][1] += rise;
            j[2][1] += rise;
            j[1][0] += 0.05 * (2.0 * PI * 0.4 * s * t).sin() * u;
            j[2][0] += 0.05 * (2.0 * PI * 0.4 * s * t).sin() * u;
            j[0][1] += 0.04 * a * u;
        }
        other => {
            return Err(Error::contract(format!(
                "unknown motion class '{other}' (expected one of {CLASS_NAMES:?})"
            )))
        }
    }
    let mut flat = [0.0; DIMS];
    for (i, joint) in j.iter().enumerate() {
        flat[i * 3..i * 3 + 3].copy_from_slice(joint);
    }
    Ok(flat)
}
