//! Nearest-template class oracle: classify a clip by fitting every class's
//! analytic trajectory family to it and picking the best least-squares fit.
//!
//! The corpus is procedural, so ground truth for a generated clip is
//! recoverable: render each (class, speed, amplitude, direction) candidate
//! at the clip's frame count, measure mean squared error in raw units, and
//! take the argmin class. A coarse grid narrows the field, then coordinate
//! descent on the continuous parameters refines the leaders.

use crate::corpus::classes::{allowed_directions, pose_at, ClipParams, CLASS_NAMES};
use crate::corpus::{DIMS, FPS};
use crate::error::{Error, Result};

/// The oracle's verdict: best class with its fitted parameters and MSE.
#[derive(Debug, Clone)]
pub struct OracleFit {
    pub class: &'static str,
    pub params: ClipParams,
    pub mse: f64,
}

const SPEED_RANGE: (f64, f64) = (0.6, 1.8);
const AMP_RANGE: (f64, f64) = (0.5, 1.5);

/// Mean squared error between the clip and a clean candidate rendering.
fn fit_mse(motion: &[Vec<f64>], class: &str, p: &ClipParams) -> Result<f64> {
    let mut acc = 0.0;
    for (k, frame) in motion.iter().enumerate() {
        let pose = pose_at(class, p, k as f64 / FPS as f64)?;
        for d in 0..DIMS {
            let diff = frame[d] - pose[d];
            acc += diff * diff;
        }
    }
    Ok(acc / (motion.len() * DIMS) as f64)
}

/// Golden-section line search over one parameter.
fn refine_1d(
    motion: &[Vec<f64>],
    class: &str,
    base: &ClipParams,
    pick: fn(&mut ClipParams) -> &mut f64,
    lo: f64,
    hi: f64,
) -> Result<(f64, f64)> {
    const PHI: f64 = 0.618_033_988_749_894_8;
    let eval = |x: f64| -> Result<f64> {
        let mut p = *base;
        *pick(&mut p) = x;
        fit_mse(motion, class, &p)
    };
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - PHI * (b - a);
    let mut x2 = a + PHI * (b - a);
    let mut f1 = eval(x1)?;
    let mut f2 = eval(x2)?;
    for _ in 0..12 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - PHI * (b - a);
            f1 = eval(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + PHI * (b - a);
            f2 = eval(x2)?;
        }
    }
    Ok(if f1 < f2 { (x1, f1) } else { (x2, f2) })
}

/// Classify a raw-unit clip (frames × 15) against all ten class families.
pub fn classify_motion(motion: &[Vec<f64>]) -> Result<OracleFit> {
    if motion.is_empty() {
        return Err(Error::contract("cannot classify an empty clip"));
    }
    if motion.iter().any(|f| f.len() != DIMS) {
        return Err(Error::contract(format!("oracle expects {DIMS} coordinates per frame")));
    }

    // Coarse grid: every class × direction keeps its best (speed, amp) cell.
    let speeds = [0.6, 0.9, 1.2, 1.5, 1.8];
    let amps = [0.5, 0.875, 1.25, 1.5];
    let mut leaders: Vec<OracleFit> = Vec::new();
    for class in CLASS_NAMES {
        for &direction in allowed_directions(class) {
            let mut best: Option<OracleFit> = None;
            for &speed in &speeds {
                for &amplitude in &amps {
                    let p = ClipParams { speed, amplitude, direction };
                    let mse = fit_mse(motion, class, &p)?;
                    if best.as_ref().is_none_or(|b| mse < b.mse) {
                        best = Some(OracleFit { class, params: p, mse });
                    }
                }
            }
            leaders.push(best.expect("grid is non-empty"));
        }
    }
    leaders.sort_by(|a, b| a.mse.total_cmp(&b.mse));
    leaders.truncate(3);

    // Refine the leaders: two rounds of coordinate descent over the
    // continuous parameters.
    let mut best = leaders[0].clone();
    for cand in &leaders {
        let mut p = cand.params;
        let mut mse = cand.mse;
        for _ in 0..2 {
            let (s, m) = refine_1d(
                motion,
                cand.class,
                &p,
                |q| &mut q.speed,
                SPEED_RANGE.0,
                SPEED_RANGE.1,
            )?;
            if m < mse {
                p.speed = s;
                mse = m;
            }
            let (a, m) =
                refine_1d(motion, cand.class, &p, |q| &mut q.amplitude, AMP_RANGE.0, AMP_RANGE.1)?;
            if m < mse {
                p.amplitude = a;
                mse = m;
            }
        }
        if mse < best.mse {
            best = OracleFit { class: cand.class, params: p, mse };
        }
    }
    Ok(best)
}

/// Fraction of clips whose oracle class matches the label.
pub fn class_accuracy(clips: &[(&str, &[Vec<f64>])]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::contract("class accuracy needs at least one clip"));
    }
    let mut hits = 0usize;
    for (label, motion) in clips {
        if classify_motion(motion)?.class == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / clips.len() as f64)
}
