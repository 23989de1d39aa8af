//! AdamW with decoupled weight decay, global-norm gradient clipping, linear
//! learning-rate warmup, and per-group learning rates.
//!
//! Update per parameter θ with gradient g:
//!   m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
//!   θ ← θ − lr_t·( m̂ / (√v̂ + ε) ) − lr_t·wd·θ
//! where m̂, v̂ are bias-corrected and lr_t carries the warmup ramp. Decay is
//! decoupled: it applies to every trainable parameter uniformly and never
//! flows through the moments. Moments are held at f64 regardless of the
//! model dtype and are part of the checkpoint, so a resumed run continues
//! the exact trajectory. Any non-finite gradient aborts the step with an
//! error naming the parameter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Container;
use crate::nn::ParamMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_steps: 0,
        }
    }
}

struct Slot<T: Scalar> {
    name: String,
    tensor: Tensor<T>,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW<T: Scalar> {
    cfg: AdamWConfig,
    slots: Vec<Slot<T>>,
    t: u64,
    lr_scale: f64,
}

/// What one step observed, for logging.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr_scale: f64,
}

impl<T: Scalar> AdamW<T> {
    /// Track every parameter in `params`; `lr_of` assigns the base learning
    /// rate by name (parameter groups are name predicates).
    pub fn new(params: &ParamMap<T>, cfg: AdamWConfig, lr_of: impl Fn(&str) -> f64) -> Self {
        let slots = params
            .iter()
            .map(|(name, t)| Slot {
                name: name.to_string(),
                lr: lr_of(name),
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
                tensor: t.clone(),
            })
            .collect();
        Self { cfg, slots, t: 0, lr_scale: 1.0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// External schedule hook: every base rate is multiplied by `scale` until
    /// the next call. Drive this from the training loop (e.g. cosine decay);
    /// it composes with the built-in warmup ramp. Not part of optimizer
    /// state — a resumed run must re-derive it from the step count.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    /// Apply one update from the gradients currently stored on the
    /// parameters, then clear those gradients. Frozen parameters (no
    /// requires_grad or no gradient) are skipped entirely — their moments
    /// do not advance.
    pub fn step(&mut self) -> Result<StepReport> {
        self.t += 1;
        // Global norm over all live gradients first, for clipping.
        let mut sq_sum = 0.0;
        let mut live: Vec<(usize, Vec<f64>)> = Vec::new();
        for (i, slot) in self.slots.iter().enumerate() {
            if !slot.tensor.requires_grad() {
                continue;
            }
            let Some(grad) = slot.tensor.grad() else { continue };
            let g64: Vec<f64> = grad.iter().map(|g| g.to_f64()).collect();
            for (k, g) in g64.iter().enumerate() {
                if !g.is_finite() {
                    return Err(Error::contract(format!(
                        "non-finite gradient in parameter '{}' (coordinate {k}) at step {}",
                        slot.name, self.t
                    )));
                }
                sq_sum += g * g;
            }
            live.push((i, g64));
        }
        let norm = sq_sum.sqrt();
        let clip_scale =
            if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
                self.cfg.grad_clip / norm
            } else {
                1.0
            };
        let warm = if self.cfg.warmup_steps == 0 {
            1.0
        } else {
            (self.t as f64 / self.cfg.warmup_steps as f64).min(1.0)
        } * self.lr_scale;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);

        for (idx, g64) in live {
            let slot = &mut self.slots[idx];
            let lr = slot.lr * warm;
            slot.tensor.with_data_mut(|data| {
                for (k, g) in g64.iter().enumerate() {
                    let g = g * clip_scale;
                    slot.m[k] = self.cfg.beta1 * slot.m[k] + (1.0 - self.cfg.beta1) * g;
                    slot.v[k] = self.cfg.beta2 * slot.v[k] + (1.0 - self.cfg.beta2) * g * g;
                    let m_hat = slot.m[k] / bc1;
                    let v_hat = slot.v[k] / bc2;
                    let theta = data[k].to_f64();
                    let step = lr * (m_hat / (v_hat.sqrt() + self.cfg.eps))
                        + lr * self.cfg.weight_decay * theta;
                    data[k] = T::from_f64(theta - step);
                }
            });
            slot.tensor.zero_grad();
        }
        Ok(StepReport { grad_norm: norm, clipped: clip_scale < 1.0, lr_scale: warm })
    }

    /// Serialize moments and step count for exact resume.
    pub fn state_container(&self) -> Container {
        let mut c = Container::new();
        for slot in &self.slots {
            c.insert::<f64>(&format!("{}.m", slot.name), &[slot.m.len()], slot.m.clone());
            c.insert::<f64>(&format!("{}.v", slot.name), &[slot.v.len()], slot.v.clone());
        }
        c.meta = serde_json::json!({ "t": self.t });
        c
    }

    pub fn load_state(&mut self, c: &Container) -> Result<()> {
        for slot in &mut self.slots {
            let (_, m) = c.get_typed::<f64>(&format!("{}.m", slot.name))?;
            let (_, v) = c.get_typed::<f64>(&format!("{}.v", slot.name))?;
            if m.len() != slot.m.len() || v.len() != slot.v.len() {
                return Err(Error::contract(format!(
                    "optimizer state size mismatch for '{}'",
                    slot.name
                )));
            }
            slot.m.copy_from_slice(m);
            slot.v.copy_from_slice(v);
        }
        self.t = c
            .meta
            .get("t")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::contract("optimizer state missing step count".to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> (ParamMap<f64>, Tensor<f64>) {
        let t = Tensor::param(vec![value], &[1, 1]);
        let mut map = ParamMap::new();
        map.insert("x", t.clone());
        (map, t)
    }

    #[test]
    fn converges_on_a_quadratic() {
        let (map, x) = single_param(5.0);
        let cfg = AdamWConfig { weight_decay: 0.0, grad_clip: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&map, cfg, |_| 0.1);
        for _ in 0..600 {
            let loss = x.affine(1.0, -3.0).mul(&x.affine(1.0, -3.0)).sum_all();
            loss.backward();
            opt.step().unwrap();
        }
        assert!((x.item().to_f64() - 3.0).abs() < 1e-3, "x = {}", x.item());
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_moments() {
        // With zero gradient the update must be exactly θ ← θ(1 − lr·wd).
        let (map, x) = single_param(2.0);
        let cfg = AdamWConfig { weight_decay: 0.01, grad_clip: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&map, cfg, |_| 0.5);
        for _ in 0..3 {
            let loss = x.affine(0.0, 0.0).sum_all(); // gradient exactly zero
            loss.backward();
            opt.step().unwrap();
        }
        let want = 2.0 * (1.0 - 0.5 * 0.01f64).powi(3);
        assert!((x.item() - want).abs() < 1e-12, "x = {} want {want}", x.item());
    }

    #[test]
    fn warmup_scales_the_first_steps() {
        let (map, x) = single_param(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            grad_clip: 0.0,
            warmup_steps: 10,
            ..Default::default()
        };
        let mut opt = AdamW::new(&map, cfg, |_| 0.1);
        let loss = x.sum_all();
        loss.backward();
        let before = x.item();
        let report = opt.step().unwrap();
        assert!((report.lr_scale - 0.1).abs() < 1e-12);
        // First step moves by lr·(t/warmup)·m̂/(√v̂+ε) ≈ 0.01 for unit grad.
        let moved = (before - x.item()).abs();
        assert!((moved - 0.01).abs() < 1e-4, "moved {moved}");
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let t = Tensor::param(vec![0.0, 0.0], &[1, 2]);
        let mut map = ParamMap::new();
        map.insert("x", t.clone());
        let cfg = AdamWConfig { weight_decay: 0.0, grad_clip: 1.0, ..Default::default() };
        let mut opt = AdamW::new(&map, cfg, |_| 0.1);
        let loss = t.affine(100.0, 0.0).sum_all();
        loss.backward();
        let report = opt.step().unwrap();
        assert!(report.clipped);
        assert!((report.grad_norm - (2.0f64 * 100.0 * 100.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn nonfinite_gradients_abort_with_the_parameter_name() {
        let (map, x) = single_param(1000.0);
        let mut opt = AdamW::new(&map, AdamWConfig::default(), |_| 0.1);
        let loss = x.exp().sum_all(); // exp(1000) overflows → ∞ gradient
        loss.backward();
        let err = opt.step().unwrap_err();
        assert!(err.message.contains("non-finite gradient"), "{}", err.message);
        assert!(err.message.contains("'x'"), "{}", err.message);
    }

    #[test]
    fn frozen_parameters_do_not_move_and_keep_zero_moments() {
        let a = Tensor::param(vec![1.0], &[1, 1]);
        let b = Tensor::param(vec![1.0], &[1, 1]);
        b.set_requires_grad(false);
        let mut map = ParamMap::new();
        map.insert("a", a.clone());
        map.insert("b", b.clone());
        let mut opt = AdamW::new(&map, AdamWConfig::default(), |_| 0.1);
        for _ in 0..5 {
            let loss = a.mul(&a).sum_all().add(&b.mul(&b).sum_all());
            loss.backward();
            opt.step().unwrap();
        }
        assert_eq!(b.item(), 1.0, "frozen parameter moved");
        assert_ne!(a.item(), 1.0);
    }

    #[test]
    fn state_round_trip_resumes_the_exact_trajectory() {
        let run = |resume_at: Option<usize>| -> f64 {
            let (map, x) = single_param(4.0);
            let mut opt = AdamW::new(&map, AdamWConfig::default(), |_| 0.05);
            let mut saved: Option<(Container, f64)> = None;
            for step in 0..40 {
                if let Some(at) = resume_at {
                    if step == at {
                        saved = Some((opt.state_container(), x.item()));
                    }
                }
                let loss = x.mul(&x).sum_all();
                loss.backward();
                opt.step().unwrap();
            }
            if let Some((state, theta)) = saved {
                // Fresh optimizer + restored state must reproduce the tail.
                let (map2, y) = single_param(theta);
                let mut opt2 = AdamW::new(&map2, AdamWConfig::default(), |_| 0.05);
                opt2.load_state(&state).unwrap();
                for _ in resume_at.unwrap()..40 {
                    let loss = y.mul(&y).sum_all();
                    loss.backward();
                    opt2.step().unwrap();
                }
                return (x.item() - y.item()).abs();
            }
            x.item()
        };
        assert_eq!(run(Some(17)), 0.0, "resume diverged from the straight run");
    }
}
