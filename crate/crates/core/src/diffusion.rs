//! Conditional latent diffusion head.
//!
//! A DDPM over the VAE latent space: scaled-linear β schedule (interpolated
//! in √β), ε-prediction MLP denoiser with adaptive layer-norm modulation
//! whose gates start at zero, a learned-query attention pool that condenses
//! the backbone's H placeholder states into one condition vector, and
//! classifier-free guidance with a learnable null condition. The α̅ table is
//! kept at f64 no matter the model dtype.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::DiffusionConfig;
use crate::error::{Error, Result};
use crate::nn::{init_normal, LayerNorm, Linear, MultiHeadAttention, ParamMap, INIT_STD};
use crate::rng::normal_vec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ── Noise schedule ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    betas: Vec<f64>,      // β_1..β_T at index t−1
    alpha_bar: Vec<f64>,  // ᾱ_0..ᾱ_T, ᾱ_0 = 1
}

impl NoiseSchedule {
    /// β_t = (√β₁ + (t−1)/(T−1)·(√β_T − √β₁))² for t = 1..=T.
    pub fn new(cfg: &DiffusionConfig) -> Result<Self> {
        let t_max = cfg.timesteps;
        let (s0, s1) = (cfg.beta_start.sqrt(), cfg.beta_end.sqrt());
        let betas: Vec<f64> = (1..=t_max)
            .map(|t| {
                let f = (t - 1) as f64 / (t_max - 1).max(1) as f64;
                let s = s0 + f * (s1 - s0);
                s * s
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let terminal = alpha_bar[t_max];
        if terminal >= 0.01 {
            return Err(Error::config(format!(
                "noise schedule too weak: ᾱ_T = {terminal:.5} ≥ 0.01 — raise β or T"
            )));
        }
        Ok(Self { timesteps: t_max, betas, alpha_bar })
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t for t in 0..=T (ᾱ_0 = 1 by convention).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Forward process: x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε.
    pub fn q_sample<T: Scalar>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Tensor<T> {
        let ab = self.alpha_bar(t);
        x0.affine(T::from_f64(ab.sqrt()), T::ZERO)
            .add(&eps.affine(T::from_f64((1.0 - ab).sqrt()), T::ZERO))
    }

    /// Evenly strided descending timesteps T … 1 (inclusive of both ends).
    pub fn sample_timesteps(&self, steps: usize) -> Vec<usize> {
        let t_max = self.timesteps;
        let steps = steps.clamp(1, t_max);
        if steps == 1 {
            return vec![t_max];
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|k| {
                let f = k as f64 / (steps - 1) as f64;
                (t_max as f64 + f * (1.0 - t_max as f64)).round() as usize
            })
            .collect();
        ts.dedup();
        ts
    }
}

/// Sinusoidal timestep features in [−1, 1], length `dim`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut v = vec![T::ZERO; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half.max(1) as f64);
        let arg = t as f64 * freq;
        v[2 * i] = T::from_f64(arg.sin());
        v[2 * i + 1] = T::from_f64(arg.cos());
    }
    Tensor::from_vec(v, &[1, dim])
}

// ── Condition pooling ────────────────────────────────────────────────────

/// Learned-query attention pool: one query attends over the H placeholder
/// states, producing a single condition vector. Order-invariant because the
/// states carry no positions here.
pub struct CondPool<T: Scalar> {
    query: Tensor<T>,
    attn: MultiHeadAttention<T>,
}

impl<T: Scalar> CondPool<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { query: init_normal(1, dim, INIT_STD, rng), attn: MultiHeadAttention::new(dim, heads, rng) }
    }

    pub fn forward(&self, states: &Tensor<T>) -> Tensor<T> {
        self.attn.forward(&self.query, states, false)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        out.insert(format!("{prefix}.query"), self.query.clone());
        self.attn.collect(&format!("{prefix}.attn"), out);
    }
}

// ── Denoiser ─────────────────────────────────────────────────────────────

/// Residual MLP block with adaptive layer norm: the condition produces
/// (scale, shift, gate); the modulation linear is zero-initialized so each
/// block starts as the identity.
struct AdaBlock<T: Scalar> {
    ln: LayerNorm<T>,
    modulation: Linear<T>, // cond → 3·width
    up: Linear<T>,
    down: Linear<T>,
    width: usize,
}

impl<T: Scalar> AdaBlock<T> {
    fn new(width: usize, cond_width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln: LayerNorm::new(width),
            modulation: Linear::new_zeros(cond_width, 3 * width, true),
            up: Linear::new(width, 2 * width, true, rng),
            down: Linear::new(2 * width, width, true, rng),
            width,
        }
    }

    fn forward(&self, x: &Tensor<T>, cond: &Tensor<T>) -> Tensor<T> {
        let m = self.modulation.forward(cond); // [1, 3w]
        let scale = m.slice_cols(0, self.width);
        let shift = m.slice_cols(self.width, 2 * self.width);
        let gate = m.slice_cols(2 * self.width, 3 * self.width);
        let h = self.ln.forward(x);
        let h = h.mul(&scale.affine(T::ONE, T::ONE).repeat_row(x.rows()))
            .add(&shift.repeat_row(x.rows()));
        let h = self.down.forward(&self.up.forward(&h).gelu());
        x.add(&h.mul(&gate.repeat_row(x.rows())))
    }

    fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        self.ln.collect(&format!("{prefix}.ln"), out);
        self.modulation.collect(&format!("{prefix}.modulation"), out);
        self.up.collect(&format!("{prefix}.up"), out);
        self.down.collect(&format!("{prefix}.down"), out);
    }
}

pub struct Denoiser<T: Scalar> {
    in_proj: Linear<T>,
    t_mlp1: Linear<T>,
    t_mlp2: Linear<T>,
    blocks: Vec<AdaBlock<T>>,
    out_ln: LayerNorm<T>,
    out_proj: Linear<T>, // zero-init: ε̂ ≡ 0 at initialization
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(latent_dim: usize, cfg: &DiffusionConfig, rng: &mut ChaCha8Rng) -> Self {
        let cond_width = cfg.cond_dim + cfg.time_dim;
        Self {
            in_proj: Linear::new(latent_dim, cfg.width, true, rng),
            t_mlp1: Linear::new(cfg.time_dim, cfg.time_dim, true, rng),
            t_mlp2: Linear::new(cfg.time_dim, cfg.time_dim, true, rng),
            blocks: (0..cfg.blocks).map(|_| AdaBlock::new(cfg.width, cond_width, rng)).collect(),
            out_ln: LayerNorm::new(cfg.width),
            out_proj: Linear::new_zeros(cfg.width, latent_dim, true),
        }
    }

    /// Predict ε for x_t given timestep t and a [1, cond_dim] condition.
    pub fn forward(&self, x_t: &Tensor<T>, t: usize, cond: &Tensor<T>) -> Tensor<T> {
        let t_raw = timestep_embedding::<T>(t, self.t_mlp1.weight.rows());
        let t_feat = self.t_mlp2.forward(&self.t_mlp1.forward(&t_raw).gelu());
        let full_cond = cond.concat_cols(&t_feat);
        let mut h = self.in_proj.forward(x_t);
        for b in &self.blocks {
            h = b.forward(&h, &full_cond);
        }
        self.out_proj.forward(&self.out_ln.forward(&h))
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        self.in_proj.collect(&format!("{prefix}.in_proj"), out);
        self.t_mlp1.collect(&format!("{prefix}.t_mlp1"), out);
        self.t_mlp2.collect(&format!("{prefix}.t_mlp2"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.block{i}"), out);
        }
        self.out_ln.collect(&format!("{prefix}.out_ln"), out);
        self.out_proj.collect(&format!("{prefix}.out_proj"), out);
    }
}

// ── Head: pool + denoiser + schedule ─────────────────────────────────────

pub struct DiffusionHead<T: Scalar> {
    pub cfg: DiffusionConfig,
    pub latent_dim: usize,
    pub schedule: NoiseSchedule,
    pub pool: CondPool<T>,
    pub denoiser: Denoiser<T>,
    /// Learnable stand-in condition for the unconditional branch (zero-init).
    pub null_cond: Tensor<T>,
}

impl<T: Scalar> DiffusionHead<T> {
    pub fn new(latent_dim: usize, cfg: &DiffusionConfig, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            schedule: NoiseSchedule::new(cfg)?,
            pool: CondPool::new(cfg.cond_dim, heads, rng),
            denoiser: Denoiser::new(latent_dim, cfg, rng),
            null_cond: {
                let t = Tensor::zeros(&[1, cfg.cond_dim]);
                t.set_requires_grad(true);
                t
            },
            latent_dim,
            cfg: cfg.clone(),
        })
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        self.pool.collect(&format!("{prefix}.pool"), out);
        self.denoiser.collect(&format!("{prefix}.denoiser"), out);
        out.insert(format!("{prefix}.null_cond"), self.null_cond.clone());
    }

    /// ε-prediction loss for one latent: ‖ε̂ − ε‖² summed over latent dims.
    /// `states` are the H backbone placeholder states; the condition is
    /// dropped (replaced by the null embedding) with probability p_uncond.
    pub fn loss(&self, z0: &Tensor<T>, states: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let t = rng.gen_range(1..=self.schedule.timesteps);
        let eps = Tensor::from_vec(normal_vec(rng, self.latent_dim), &[1, self.latent_dim]);
        let drop: f64 = rng.gen_range(0.0..1.0);
        let cond = if drop < self.cfg.p_uncond {
            self.null_cond.clone()
        } else {
            self.pool.forward(states)
        };
        let x_t = self.schedule.q_sample(z0, t, &eps);
        let pred = self.denoiser.forward(&x_t, t, &cond);
        let d = pred.sub(&eps);
        d.mul(&d).sum_all()
    }

    /// Ancestral sampling with classifier-free guidance.
    /// ω = 1 never evaluates the unconditional branch (bit-for-bit equal to
    /// conditional-only); ω = 0 never evaluates the conditional branch.
    /// `states = None` forces unconditional sampling regardless of ω.
    pub fn sample(
        &self,
        states: Option<&Tensor<T>>,
        guidance: f64,
        rng: &mut ChaCha8Rng,
    ) -> Tensor<T> {
        crate::tensor::no_grad(|| {
            let cond = states.map(|s| self.pool.forward(s));
            let mut x = Tensor::from_vec(
                normal_vec::<T, _>(rng, self.latent_dim),
                &[1, self.latent_dim],
            );
            let ts = self.schedule.sample_timesteps(self.cfg.sample_steps);
            for (k, &t) in ts.iter().enumerate() {
                let t_prev = if k + 1 < ts.len() { ts[k + 1] } else { 0 };
                let eps_hat = self.guided_eps(&x, t, cond.as_ref(), guidance);
                let ab_t = self.schedule.alpha_bar(t);
                let ab_p = self.schedule.alpha_bar(t_prev);
                // x̂₀ from the ε-prediction, then the strided posterior.
                let x0 = x
                    .sub(&eps_hat.affine(T::from_f64((1.0 - ab_t).sqrt()), T::ZERO))
                    .affine(T::from_f64(1.0 / ab_t.sqrt()), T::ZERO);
                let var = ((1.0 - ab_p) / (1.0 - ab_t)) * (1.0 - ab_t / ab_p);
                let dir_coef = (1.0 - ab_p - var).max(0.0).sqrt();
                let mut next =
                    x0.affine(T::from_f64(ab_p.sqrt()), T::ZERO)
                        .add(&eps_hat.affine(T::from_f64(dir_coef), T::ZERO));
                if t_prev > 0 && var > 0.0 {
                    let noise = Tensor::from_vec(
                        normal_vec::<T, _>(rng, self.latent_dim),
                        &[1, self.latent_dim],
                    );
                    next = next.add(&noise.affine(T::from_f64(var.sqrt()), T::ZERO));
                }
                x = next;
            }
            x
        })
    }

    fn guided_eps(
        &self,
        x: &Tensor<T>,
        t: usize,
        cond: Option<&Tensor<T>>,
        guidance: f64,
    ) -> Tensor<T> {
        match cond {
            None => self.denoiser.forward(x, t, &self.null_cond),
            Some(c) => {
                if guidance == 1.0 {
                    return self.denoiser.forward(x, t, c);
                }
                let e_u = self.denoiser.forward(x, t, &self.null_cond);
                if guidance == 0.0 {
                    return e_u;
                }
                let e_c = self.denoiser.forward(x, t, c);
                // ε_u + ω(ε_c − ε_u)
                e_u.add(&e_c.sub(&e_u).affine(T::from_f64(guidance), T::ZERO))
            }
        }
    }
}
