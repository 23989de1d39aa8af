//! Continuous motion VAE.
//!
//! The encoder prepends two learnable distribution tokens to the projected
//! motion frames, runs a non-causal transformer with additive long skips
//! (layer i's input is re-added before layer N−1−i), and reads μ and log σ²
//! off the two token positions. The decoder is non-autoregressive: L
//! positional queries self-attend and cross-attend to a handful of memory
//! slots produced from z by a small MLP, then map linearly back to the 15
//! motion channels. Both sides add a fixed sinusoidal table (geometric
//! frequency ladder down from Nyquist) to their learned position embeddings
//! so frame-rate oscillations are representable from step one.
//! All motion enters and leaves in corpus-standardized units; callers
//! destandardize with [`CorpusStats`].

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::VaeConfig;
use crate::corpus::{self, CorpusRecord, CorpusStats, DIMS};
use crate::error::{Error, Result};
use crate::io::{Container, Element};
use crate::nn::{init_normal, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamMap, TransformerBlock, INIT_STD};
use crate::rng::{normal_vec, rng_for, step_rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{AdamW, AdamWConfig};

// ── Decoder block: self-attention + cross-attention + FFN ────────────────

struct DecoderBlock<T: Scalar> {
    ln1: LayerNorm<T>,
    self_attn: MultiHeadAttention<T>,
    ln2: LayerNorm<T>,
    cross_attn: MultiHeadAttention<T>,
    ln3: LayerNorm<T>,
    ffn: FeedForward<T>,
}

impl<T: Scalar> DecoderBlock<T> {
    fn new(dim: usize, heads: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            self_attn: MultiHeadAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            cross_attn: MultiHeadAttention::new(dim, heads, rng),
            ln3: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, ffn_dim, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>, memory: &Tensor<T>) -> Tensor<T> {
        let n = self.ln1.forward(x);
        let x = x.add(&self.self_attn.forward(&n, &n, false));
        let x = x.add(&self.cross_attn.forward(&self.ln2.forward(&x), memory, false));
        let y = self.ffn.forward(&self.ln3.forward(&x));
        x.add(&y)
    }

    fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.cross_attn.collect(&format!("{prefix}.cross_attn"), out);
        self.ln3.collect(&format!("{prefix}.ln3"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }
}

// ── Model ────────────────────────────────────────────────────────────────

/// Fixed sinusoidal position table: sin/cos pairs over a geometric frequency
/// ladder from Nyquist (π rad/frame) down by four decades, so even the
/// fastest corpus oscillations have a ready-made basis. Scaled to sit a
/// little above the learned-embedding init so neither signal drowns the
/// other at the first LayerNorm.
fn sinusoidal_table<T: Scalar>(rows: usize, dim: usize) -> Tensor<T> {
    let pairs = dim / 2;
    let scale = 0.05;
    let mut data = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        for p in 0..pairs {
            let omega = std::f64::consts::PI
                * (1e-4f64).powf(p as f64 / (pairs.max(2) - 1) as f64);
            data.push(T::from_f64(scale * (omega * r as f64).sin()));
            data.push(T::from_f64(scale * (omega * r as f64).cos()));
        }
        data.resize((r + 1) * dim, T::ZERO);
    }
    Tensor::from_vec(data, &[rows, dim])
}

pub struct MotionVae<T: Scalar> {
    pub cfg: VaeConfig,
    in_proj: Linear<T>,
    dist_tokens: Tensor<T>, // [2, d] learnable μ/σ read-out tokens
    enc_pos: Tensor<T>,     // [2 + max_frames, d]
    enc_sin: Tensor<T>,     // fixed: 2 zero rows then the sinusoid table
    enc_layers: Vec<TransformerBlock<T>>,
    mu_head: Linear<T>,
    logvar_head: Linear<T>,
    z_proj1: Linear<T>,
    z_proj2: Linear<T>,
    dec_queries: Tensor<T>, // [max_frames, d]
    dec_sin: Tensor<T>,     // fixed [max_frames, d]
    dec_layers: Vec<DecoderBlock<T>>,
    dec_ln: LayerNorm<T>,
    out_proj: Linear<T>,
}

impl<T: Scalar> MotionVae<T> {
    pub fn new(cfg: &VaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        let sin = sinusoidal_table::<T>(cfg.max_frames, d);
        let enc_sin = Tensor::concat_rows(&[&Tensor::zeros(&[2, d]), &sin]);
        Self {
            cfg: cfg.clone(),
            in_proj: Linear::new(DIMS, d, true, rng),
            dist_tokens: init_normal(2, d, INIT_STD, rng),
            enc_pos: init_normal(2 + cfg.max_frames, d, INIT_STD, rng),
            enc_sin,
            enc_layers: (0..cfg.layers)
                .map(|_| TransformerBlock::new(d, cfg.heads, cfg.ffn_dim, rng))
                .collect(),
            mu_head: Linear::new(d, cfg.latent_dim, true, rng),
            logvar_head: Linear::new(d, cfg.latent_dim, true, rng),
            z_proj1: Linear::new(cfg.latent_dim, cfg.ffn_dim, true, rng),
            z_proj2: Linear::new(cfg.ffn_dim, cfg.memory_tokens.max(1) * d, true, rng),
            dec_queries: init_normal(cfg.max_frames, d, INIT_STD, rng),
            dec_sin: sin,
            dec_layers: (0..cfg.layers)
                .map(|_| DecoderBlock::new(d, cfg.heads, cfg.ffn_dim, rng))
                .collect(),
            dec_ln: LayerNorm::new(d),
            out_proj: Linear::new(d, DIMS, true, rng),
        }
    }

    pub fn params(&self) -> ParamMap<T> {
        let mut map = ParamMap::new();
        self.in_proj.collect("vae.in_proj", &mut map);
        map.insert("vae.dist_tokens", self.dist_tokens.clone());
        map.insert("vae.enc_pos", self.enc_pos.clone());
        for (i, layer) in self.enc_layers.iter().enumerate() {
            layer.collect(&format!("vae.enc.{i}"), &mut map);
        }
        self.mu_head.collect("vae.mu_head", &mut map);
        self.logvar_head.collect("vae.logvar_head", &mut map);
        self.z_proj1.collect("vae.z_proj1", &mut map);
        self.z_proj2.collect("vae.z_proj2", &mut map);
        map.insert("vae.dec_queries", self.dec_queries.clone());
        for (i, layer) in self.dec_layers.iter().enumerate() {
            layer.collect(&format!("vae.dec.{i}"), &mut map);
        }
        self.dec_ln.collect("vae.dec_ln", &mut map);
        self.out_proj.collect("vae.out_proj", &mut map);
        map
    }

    fn check_frames(&self, frames: usize) -> Result<()> {
        if !(self.cfg.min_frames..=self.cfg.max_frames).contains(&frames) {
            return Err(Error::contract(format!(
                "clip length {frames} outside encoder bounds [{}, {}]",
                self.cfg.min_frames, self.cfg.max_frames
            )));
        }
        Ok(())
    }

    /// Encode a standardized [L, 15] clip into (μ, log σ²), each [1, latent].
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let frames = x.rows();
        self.check_frames(frames)?;
        assert_eq!(x.cols(), DIMS, "motion input must have {DIMS} channels");
        let proj = self.in_proj.forward(x);
        let tokens = Tensor::concat_rows(&[&self.dist_tokens, &proj]);
        let rows: Vec<usize> = (0..frames + 2).collect();
        let pos = self.enc_pos.index_select_rows(&rows);
        let mut h = tokens.add(&pos).add(&self.enc_sin.index_select_rows(&rows));
        let n = self.enc_layers.len();
        let mut saved: Vec<Tensor<T>> = Vec::with_capacity(n);
        for (j, layer) in self.enc_layers.iter().enumerate() {
            if j > n - 1 - j {
                h = h.add(&saved[n - 1 - j]);
            }
            saved.push(h.clone());
            h = layer.forward(&h, false);
        }
        let mu = self.mu_head.forward(&h.index_select_rows(&[0]));
        let clamp = T::from_f64(self.cfg.logvar_clamp);
        let logvar =
            self.logvar_head.forward(&h.index_select_rows(&[1])).clamp(clamp.neg(), clamp);
        Ok((mu, logvar))
    }

    /// z = μ + σ·ε with ε drawn from `rng`.
    pub fn reparameterize(&self, mu: &Tensor<T>, logvar: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let eps = Tensor::from_vec(normal_vec(rng, mu.numel()), mu.shape());
        self.reparameterize_with(mu, logvar, &eps)
    }

    /// Deterministic variant for gradcheck: caller supplies ε.
    pub fn reparameterize_with(
        &self,
        mu: &Tensor<T>,
        logvar: &Tensor<T>,
        eps: &Tensor<T>,
    ) -> Tensor<T> {
        let std = logvar.affine(T::from_f64(0.5), T::ZERO).exp();
        mu.add(&std.mul(eps))
    }

    /// Decode a [1, latent] z into a standardized [frames, 15] clip.
    pub fn decode(&self, z: &Tensor<T>, frames: usize) -> Result<Tensor<T>> {
        self.check_frames(frames)?;
        assert_eq!(z.cols(), self.cfg.latent_dim, "latent width mismatch");
        let k = self.cfg.memory_tokens.max(1);
        let memory = self
            .z_proj2
            .forward(&self.z_proj1.forward(z).gelu())
            .reshape(&[k, self.cfg.model_dim]);
        let rows: Vec<usize> = (0..frames).collect();
        let mut h = self
            .dec_queries
            .index_select_rows(&rows)
            .add(&self.dec_sin.index_select_rows(&rows));
        for layer in &self.dec_layers {
            h = layer.forward(&h, &memory);
        }
        Ok(self.out_proj.forward(&self.dec_ln.forward(&h)))
    }
}

// ── Losses ───────────────────────────────────────────────────────────────

/// KL(q‖N(0, I)) = ½ Σ_d (μ² + e^(log σ²) − 1 − log σ²), summed over latent
/// dimensions; inputs are [1, latent].
pub fn kl_divergence<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>) -> Tensor<T> {
    mu.mul(mu)
        .add(&logvar.exp())
        .sub(logvar)
        .affine(T::ONE, T::from_f64(-1.0))
        .sum_all()
        .affine(T::from_f64(0.5), T::ZERO)
}

/// Mean squared error over all elements of two same-shaped tensors.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let d = a.sub(b);
    d.mul(&d).mean_all()
}

/// KL weight at a training step: linear ramp 0 → kl_weight over the first
/// `kl_warmup_frac` of training, then flat.
pub fn kl_weight_at(cfg: &VaeConfig, step: usize) -> f64 {
    let warmup = (cfg.kl_warmup_frac * cfg.steps as f64).max(1.0);
    cfg.kl_weight * (((step + 1) as f64) / warmup).min(1.0)
}

// ── Persistence ──────────────────────────────────────────────────────────

impl<T: Element> MotionVae<T> {
    pub fn save(&self, path: &Path, stats: &CorpusStats) -> Result<()> {
        let mut c = self.params().to_container();
        c.meta = serde_json::json!({
            "kind": "vae",
            "dtype": T::DTYPE.name(),
            "config": self.cfg,
            "stats": stats,
        });
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, CorpusStats)> {
        let c = Container::load(path)?;
        let kind = c.meta.get("kind").and_then(|v| v.as_str());
        if kind != Some("vae") {
            return Err(Error::contract(format!(
                "{} is not a vae checkpoint (kind = {kind:?})",
                path.display()
            )));
        }
        let cfg: VaeConfig = serde_json::from_value(
            c.meta.get("config").cloned().ok_or_else(|| {
                Error::contract("vae checkpoint missing config metadata".to_string())
            })?,
        )?;
        let stats: CorpusStats = serde_json::from_value(
            c.meta.get("stats").cloned().ok_or_else(|| {
                Error::contract("vae checkpoint missing stats metadata".to_string())
            })?,
        )?;
        let mut rng = rng_for(0, "vae-load");
        let vae = Self::new(&cfg, &mut rng);
        vae.params().load_container(&c)?;
        Ok((vae, stats))
    }
}

// ── Data plumbing ────────────────────────────────────────────────────────

/// Standardized motion tensor for a record.
pub fn motion_tensor<T: Scalar>(record: &CorpusRecord, stats: &CorpusStats) -> Tensor<T> {
    let mut flat = record.flat_motion();
    stats.standardize(&mut flat);
    let data: Vec<T> = flat.into_iter().map(T::from_f64).collect();
    Tensor::from_vec(data, &[record.frames(), DIMS])
}

/// Decode a latent and map back to raw motion units.
pub fn decode_to_motion<T: Scalar>(
    vae: &MotionVae<T>,
    stats: &CorpusStats,
    z: &Tensor<T>,
    frames: usize,
) -> Result<Vec<Vec<f64>>> {
    let out = crate::tensor::no_grad(|| vae.decode(z, frames))?;
    let mut flat: Vec<f64> = out.to_vec().iter().map(|v| v.to_f64()).collect();
    stats.destandardize(&mut flat);
    Ok(flat.chunks(DIMS).map(|c| c.to_vec()).collect())
}

/// Per-record latents the trainer consumes: the full-clip posterior and the
/// mean latent of the 50% prefix (for the prediction task).
pub struct CachedLatent<T: Scalar> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
    pub prefix_mu: Vec<T>,
}

pub fn build_latent_cache<T: Scalar>(
    vae: &MotionVae<T>,
    stats: &CorpusStats,
    records: &[CorpusRecord],
) -> Result<HashMap<String, CachedLatent<T>>> {
    crate::tensor::no_grad(|| {
        let mut cache = HashMap::with_capacity(records.len());
        for r in records {
            let x = motion_tensor::<T>(r, stats);
            let (mu, logvar) = vae.encode(&x)?;
            let prefix_frames = (r.frames() / 2).max(vae.cfg.min_frames);
            let prefix =
                x.index_select_rows(&(0..prefix_frames).collect::<Vec<_>>());
            let (pmu, _) = vae.encode(&prefix)?;
            cache.insert(
                r.id.clone(),
                CachedLatent { mu: mu.to_vec(), logvar: logvar.to_vec(), prefix_mu: pmu.to_vec() },
            );
        }
        Ok(cache)
    })
}

// ── Training ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct VaeTrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub val_mse: f64,
}

/// Train on the corpus train split; returns the report and writes the
/// checkpoint (with stats embedded) to `out_path`.
pub fn train_vae<T: Element>(
    corpus_dir: &Path,
    out_path: &Path,
    cfg: &VaeConfig,
    seed: u64,
    verbose: bool,
) -> Result<VaeTrainReport> {
    let train = corpus::load_split(corpus_dir, "train")?;
    let val = corpus::load_split(corpus_dir, "val")?;
    if train.is_empty() {
        return Err(Error::config("train split is empty".to_string()));
    }
    let stats = CorpusStats::load(&corpus_dir.join("stats.json"))?;
    let mut rng = rng_for(seed, "vae-init");
    let vae = MotionVae::<T>::new(cfg, &mut rng);
    let params = vae.params();
    let adamw = AdamWConfig {
        weight_decay: 0.01,
        grad_clip: 1.0,
        warmup_steps: (cfg.steps as u64 / 20).max(1),
        ..Default::default()
    };
    let mut opt = AdamW::new(&params, adamw, |_| cfg.lr);

    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        // Cosine decay to 10% of the base rate over the run.
        let frac = step as f64 / cfg.steps.max(1) as f64;
        opt.set_lr_scale(0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()));
        let mut batch_rng = step_rng(seed, 100, step as u64, "vae-batch");
        let kl_w = T::from_f64(kl_weight_at(cfg, step) / cfg.batch as f64);
        let inv_batch = T::from_f64(1.0 / cfg.batch as f64);
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch {
            let r = &train[rand::Rng::gen_range(&mut batch_rng, 0..train.len())];
            let x = motion_tensor::<T>(r, &stats);
            let (mu, logvar) = vae.encode(&x)?;
            let z = vae.reparameterize(&mu, &logvar, &mut batch_rng);
            let recon = vae.decode(&z, r.frames())?;
            let loss = mse(&recon, &x)
                .affine(inv_batch, T::ZERO)
                .add(&kl_divergence(&mu, &logvar).affine(kl_w, T::ZERO));
            loss_sum += loss.item().to_f64();
            loss.backward();
        }
        opt.step()?;
        last_loss = loss_sum;
        if verbose && (step + 1) % 100 == 0 {
            eprintln!("[vae] step {}/{} loss {loss_sum:.5}", step + 1, cfg.steps);
        }
    }

    let val_mse = reconstruction_mse(&vae, &stats, &val)?;
    vae.save(out_path, &stats)?;
    if verbose {
        eprintln!("[vae] done: val mse {val_mse:.5}");
    }
    Ok(VaeTrainReport { steps: cfg.steps, final_loss: last_loss, val_mse })
}

/// Mean reconstruction MSE (standardized units, μ-latent, no sampling).
pub fn reconstruction_mse<T: Scalar>(
    vae: &MotionVae<T>,
    stats: &CorpusStats,
    records: &[CorpusRecord],
) -> Result<f64> {
    crate::tensor::no_grad(|| {
        let mut total = 0.0;
        for r in records {
            let x = motion_tensor::<T>(r, stats);
            let (mu, _) = vae.encode(&x)?;
            let recon = vae.decode(&mu, r.frames())?;
            total += mse(&recon, &x).item().to_f64();
        }
        Ok(total / records.len().max(1) as f64)
    })
}

/// Per-class reconstruction MSE rows for the report command.
pub fn per_class_mse<T: Scalar>(
    vae: &MotionVae<T>,
    stats: &CorpusStats,
    records: &[CorpusRecord],
) -> Result<Vec<(String, f64, usize)>> {
    let mut rows = Vec::new();
    for class in corpus::CLASS_NAMES {
        let subset: Vec<CorpusRecord> =
            records.iter().filter(|r| r.class == class).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let m = reconstruction_mse(vae, stats, &subset)?;
        rows.push((class.to_string(), m, subset.len()));
    }
    Ok(rows)
}
