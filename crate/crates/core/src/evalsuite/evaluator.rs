//! Contrastive text–motion evaluator: two small mean-pooled transformer
//! towers trained with a symmetric InfoNCE objective so captions and clips
//! of the same record land close in a joint embedding space.
//!
//! The evaluator is trained once on the corpus, gated on a validation
//! margin, and frozen; all retrieval and distributional metrics read
//! embeddings from it. A checkpoint below the margin gate is never written —
//! metrics refuse to run without a fit evaluator.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::EvalConfig;
use crate::corpus::tokenizer::Vocab;
use crate::corpus::{self, CorpusRecord, CorpusStats, DIMS, MAX_FRAMES};
use crate::error::{Error, Result};
use crate::io::{Container, Element};
use crate::nn::{init_normal, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamMap};
use crate::rng::{rng_for, step_rng};
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};
use crate::train::{AdamW, AdamWConfig};

/// Longest caption the text tower accepts; longer inputs are truncated.
const MAX_TOKENS: usize = 48;

// ── Towers ───────────────────────────────────────────────────────────────

/// Pre-norm encoder block with bidirectional self-attention.
struct EncBlock<T: Scalar> {
    ln1: LayerNorm<T>,
    attn: MultiHeadAttention<T>,
    ln2: LayerNorm<T>,
    ffn: FeedForward<T>,
}

impl<T: Scalar> EncBlock<T> {
    fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, 2 * dim, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.ln1.forward(x);
        let x = x.add(&self.attn.forward(&h, &h, false));
        x.add(&self.ffn.forward(&self.ln2.forward(&x)))
    }

    fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }
}

/// Joint text–motion embedder. Both towers mean-pool their final states and
/// project to the shared `e`-dimensional space; embeddings leave
/// L2-normalized, so cosine similarity is a plain dot product.
pub struct EvaluatorEmbedder<T: Scalar> {
    pub cfg: EvalConfig,
    vocab: Vocab,
    stats: CorpusStats,
    margin: f64,
    tok_emb: Tensor<T>,
    text_pos: Tensor<T>,
    text_blocks: Vec<EncBlock<T>>,
    text_ln: LayerNorm<T>,
    text_out: Linear<T>,
    frame_proj: Linear<T>,
    motion_pos: Tensor<T>,
    motion_blocks: Vec<EncBlock<T>>,
    motion_ln: LayerNorm<T>,
    motion_out: Linear<T>,
}

impl<T: Scalar> EvaluatorEmbedder<T> {
    pub fn new(cfg: &EvalConfig, vocab: Vocab, stats: CorpusStats, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.evaluator_dim;
        let heads = 2;
        let std = crate::nn::INIT_STD;
        Self {
            tok_emb: init_normal(vocab.len(), d, std, rng),
            text_pos: init_normal(MAX_TOKENS, d, std, rng),
            text_blocks: (0..cfg.evaluator_layers).map(|_| EncBlock::new(d, heads, rng)).collect(),
            text_ln: LayerNorm::new(d),
            text_out: Linear::new(d, cfg.evaluator_embed, true, rng),
            frame_proj: Linear::new(DIMS, d, true, rng),
            motion_pos: init_normal(MAX_FRAMES, d, std, rng),
            motion_blocks: (0..cfg.evaluator_layers)
                .map(|_| EncBlock::new(d, heads, rng))
                .collect(),
            motion_ln: LayerNorm::new(d),
            motion_out: Linear::new(d, cfg.evaluator_embed, true, rng),
            cfg: cfg.clone(),
            vocab,
            stats,
            margin: f64::NAN,
        }
    }

    pub fn params(&self) -> ParamMap<T> {
        let mut map = ParamMap::new();
        map.insert("eval.text.emb".to_string(), self.tok_emb.clone());
        map.insert("eval.text.pos".to_string(), self.text_pos.clone());
        for (i, b) in self.text_blocks.iter().enumerate() {
            b.collect(&format!("eval.text.l{i}"), &mut map);
        }
        self.text_ln.collect("eval.text.ln_f", &mut map);
        self.text_out.collect("eval.text.out", &mut map);
        self.frame_proj.collect("eval.motion.in", &mut map);
        map.insert("eval.motion.pos".to_string(), self.motion_pos.clone());
        for (i, b) in self.motion_blocks.iter().enumerate() {
            b.collect(&format!("eval.motion.l{i}"), &mut map);
        }
        self.motion_ln.collect("eval.motion.ln_f", &mut map);
        self.motion_out.collect("eval.motion.out", &mut map);
        map
    }

    /// Validation margin recorded when the evaluator was trained.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    /// Embed one caption: [1, e], unit norm.
    pub fn embed_text(&self, text: &str) -> Tensor<T> {
        let mut ids = self.vocab.tokenize(text);
        ids.truncate(MAX_TOKENS);
        if ids.is_empty() {
            ids.push(self.vocab.eos());
        }
        let n = ids.len();
        let mut h = self
            .tok_emb
            .embedding(&ids)
            .add(&self.text_pos.index_select_rows(&(0..n).collect::<Vec<_>>()));
        for b in &self.text_blocks {
            h = b.forward(&h);
        }
        let pooled = self.text_ln.forward(&h).mean_axis0();
        self.text_out.forward(&pooled).l2_normalize_rows(T::from_f64(1e-12))
    }

    /// Embed one raw-unit clip (frames × 15): [1, e], unit norm.
    pub fn embed_motion(&self, motion: &[Vec<f64>]) -> Result<Tensor<T>> {
        if motion.is_empty() {
            return Err(Error::contract("cannot embed an empty clip"));
        }
        let frames = motion.len().min(MAX_FRAMES);
        let mut data = Vec::with_capacity(frames * DIMS);
        for row in &motion[..frames] {
            if row.len() != DIMS {
                return Err(Error::contract(format!(
                    "clip frame has {} coordinates, expected {DIMS}",
                    row.len()
                )));
            }
            for (d, v) in row.iter().enumerate() {
                data.push(T::from_f64((v - self.stats.mean[d]) / self.stats.std[d]));
            }
        }
        let x = Tensor::from_vec(data, &[frames, DIMS]);
        let mut h = self
            .frame_proj
            .forward(&x)
            .add(&self.motion_pos.index_select_rows(&(0..frames).collect::<Vec<_>>()));
        for b in &self.motion_blocks {
            h = b.forward(&h);
        }
        let pooled = self.motion_ln.forward(&h).mean_axis0();
        Ok(self.motion_out.forward(&pooled).l2_normalize_rows(T::from_f64(1e-12)))
    }

    /// Embeddings for a batch of captions, stacked [n, e].
    pub fn embed_texts(&self, texts: &[&str]) -> Tensor<T> {
        let rows: Vec<Tensor<T>> = texts.iter().map(|t| self.embed_text(t)).collect();
        let refs: Vec<&Tensor<T>> = rows.iter().collect();
        Tensor::concat_rows(&refs)
    }

    /// Embeddings for a batch of clips, stacked [n, e].
    pub fn embed_motions(&self, motions: &[&[Vec<f64>]]) -> Result<Tensor<T>> {
        let rows: Vec<Tensor<T>> =
            motions.iter().map(|m| self.embed_motion(m)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor<T>> = rows.iter().collect();
        Ok(Tensor::concat_rows(&refs))
    }

    /// Plain-`f64` feature rows for metric code, computed without autodiff.
    pub fn features_for(&self, motions: &[&[Vec<f64>]]) -> Result<Vec<Vec<f64>>> {
        no_grad(|| {
            motions
                .iter()
                .map(|m| Ok(self.embed_motion(m)?.to_vec().iter().map(|v| v.to_f64()).collect()))
                .collect()
        })
    }

    /// Matched-minus-mismatched cosine margin over a pair set.
    pub fn pair_margin(&self, records: &[CorpusRecord]) -> Result<f64> {
        if records.len() < 2 {
            return Err(Error::contract("margin needs at least two pairs"));
        }
        no_grad(|| {
            let texts: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
            let motions: Vec<&[Vec<f64>]> = records.iter().map(|r| r.motion.as_slice()).collect();
            let t = self.embed_texts(&texts);
            let m = self.embed_motions(&motions)?;
            let sims = t.matmul(&m.transpose2());
            let s = sims.to_vec();
            let n = records.len();
            let mut matched = 0.0;
            let mut mismatched = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let v = s[i * n + j].to_f64();
                    if i == j {
                        matched += v;
                    } else {
                        mismatched += v;
                    }
                }
            }
            Ok(matched / n as f64 - mismatched / (n * (n - 1)) as f64)
        })
    }

    // ── Persistence ──────────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()>
    where
        T: Element,
    {
        let mut c = self.params().to_container();
        c.meta = serde_json::json!({
            "kind": "evaluator",
            "dtype": T::DTYPE.name(),
            "config": self.cfg,
            "vocab_words": self.vocab.words(),
            "stats": self.stats,
            "margin": self.margin,
        });
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self>
    where
        T: Element,
    {
        let c = Container::load(path).map_err(|e| {
            Error::config(format!("cannot load evaluator {}: {}", path.display(), e.message))
        })?;
        if c.meta.get("kind").and_then(|v| v.as_str()) != Some("evaluator") {
            return Err(Error::config(format!(
                "{} is not an evaluator checkpoint",
                path.display()
            )));
        }
        let cfg: EvalConfig = serde_json::from_value(
            c.meta.get("config").cloned().ok_or_else(|| Error::contract("missing config"))?,
        )?;
        let words: Vec<String> = serde_json::from_value(
            c.meta.get("vocab_words").cloned().ok_or_else(|| Error::contract("missing vocab"))?,
        )?;
        let stats: CorpusStats = serde_json::from_value(
            c.meta.get("stats").cloned().ok_or_else(|| Error::contract("missing stats"))?,
        )?;
        let margin = c.meta.get("margin").and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
        if !(margin >= cfg.margin_gate) {
            return Err(Error::contract(format!(
                "evaluator at {} is unfit: margin {margin:.4} below gate {:.4}",
                path.display(),
                cfg.margin_gate
            )));
        }
        let mut rng = rng_for(0, "evaluator-load");
        let mut e = Self::new(&cfg, Vocab::from_saved_words(words)?, stats, &mut rng);
        e.margin = margin;
        e.params().load_container(&c)?;
        Ok(e)
    }
}

// ── Training ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvaluatorReport {
    pub steps: usize,
    pub final_loss: f64,
    pub margin: f64,
}

/// Train the evaluator on the corpus train split and write a checkpoint,
/// refusing (without writing) if the validation margin misses the gate.
pub fn train_evaluator<T: Element>(
    corpus_dir: &Path,
    out_path: &Path,
    cfg: &EvalConfig,
    seed: u64,
    verbose: bool,
) -> Result<EvaluatorReport> {
    let train = corpus::load_split(corpus_dir, "train")?;
    let val = corpus::load_split(corpus_dir, "val")?;
    let vocab = Vocab::load(&corpus_dir.join("vocab.json"))?;
    let stats = CorpusStats::load(&corpus_dir.join("stats.json"))?;
    train_evaluator_impl::<T>(&train, &val, vocab, stats, out_path, cfg, seed, false, verbose)
}

/// Shared trainer; `shuffle_pairs` deliberately mismatches captions and
/// clips (the negative control — the margin gate must then reject).
#[allow(clippy::too_many_arguments)]
fn train_evaluator_impl<T: Element>(
    train: &[CorpusRecord],
    val: &[CorpusRecord],
    vocab: Vocab,
    stats: CorpusStats,
    out_path: &Path,
    cfg: &EvalConfig,
    seed: u64,
    shuffle_pairs: bool,
    verbose: bool,
) -> Result<EvaluatorReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("evaluator training needs train and val splits".to_string()));
    }
    let mut rng = rng_for(seed, "evaluator-init");
    let mut ev = EvaluatorEmbedder::<T>::new(cfg, vocab, stats, &mut rng);
    let params = ev.params();
    let adamw = AdamWConfig {
        weight_decay: 0.01,
        grad_clip: 1.0,
        warmup_steps: (cfg.evaluator_steps as u64 / 20).max(1),
        ..Default::default()
    };
    let mut opt = AdamW::new(&params, adamw, |_| cfg.evaluator_lr);
    let inv_temp = T::from_f64(1.0 / cfg.temperature);
    let half = T::from_f64(0.5);

    let mut last_loss = f64::NAN;
    for step in 0..cfg.evaluator_steps {
        let mut batch_rng = step_rng(seed, 200, step as u64, "evaluator-batch");
        let b = cfg.evaluator_batch.min(train.len());
        let idx: Vec<usize> = (0..b).map(|_| batch_rng.gen_range(0..train.len())).collect();
        let texts: Vec<&str> = idx.iter().map(|&i| train[i].caption.as_str()).collect();
        let motions: Vec<&[Vec<f64>]> = if shuffle_pairs {
            // Rotate clips one slot: every caption sees the wrong clip.
            idx.iter()
                .enumerate()
                .map(|(k, _)| train[idx[(k + 1) % b]].motion.as_slice())
                .collect()
        } else {
            idx.iter().map(|&i| train[i].motion.as_slice()).collect()
        };

        let t = ev.embed_texts(&texts);
        let m = ev.embed_motions(&motions)?;
        let sims = t.matmul(&m.transpose2()).affine(inv_temp, T::ZERO);
        let diag: Vec<usize> = (0..b).collect();
        let mask = vec![true; b];
        let loss_tm = sims.cross_entropy_masked(&diag, &mask)?;
        let loss_mt = sims.transpose2().cross_entropy_masked(&diag, &mask)?;
        let loss = loss_tm.add(&loss_mt).affine(half, T::ZERO);
        last_loss = loss.item().to_f64();
        loss.backward();
        opt.step()?;
        if verbose && (step + 1) % 100 == 0 {
            eprintln!("[evaluator] step {}/{} loss {last_loss:.4}", step + 1, cfg.evaluator_steps);
        }
    }

    let margin = ev.pair_margin(val)?;
    if verbose {
        eprintln!("[evaluator] val margin {margin:.4} (gate {:.2})", cfg.margin_gate);
    }
    if !(margin >= cfg.margin_gate) {
        return Err(Error::contract(format!(
            "evaluator unfit: val margin {margin:.4} below the {:.2} gate; checkpoint not written",
            cfg.margin_gate
        )));
    }
    ev.margin = margin;
    ev.save(out_path)?;
    Ok(EvaluatorReport { steps: cfg.evaluator_steps, final_loss: last_loss, margin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus;

    fn small_cfg() -> EvalConfig {
        EvalConfig {
            evaluator_steps: 220,
            evaluator_batch: 16,
            evaluator_dim: 32,
            evaluator_embed: 32,
            evaluator_lr: 2e-3,
            ..Default::default()
        }
    }

    fn corpus_fixture(dir: &Path) -> (Vec<CorpusRecord>, Vec<CorpusRecord>, Vocab, CorpusStats) {
        generate_corpus(dir, 120, 7).unwrap();
        let train = corpus::load_split(dir, "train").unwrap();
        let val = corpus::load_split(dir, "val").unwrap();
        let vocab = Vocab::load(&dir.join("vocab.json")).unwrap();
        let stats = CorpusStats::load(&dir.join("stats.json")).unwrap();
        (train, val, vocab, stats)
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _, vocab, stats) = corpus_fixture(dir.path());
        let ev =
            EvaluatorEmbedder::<f64>::new(&small_cfg(), vocab, stats, &mut rng_for(1, "t"));
        let a = ev.embed_text(&train[0].caption).to_vec();
        let b = ev.embed_text(&train[0].caption).to_vec();
        assert_eq!(a, b, "same text twice must embed identically");
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
        let m = ev.embed_motion(&train[0].motion).unwrap().to_vec();
        let mnorm: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((mnorm - 1.0).abs() < 1e-9);
        assert!(ev.embed_motion(&[]).is_err(), "empty clip is rejected");
    }

    #[test]
    fn contrastive_training_clears_the_margin_gate_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (train, val, vocab, stats) = corpus_fixture(dir.path());
        let out = dir.path().join("evaluator.bin");
        let cfg = small_cfg();
        let report = train_evaluator_impl::<f64>(
            &train, &val, vocab, stats, &out, &cfg, 11, false, false,
        )
        .unwrap();
        assert!(report.margin >= cfg.margin_gate, "margin {}", report.margin);
        assert!(out.exists());

        let loaded = EvaluatorEmbedder::<f64>::load(&out).unwrap();
        assert!((loaded.margin() - report.margin).abs() < 1e-12);
        // Frozen checkpoint reproduces embeddings bit-for-bit.
        let e1 = loaded.embed_text(&train[0].caption).to_vec();
        let e2 = EvaluatorEmbedder::<f64>::load(&out).unwrap()
            .embed_text(&train[0].caption)
            .to_vec();
        assert_eq!(e1, e2);
    }

    #[test]
    fn shuffled_pair_training_is_rejected_as_unfit() {
        let dir = tempfile::tempdir().unwrap();
        let (train, val, vocab, stats) = corpus_fixture(dir.path());
        let out = dir.path().join("evaluator.bin");
        let cfg = EvalConfig { evaluator_steps: 120, ..small_cfg() };
        let err = train_evaluator_impl::<f64>(
            &train, &val, vocab, stats, &out, &cfg, 13, true, false,
        )
        .unwrap_err();
        assert_eq!(err.kind, crate::ErrorKind::Contract);
        assert!(err.message.contains("unfit"), "{}", err.message);
        assert!(!out.exists(), "unfit evaluator must not leave a checkpoint");
    }
}
