//! Dual-branch decoder-only transformer over hybrid text/motion sequences.
//!
//! Every sequence position carries a routing flag: text positions flow
//! through the text branch (token embedding, text layers, tied unembedding
//! over the extended vocabulary), motion positions through the motion branch
//! (latent input head or learned placeholder embedding, motion layers).
//! A layer's attention is either *shared* — both branches project their own
//! q/k/v, the rows are scattered back into original sequence order, and one
//! causal softmax runs over the merged sequence — or *isolated*, attending
//! within each branch only. Positions are original-order indices in both
//! cases, so causality is uniform.
//!
//! The text embedding table is split into a base block and the eight special
//! rows, which lets the trainer freeze the pretrained text branch while the
//! special-token rows keep learning. Unembedding is weight-tied to both
//! blocks.

use std::cell::Cell;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::BackboneConfig;
use crate::corpus::tokenizer::{Vocab, SPECIALS};
use crate::error::{Error, Result};
use crate::io::{Container, Element};
use crate::nn::{init_normal, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamMap, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ── Hybrid sequences ─────────────────────────────────────────────────────

/// One sequence position. `<mholder_out>`, `<som>` and `<eom>` are ordinary
/// text ids, but holder positions are routed to the motion branch, so they
/// get their own variant.
#[derive(Debug, Clone)]
pub enum Payload<T: Scalar> {
    /// ϑ = 0: a text-vocabulary token.
    Text(usize),
    /// ϑ = 1: an input motion clip's latent, shape [1, latent].
    MotionIn(Tensor<T>),
    /// ϑ = 1: an output placeholder (`<mholder_out>`) awaiting a hidden state.
    HolderOut,
}

#[derive(Debug, Clone, Default)]
pub struct HybridSequence<T: Scalar> {
    items: Vec<Payload<T>>,
}

impl<T: Scalar> HybridSequence<T> {
    pub fn new() -> Self {
        Self { items: Vec::new() }
    }

    pub fn from_text(ids: &[usize]) -> Self {
        Self { items: ids.iter().map(|&i| Payload::Text(i)).collect() }
    }

    pub fn push_text(&mut self, id: usize) {
        self.items.push(Payload::Text(id));
    }

    pub fn push_motion_in(&mut self, z: Tensor<T>) {
        assert_eq!(z.rows(), 1, "motion latent must be a [1, d] row");
        self.items.push(Payload::MotionIn(z));
    }

    pub fn push_holder(&mut self) {
        self.items.push(Payload::HolderOut);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Payload<T>] {
        &self.items
    }

    /// Routing indicator: 0 = text branch, 1 = motion branch.
    pub fn modality(&self, i: usize) -> u8 {
        match self.items[i] {
            Payload::Text(_) => 0,
            Payload::MotionIn(_) | Payload::HolderOut => 1,
        }
    }

    pub fn text_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.modality(i) == 0).collect()
    }

    pub fn motion_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.modality(i) == 1).collect()
    }

    /// Token id at position i — holders report the `<mholder_out>` id via
    /// the vocabulary, so this is for `Text` payloads only.
    pub fn token_at(&self, i: usize) -> Option<usize> {
        match self.items[i] {
            Payload::Text(id) => Some(id),
            _ => None,
        }
    }

    pub fn last_token(&self) -> Option<usize> {
        self.items.last().and_then(|p| match p {
            Payload::Text(id) => Some(*id),
            _ => None,
        })
    }
}

// ── Branch layers ────────────────────────────────────────────────────────

/// Pre-norm residual block whose attention core may be replaced by the
/// merged cross-modal softmax, so attention is not fused into the struct.
struct BranchLayer<T: Scalar> {
    ln1: LayerNorm<T>,
    attn: MultiHeadAttention<T>,
    ln2: LayerNorm<T>,
    ffn: FeedForward<T>,
}

impl<T: Scalar> BranchLayer<T> {
    fn new(dim: usize, heads: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, ffn_dim, rng),
        }
    }

    fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }
}

/// Everything `forward` returns: logits for text positions, raw final-layer
/// states for motion positions, and where each row came from.
pub struct BackboneOutput<T: Scalar> {
    pub text_logits: Option<Tensor<T>>,
    pub text_positions: Vec<usize>,
    pub motion_hidden: Option<Tensor<T>>,
    pub motion_positions: Vec<usize>,
}

/// Decoding strategy for `generate_text`.
#[derive(Debug, Clone, Copy)]
pub enum Sampler {
    Greedy,
    TopK { k: usize, temperature: f64 },
    Temperature(f64),
}

// ── The backbone ─────────────────────────────────────────────────────────

pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    pub vocab: Vocab,
    pub latent_dim: usize,
    // Text branch.
    text_emb: Tensor<T>,    // [n_base, d], frozen in stages 1–2
    special_emb: Tensor<T>, // [8, d], always trainable
    pos_emb: Tensor<T>,     // [context, d], shared coordinate system
    text_layers: Vec<BranchLayer<T>>,
    text_ln_f: LayerNorm<T>,
    // Motion branch.
    motion_layers: Vec<BranchLayer<T>>,
    holder_emb: Tensor<T>, // [1, d] input embedding for <mholder_out> slots
    und1: Linear<T>,       // latent → d (motion understanding head)
    und2: Linear<T>,       // d → d
    proj1: Linear<T>,      // d → d (motion projection head)
    proj2: Linear<T>,      // d → cond_dim
    shared: Vec<bool>,
    forward_calls: Cell<u64>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(
        cfg: &BackboneConfig,
        latent_dim: usize,
        cond_dim: usize,
        vocab: Vocab,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.model_dim;
        Self {
            text_emb: init_normal(vocab.n_base(), d, INIT_STD, rng),
            special_emb: init_normal(SPECIALS.len(), d, INIT_STD, rng),
            pos_emb: init_normal(cfg.context, d, INIT_STD, rng),
            text_layers: (0..cfg.layers)
                .map(|_| BranchLayer::new(d, cfg.heads, cfg.ffn_dim, rng))
                .collect(),
            text_ln_f: LayerNorm::new(d),
            motion_layers: (0..cfg.layers)
                .map(|_| BranchLayer::new(d, cfg.heads, cfg.motion_ffn_dim(), rng))
                .collect(),
            holder_emb: init_normal(1, d, INIT_STD, rng),
            und1: Linear::new(latent_dim, d, true, rng),
            und2: Linear::new(d, d, true, rng),
            proj1: Linear::new(d, d, true, rng),
            proj2: Linear::new(d, cond_dim, true, rng),
            shared: cfg.shared_layers(),
            forward_calls: Cell::new(0),
            cfg: cfg.clone(),
            vocab,
            latent_dim,
        }
    }

    pub fn params(&self) -> ParamMap<T> {
        let mut map = ParamMap::new();
        map.insert("backbone.text.emb".to_string(), self.text_emb.clone());
        map.insert("backbone.text.special_emb".to_string(), self.special_emb.clone());
        map.insert("backbone.text.pos".to_string(), self.pos_emb.clone());
        for (i, l) in self.text_layers.iter().enumerate() {
            l.collect(&format!("backbone.text.l{i}"), &mut map);
        }
        self.text_ln_f.collect("backbone.text.ln_f", &mut map);
        for (i, l) in self.motion_layers.iter().enumerate() {
            l.collect(&format!("backbone.motion.l{i}"), &mut map);
        }
        map.insert("backbone.motion.holder_emb".to_string(), self.holder_emb.clone());
        self.und1.collect("backbone.motion.und1", &mut map);
        self.und2.collect("backbone.motion.und2", &mut map);
        self.proj1.collect("backbone.motion.proj1", &mut map);
        self.proj2.collect("backbone.motion.proj2", &mut map);
        map
    }

    /// How many full forward passes have run (used to prove single-pass
    /// motion generation).
    pub fn forward_count(&self) -> u64 {
        self.forward_calls.get()
    }

    // ── Heads ────────────────────────────────────────────────────────────

    /// Motion understanding head: latent → model dim, 2-layer MLP.
    pub fn motion_und(&self, z: &Tensor<T>) -> Tensor<T> {
        self.und2.forward(&self.und1.forward(z).gelu())
    }

    /// Motion projection head: exactly H holder states → condition space.
    pub fn motion_proj(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        if states.rows() != self.cfg.holders {
            return Err(Error::contract(format!(
                "motion projection head expects {} holder states, got {}",
                self.cfg.holders,
                states.rows()
            )));
        }
        Ok(self.proj2.forward(&self.proj1.forward(states).gelu()))
    }

    /// Token embedding over the split base/special tables.
    fn embed_tokens(&self, ids: &[usize]) -> Tensor<T> {
        let n_base = self.vocab.n_base();
        let d = self.cfg.model_dim;
        let mut base_pos = Vec::new();
        let mut base_ids = Vec::new();
        let mut spec_pos = Vec::new();
        let mut spec_ids = Vec::new();
        for (row, &id) in ids.iter().enumerate() {
            if id < n_base {
                base_pos.push(row);
                base_ids.push(id);
            } else {
                spec_pos.push(row);
                spec_ids.push(id - n_base);
            }
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        if !base_ids.is_empty() {
            out = out.scatter_rows(&self.text_emb.embedding(&base_ids), &base_pos);
        }
        if !spec_ids.is_empty() {
            out = out.scatter_rows(&self.special_emb.embedding(&spec_ids), &spec_pos);
        }
        out
    }

    /// Tied unembedding over the extended vocabulary.
    fn unembed(&self, h: &Tensor<T>) -> Tensor<T> {
        let base = h.matmul(&self.text_emb.transpose2());
        let spec = h.matmul(&self.special_emb.transpose2());
        base.concat_cols(&spec)
    }

    // ── Forward ──────────────────────────────────────────────────────────

    /// Per-branch input states. Text rows get token + positional embeddings;
    /// `<mholder_in>` rows get the understanding head's output; holder rows
    /// a learned placeholder embedding — each plus the positional row of its
    /// original index.
    fn embed(
        &self,
        seq: &HybridSequence<T>,
        t_pos: &[usize],
        m_pos: &[usize],
    ) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
        let h_text = if t_pos.is_empty() {
            None
        } else {
            let ids: Vec<usize> = t_pos.iter().map(|&i| seq.token_at(i).unwrap()).collect();
            let tok = self.embed_tokens(&ids);
            Some(tok.add(&self.pos_emb.embedding(t_pos)))
        };
        let h_motion = if m_pos.is_empty() {
            None
        } else {
            let rows: Vec<Tensor<T>> = m_pos
                .iter()
                .map(|&i| match &seq.items()[i] {
                    Payload::MotionIn(z) => self.motion_und(z),
                    Payload::HolderOut => self.holder_emb.clone(),
                    Payload::Text(_) => unreachable!("text payload routed to motion branch"),
                })
                .collect();
            let refs: Vec<&Tensor<T>> = rows.iter().collect();
            let stacked = Tensor::concat_rows(&refs);
            Some(stacked.add(&self.pos_emb.embedding(m_pos)))
        };
        (h_text, h_motion)
    }

    /// One attention step at layer `l` over the current branch states.
    fn attention(
        &self,
        l: usize,
        h_text: Option<&Tensor<T>>,
        h_motion: Option<&Tensor<T>>,
        t_pos: &[usize],
        m_pos: &[usize],
        k: usize,
    ) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
        let tl = &self.text_layers[l];
        let ml = &self.motion_layers[l];
        let shared = self.shared[l] && h_text.is_some() && h_motion.is_some();
        if !shared {
            // Isolated attention (or a branch is empty, making the merged
            // sequence identical to the lone branch).
            let at = h_text.map(|h| {
                let n = tl.ln1.forward(h);
                tl.attn.forward(&n, &n, true)
            });
            let am = h_motion.map(|h| {
                let n = ml.ln1.forward(h);
                ml.attn.forward(&n, &n, true)
            });
            return (at, am);
        }
        let (h_text, h_motion) = (h_text.unwrap(), h_motion.unwrap());
        let (qt, kt, vt) = tl.attn.project_qkv(&tl.ln1.forward(h_text));
        let (qm, km, vm) = ml.attn.project_qkv(&ml.ln1.forward(h_motion));
        let d = self.cfg.model_dim;
        let merge = |a: &Tensor<T>, b: &Tensor<T>| {
            Tensor::zeros(&[k, d]).scatter_rows(a, t_pos).scatter_rows(b, m_pos)
        };
        let q = merge(&qt, &qm);
        let key = merge(&kt, &km);
        let val = merge(&vt, &vm);
        let core = Tensor::multi_head_attention(&q, &key, &val, self.cfg.heads, true);
        let at = tl.attn.wo.forward(&core.index_select_rows(t_pos));
        let am = ml.attn.wo.forward(&core.index_select_rows(m_pos));
        (Some(at), Some(am))
    }

    /// Full forward pass: logits at text positions, raw final states at
    /// motion positions.
    pub fn forward(&self, seq: &HybridSequence<T>) -> Result<BackboneOutput<T>> {
        if seq.is_empty() {
            return Err(Error::contract("cannot run the backbone on an empty sequence"));
        }
        if seq.len() > self.cfg.context {
            return Err(Error::contract(format!(
                "sequence length {} exceeds the context window {}",
                seq.len(),
                self.cfg.context
            )));
        }
        self.forward_calls.set(self.forward_calls.get() + 1);
        let t_pos = seq.text_positions();
        let m_pos = seq.motion_positions();
        let (mut h_text, mut h_motion) = self.embed(seq, &t_pos, &m_pos);
        for l in 0..self.cfg.layers {
            let (at, am) = self.attention(l, h_text.as_ref(), h_motion.as_ref(), &t_pos, &m_pos, seq.len());
            if let (Some(h), Some(a)) = (&h_text, &at) {
                let h = h.add(a);
                let y = self.text_layers[l].ffn.forward(&self.text_layers[l].ln2.forward(&h));
                h_text = Some(h.add(&y));
            }
            if let (Some(h), Some(a)) = (&h_motion, &am) {
                let h = h.add(a);
                let y = self.motion_layers[l].ffn.forward(&self.motion_layers[l].ln2.forward(&h));
                h_motion = Some(h.add(&y));
            }
        }
        let text_logits = h_text.map(|h| self.unembed(&self.text_ln_f.forward(&h)));
        Ok(BackboneOutput {
            text_logits,
            text_positions: t_pos,
            motion_hidden: h_motion,
            motion_positions: m_pos,
        })
    }

    /// The standalone text model: identical code path shape, no routing.
    /// For any text-only sequence, `forward` must agree with this exactly.
    pub fn forward_text_only(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let seq = HybridSequence::from_text(ids);
        let out = self.forward(&seq)?;
        Ok(out.text_logits.expect("text-only sequence always yields logits"))
    }

    // ── Generation ───────────────────────────────────────────────────────

    /// Append sampled text tokens until `<eos>`, `<som>`, or `max_new`.
    /// Returns the extended sequence and the ids that were appended
    /// (including the terminator).
    pub fn generate_text(
        &self,
        seq: &HybridSequence<T>,
        sampler: Sampler,
        max_new: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(HybridSequence<T>, Vec<usize>)> {
        crate::tensor::no_grad(|| {
            let mut seq = seq.clone();
            let mut emitted = Vec::new();
            let (eos, som) = (self.vocab.eos(), self.vocab.som());
            for _ in 0..max_new {
                if seq.modality(seq.len() - 1) != 0 {
                    return Err(Error::contract(
                        "text generation requires the sequence to end on a text token",
                    ));
                }
                let out = self.forward(&seq)?;
                let logits = out.text_logits.expect("sequence ends on text");
                // The final text row predicts the next token.
                let row = logits.index_select_rows(&[logits.rows() - 1]).to_vec();
                let id = sample_id(&row, sampler, rng);
                seq.push_text(id);
                emitted.push(id);
                if id == eos || id == som {
                    break;
                }
            }
            Ok((seq, emitted))
        })
    }

    /// Motion emission after `<som>`: append H `<mholder_out>` slots, run
    /// ONE forward pass, project the holder states, sample a latent from the
    /// diffusion head, and close with `<eom>` (appended, never predicted).
    pub fn generate_motion(
        &self,
        seq: &HybridSequence<T>,
        head: &crate::diffusion::DiffusionHead<T>,
        guidance: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, HybridSequence<T>)> {
        if seq.last_token() != Some(self.vocab.som()) {
            return Err(Error::contract(
                "motion generation requires the sequence to end with <som>",
            ));
        }
        crate::tensor::no_grad(|| {
            let mut seq = seq.clone();
            for _ in 0..self.cfg.holders {
                seq.push_holder();
            }
            let out = self.forward(&seq)?;
            let hidden = out.motion_hidden.expect("holders guarantee motion rows");
            // The holder rows are the last H motion positions.
            let first = seq.len() - self.cfg.holders;
            let rows: Vec<usize> = out
                .motion_positions
                .iter()
                .enumerate()
                .filter(|(_, &p)| p >= first)
                .map(|(r, _)| r)
                .collect();
            let states = self.motion_proj(&hidden.index_select_rows(&rows))?;
            let z = head.sample(Some(&states), guidance, rng);
            seq.push_text(self.vocab.eom());
            Ok((z, seq))
        })
    }

    // ── Checkpointing ────────────────────────────────────────────────────

    pub fn save(&self, path: &Path, frozen_groups: &[String]) -> Result<()>
    where
        T: Element,
    {
        let mut c = self.params().to_container();
        c.meta = serde_json::json!({
            "kind": "backbone",
            "dtype": T::DTYPE.name(),
            "config": self.cfg,
            "latent_dim": self.latent_dim,
            "cond_dim": self.proj2.weight.cols(),
            "vocab_words": self.vocab.words(),
            "frozen_groups": frozen_groups,
        });
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self>
    where
        T: Element,
    {
        let c = Container::load(path)?;
        let meta = &c.meta;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("backbone") {
            return Err(Error::contract(format!(
                "{} is not a backbone checkpoint",
                path.display()
            )));
        }
        let cfg: BackboneConfig = serde_json::from_value(
            meta.get("config").cloned().ok_or_else(|| Error::contract("missing config"))?,
        )?;
        let latent_dim = meta
            .get("latent_dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::contract("missing latent_dim"))? as usize;
        let cond_dim = meta
            .get("cond_dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::contract("missing cond_dim"))? as usize;
        let words: Vec<String> = serde_json::from_value(
            meta.get("vocab_words")
                .cloned()
                .ok_or_else(|| Error::contract("missing vocab_words"))?,
        )?;
        let vocab = Vocab::from_saved_words(words)?;
        let mut rng = crate::rng::rng_for(0, "backbone-load");
        let model = Self::new(&cfg, latent_dim, cond_dim, vocab, &mut rng);
        model.params().load_container(&c)?;
        Ok(model)
    }

    /// Frozen group names recorded in a checkpoint (empty when absent).
    pub fn frozen_groups_in(path: &Path) -> Result<Vec<String>> {
        let c = Container::load(path)?;
        Ok(c.meta
            .get("frozen_groups")
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_owned)).collect())
            .unwrap_or_default())
    }
}

/// Draw a token id from one row of logits.
fn sample_id<T: Scalar>(row: &[T], sampler: Sampler, rng: &mut ChaCha8Rng) -> usize {
    let logits: Vec<f64> = row.iter().map(|v| v.to_f64()).collect();
    match sampler {
        Sampler::Greedy => argmax(&logits),
        Sampler::Temperature(temp) => {
            let probs = softmax_scaled(&logits, temp);
            draw(&probs, rng)
        }
        Sampler::TopK { k, temperature } => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
            order.truncate(k.max(1));
            let kept: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
            let probs = softmax_scaled(&kept, temperature);
            order[draw(&probs, rng)]
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    let t = temperature.max(1e-6);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - m) / t).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DiffusionConfig;
    use crate::diffusion::DiffusionHead;
    use crate::rng::{normal_vec, rng_for};
    use crate::tensor::grad_check_sampled;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            model_dim: 16,
            heads: 2,
            ffn_dim: 32,
            context: 64,
            holders: 4,
            ..Default::default()
        }
    }

    fn make_backbone(cfg: &BackboneConfig, seed: u64) -> Backbone<f64> {
        Backbone::new(cfg, 8, 12, Vocab::standard(), &mut rng_for(seed, "bb"))
    }

    fn random_latent(rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(normal_vec(rng, 8), &[1, 8])
    }

    /// A mixed sequence: text prompt, one input motion latent (the
    /// `<mholder_in>` position), closing `<eom>`.
    fn mixed_seq(bb: &Backbone<f64>, rng: &mut ChaCha8Rng) -> HybridSequence<f64> {
        let v = &bb.vocab;
        let mut seq = HybridSequence::from_text(&v.tokenize("describe this motion :"));
        seq.push_motion_in(random_latent(rng));
        seq.push_text(v.eom());
        seq
    }

    #[test]
    fn routing_partitions_every_position_exactly_once() {
        let cfg = small_cfg();
        let bb = make_backbone(&cfg, 1);
        let seq = mixed_seq(&bb, &mut rng_for(2, "t"));
        let t = seq.text_positions();
        let m = seq.motion_positions();
        let mut all: Vec<usize> = t.iter().chain(m.iter()).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..seq.len()).collect::<Vec<_>>());
        // ϑ flags match payload kinds.
        for &i in &m {
            assert_eq!(seq.modality(i), 1);
        }
        let out = bb.forward(&seq).unwrap();
        assert_eq!(out.text_positions, t);
        assert_eq!(out.motion_positions, m);
        assert_eq!(out.text_logits.unwrap().shape(), &[t.len(), bb.vocab.len()]);
        assert_eq!(out.motion_hidden.unwrap().shape(), &[m.len(), cfg.model_dim]);
    }

    #[test]
    fn text_only_forward_matches_the_standalone_text_model() {
        // Frozen-branch equivalence for every placement pattern.
        for placement in [
            vec![true, true],
            vec![false, false],
            vec![true, false],
            vec![false, true],
        ] {
            let cfg = BackboneConfig { placement: Some(placement.clone()), ..small_cfg() };
            let bb = make_backbone(&cfg, 3);
            let ids = bb.vocab.tokenize("a person walks forward slowly");
            let seq = HybridSequence::from_text(&ids);
            let bimodal = bb.forward(&seq).unwrap().text_logits.unwrap().to_vec();
            let standalone = bb.forward_text_only(&ids).unwrap().to_vec();
            let max_diff = bimodal
                .iter()
                .zip(&standalone)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff <= 1e-6, "placement {placement:?}: max diff {max_diff}");
        }
    }

    #[test]
    fn causality_holds_bitwise_across_modalities() {
        let cfg = small_cfg();
        let bb = make_backbone(&cfg, 4);
        let mut rng = rng_for(5, "t");
        let seq = mixed_seq(&bb, &mut rng);
        let base = bb.forward(&seq).unwrap();
        // Perturb the FINAL item's payload and check all earlier states.
        let mut altered = seq.clone();
        let last = altered.items.len() - 1;
        altered.items[last] = Payload::Text(bb.vocab.eos());
        let changed = bb.forward(&altered).unwrap();
        let (a, b) = (base.text_logits.unwrap(), changed.text_logits.unwrap());
        let (av, bv) = (a.to_vec(), b.to_vec());
        let cols = bb.vocab.len();
        for (r, &p) in base.text_positions.iter().enumerate() {
            if p < last {
                assert_eq!(
                    av[r * cols..(r + 1) * cols],
                    bv[r * cols..(r + 1) * cols],
                    "text logits at position {p} changed"
                );
            }
        }
        let (ma, mb) =
            (base.motion_hidden.unwrap().to_vec(), changed.motion_hidden.unwrap().to_vec());
        let d = cfg.model_dim;
        for (r, &p) in base.motion_positions.iter().enumerate() {
            if p < last {
                assert_eq!(ma[r * d..(r + 1) * d], mb[r * d..(r + 1) * d]);
            }
        }
    }

    #[test]
    fn cross_modal_attention_lets_later_positions_see_earlier_ones() {
        // With shared attention, changing an EARLIER motion latent must move
        // LATER text logits; with fully isolated attention it must not.
        for (placement, expect_change) in
            [(vec![true, true], true), (vec![false, false], false)]
        {
            let cfg = BackboneConfig { placement: Some(placement), ..small_cfg() };
            let bb = make_backbone(&cfg, 6);
            let v = &bb.vocab;
            let mut rng = rng_for(7, "t");
            let mut seq = HybridSequence::from_text(&v.tokenize("describe this motion :"));
            seq.push_motion_in(random_latent(&mut rng));
            seq.push_text(v.eom());
            let mut other = seq.clone();
            let pos = seq.len() - 2;
            other.items[pos] = Payload::MotionIn(random_latent(&mut rng));

            let la = bb.forward(&seq).unwrap().text_logits.unwrap().to_vec();
            let lb = bb.forward(&other).unwrap().text_logits.unwrap().to_vec();
            let cols = v.len();
            let n_rows = la.len() / cols;
            // The final text row sits after the motion item.
            let tail_diff: f64 = la[(n_rows - 1) * cols..]
                .iter()
                .zip(&lb[(n_rows - 1) * cols..])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if expect_change {
                assert!(tail_diff > 1e-9, "shared attention must carry motion → text");
            } else {
                assert_eq!(tail_diff, 0.0, "isolated attention must not leak motion → text");
            }
        }
    }

    #[test]
    fn overlength_and_malformed_sequences_are_rejected() {
        let cfg = small_cfg();
        let bb = make_backbone(&cfg, 8);
        let ids: Vec<usize> = vec![0; cfg.context + 1];
        assert!(bb.forward(&HybridSequence::from_text(&ids)).is_err());
        assert!(bb.forward(&HybridSequence::new()).is_err());
        // Motion projection head wants exactly H states.
        let h = Tensor::from_vec(normal_vec(&mut rng_for(9, "t"), 3 * 16), &[3, 16]);
        assert!(bb.motion_proj(&h).is_err());
    }

    #[test]
    fn motion_heads_pass_gradcheck() {
        let cfg = small_cfg();
        let bb = make_backbone(&cfg, 10);
        let mut rng = rng_for(11, "t");
        let z = Tensor::param(normal_vec(&mut rng, 8), &[1, 8]);
        let params = vec![
            z.clone(),
            bb.und1.weight.clone(),
            bb.und2.weight.clone(),
            bb.und1.bias.clone().unwrap(),
        ];
        let f = || bb.motion_und(&z).mul(&bb.motion_und(&z)).sum_all();
        let report = grad_check_sampled(f, &params, 1e-5, 6, 21).unwrap();
        assert!(report.max_rel_err < 1e-4, "und head rel err {}", report.max_rel_err);

        let states = Tensor::param(normal_vec(&mut rng, 4 * 16), &[4, 16]);
        let proj_params = vec![states.clone(), bb.proj1.weight.clone(), bb.proj2.weight.clone()];
        let g = || {
            let p = bb.motion_proj(&states).unwrap();
            p.mul(&p).sum_all()
        };
        let report = grad_check_sampled(g, &proj_params, 1e-5, 6, 22).unwrap();
        assert!(report.max_rel_err < 1e-4, "proj head rel err {}", report.max_rel_err);
    }

    #[test]
    fn full_forward_passes_gradcheck_on_a_mixed_sequence() {
        let cfg = BackboneConfig { placement: Some(vec![true, false]), ..small_cfg() };
        let bb = make_backbone(&cfg, 12);
        let mut rng = rng_for(13, "t");
        let z = Tensor::param(normal_vec(&mut rng, 8), &[1, 8]);
        let v = bb.vocab.clone();
        let map = bb.params();
        let mut params: Vec<Tensor<f64>> = vec![z.clone()];
        for (_, t) in map.iter() {
            params.push(t.clone());
        }
        let f = || {
            let mut seq = HybridSequence::from_text(&v.tokenize("show a motion for walk :"));
            seq.push_motion_in(z.clone());
            seq.push_text(v.som());
            seq.push_holder();
            seq.push_holder();
            seq.push_holder();
            seq.push_holder();
            let out = bb.forward(&seq).unwrap();
            let logits = out.text_logits.unwrap();
            let hidden = out.motion_hidden.unwrap();
            // A scalar touching both outputs.
            logits.mul(&logits).sum_all().add(&hidden.mul(&hidden).sum_all())
        };
        let report = grad_check_sampled(f, &params, 1e-5, 4, 23).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn greedy_text_generation_is_deterministic_and_stops_at_eos() {
        let cfg = small_cfg();
        let bb = make_backbone(&cfg, 14);
        let prompt = HybridSequence::from_text(&bb.vocab.tokenize("a person walks"));
        let (a_seq, a_ids) =
            bb.generate_text(&prompt, Sampler::Greedy, 12, &mut rng_for(15, "g")).unwrap();
        let (_, b_ids) =
            bb.generate_text(&prompt, Sampler::Greedy, 12, &mut rng_for(16, "g")).unwrap();
        assert_eq!(a_ids, b_ids, "greedy decoding must ignore the rng");
        assert!(a_seq.len() <= prompt.len() + 12);
        let eos = bb.vocab.eos();
        let som = bb.vocab.som();
        if let Some(stop) = a_ids.iter().position(|&i| i == eos || i == som) {
            assert_eq!(stop, a_ids.len() - 1, "nothing may follow the terminator");
        }
        // Temperature sampling differs across seeds but not within one.
        let (_, t1) = bb
            .generate_text(&prompt, Sampler::Temperature(1.0), 12, &mut rng_for(17, "g"))
            .unwrap();
        let (_, t2) = bb
            .generate_text(&prompt, Sampler::Temperature(1.0), 12, &mut rng_for(17, "g"))
            .unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn motion_generation_appends_holders_in_one_forward_pass() {
        let cfg = small_cfg();
        let bb = make_backbone(&cfg, 18);
        let mut rng = rng_for(19, "t");
        let head = DiffusionHead::<f64>::new(
            8,
            &DiffusionConfig {
                width: 16,
                blocks: 1,
                cond_dim: 12,
                time_dim: 8,
                timesteps: 50,
                sample_steps: 10,
                beta_start: 0.004,
                beta_end: 0.45,
                ..Default::default()
            },
            2,
            &mut rng,
        )
        .unwrap();
        let v = &bb.vocab;
        let mut prompt = HybridSequence::from_text(&v.tokenize("show a motion for walk :"));
        prompt.push_text(v.som());

        let before = bb.forward_count();
        let (z, seq) = bb.generate_motion(&prompt, &head, 1.0, &mut rng_for(20, "m")).unwrap();
        assert_eq!(bb.forward_count() - before, 1, "exactly one forward pass");
        assert_eq!(z.shape(), &[1, 8]);

        // Tail must read [<som>, H×<mholder_out>, <eom>].
        let n = seq.len();
        assert_eq!(seq.token_at(n - 1), Some(v.eom()));
        for i in 0..cfg.holders {
            assert!(matches!(seq.items()[n - 2 - i], Payload::HolderOut));
        }
        assert_eq!(seq.token_at(n - 2 - cfg.holders), Some(v.som()));

        // Determinism per seed.
        let (z2, _) = bb.generate_motion(&prompt, &head, 1.0, &mut rng_for(20, "m")).unwrap();
        assert_eq!(z.to_vec(), z2.to_vec());

        // Without a trailing <som> the call is a contract error.
        let bare = HybridSequence::from_text(&v.tokenize("walk"));
        assert!(bb.generate_motion(&bare, &head, 1.0, &mut rng_for(21, "m")).is_err());
    }

    #[test]
    fn rho_changes_ffn_parameter_counts_only() {
        let base = make_backbone(&small_cfg(), 22);
        let half = make_backbone(
            &BackboneConfig { motion_ffn_ratio: 0.5, ..small_cfg() },
            22,
        );
        let (pa, pb) = (base.params(), half.params());
        let names_a: Vec<String> = pa.iter().map(|(n, _)| n.to_string()).collect();
        let names_b: Vec<String> = pb.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names_a, names_b, "ρ must not add or remove parameter groups");
        for ((na, ta), (_, tb)) in pa.iter().zip(pb.iter()) {
            if na.contains(".motion.") && na.contains(".ffn.") {
                // The hidden width halves; the down-projection output bias
                // is the one FFN tensor whose shape does not involve it.
                if na.ends_with(".down.bias") {
                    assert_eq!(ta.shape(), tb.shape());
                } else {
                    assert_eq!(tb.numel() * 2, ta.numel(), "{na} should halve with ρ = ½");
                }
            } else {
                assert_eq!(ta.shape(), tb.shape(), "{na} must be unaffected by ρ");
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_with_frozen_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.bin");
        let cfg = small_cfg();
        let bb = make_backbone(&cfg, 23);
        bb.save(&path, &["backbone.text".to_string()]).unwrap();
        let loaded = Backbone::<f64>::load(&path).unwrap();
        let (pa, pb) = (bb.params(), loaded.params());
        for ((na, ta), (nb, tb)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "{na} drifted through the checkpoint");
        }
        assert_eq!(
            Backbone::<f64>::frozen_groups_in(&path).unwrap(),
            vec!["backbone.text".to_string()]
        );
        // Same prompt, same logits.
        let ids = bb.vocab.tokenize("a person walks");
        assert_eq!(
            bb.forward_text_only(&ids).unwrap().to_vec(),
            loaded.forward_text_only(&ids).unwrap().to_vec()
        );
    }
}
