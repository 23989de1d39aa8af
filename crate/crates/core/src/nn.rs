//! Neural-network building blocks over the tensor engine: parameter
//! registry, linear layers, layer norm, multi-head attention, and the
//! standard pre-norm transformer block. All weights initialize from
//! N(0, 0.02²) (biases and norm offsets at zero) with draws taken from a
//! caller-supplied rng so module construction is reproducible.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{Container, Element};
use crate::rng::normal_vec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

// ── Parameter registry ───────────────────────────────────────────────────

/// Ordered name → tensor map used for checkpoints, optimizers, and freeze
/// groups. Names are hierarchical (`"backbone.layer0.attn.wq"`).
pub struct ParamMap<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamMap<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamMap<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name '{name}'"
        );
        self.entries.push((name, t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Set requires_grad on every parameter whose name satisfies `pred`.
    pub fn set_trainable(&self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for (name, t) in &self.entries {
            if pred(name) {
                t.set_requires_grad(trainable);
            }
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.clone())
            .collect()
    }
}

impl<T: Element> ParamMap<T> {
    /// Snapshot all parameter values into a container.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (name, t) in &self.entries {
            c.insert::<T>(name, t.shape(), t.to_vec());
        }
        c
    }

    /// Load values for every registered parameter; missing names or shape
    /// mismatches are contract errors naming the offender.
    pub fn load_container(&self, c: &Container) -> Result<()> {
        for (name, t) in &self.entries {
            let (shape, data) = c.get_typed::<T>(name)?;
            if shape != t.shape() {
                return Err(Error::contract(format!(
                    "checkpoint shape {:?} for '{name}' does not match model shape {:?}",
                    shape,
                    t.shape()
                )));
            }
            t.set_data(data.to_vec());
        }
        Ok(())
    }
}

// ── Initializers ─────────────────────────────────────────────────────────

pub fn init_normal<T: Scalar>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let data: Vec<T> = normal_vec::<f64, _>(rng, rows * cols)
        .into_iter()
        .map(|x| T::from_f64(x * std))
        .collect();
    Tensor::param(data, &[rows, cols])
}

pub fn init_zeros<T: Scalar>(rows: usize, cols: usize) -> Tensor<T> {
    let t = Tensor::zeros(&[rows, cols]);
    t.set_requires_grad(true);
    t
}

pub fn init_ones<T: Scalar>(rows: usize, cols: usize) -> Tensor<T> {
    let t = Tensor::full(&[rows, cols], T::ONE);
    t.set_requires_grad(true);
    t
}

// ── Linear ───────────────────────────────────────────────────────────────

pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>, // [in, out]
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: init_normal(d_in, d_out, INIT_STD, rng),
            bias: bias.then(|| init_zeros(1, d_out)),
        }
    }

    /// Zero-initialized variant (used by modulation layers that must start
    /// as the identity mapping).
    pub fn new_zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: init_zeros(d_in, d_out),
            bias: bias.then(|| init_zeros(1, d_out)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.matmul(&self.weight);
        match &self.bias {
            Some(b) => y.add_suffix(b),
            None => y,
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        out.insert(format!("{prefix}.weight"), self.weight.clone());
        if let Some(b) = &self.bias {
            out.insert(format!("{prefix}.bias"), b.clone());
        }
    }
}

// ── LayerNorm ────────────────────────────────────────────────────────────

pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self { gain: init_ones(1, dim), bias: init_zeros(1, dim), eps: 1e-5 }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.layer_norm(&self.gain, &self.bias, T::from_f64(self.eps))
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        out.insert(format!("{prefix}.gain"), self.gain.clone());
        out.insert(format!("{prefix}.bias"), self.bias.clone());
    }
}

// ── Multi-head attention ─────────────────────────────────────────────────

pub struct MultiHeadAttention<T: Scalar> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(dim % heads, 0, "dim {dim} not divisible by heads {heads}");
        Self {
            wq: Linear::new(dim, dim, true, rng),
            wk: Linear::new(dim, dim, true, rng),
            wv: Linear::new(dim, dim, true, rng),
            wo: Linear::new(dim, dim, true, rng),
            heads,
        }
    }

    /// Self- or cross-attention: queries from `x`, keys/values from `kv`.
    /// `causal` requires equal lengths and masks strictly-future positions.
    pub fn forward(&self, x: &Tensor<T>, kv: &Tensor<T>, causal: bool) -> Tensor<T> {
        let q = self.wq.forward(x);
        let k = self.wk.forward(kv);
        let v = self.wv.forward(kv);
        let ctx = Tensor::multi_head_attention(&q, &k, &v, self.heads, causal);
        self.wo.forward(&ctx)
    }

    /// Projected q/k/v without the attention itself — used by the shared
    /// attention layout, which interleaves rows from two branches before
    /// the softmax.
    pub fn project_qkv(&self, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        (self.wq.forward(x), self.wk.forward(x), self.wv.forward(x))
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.wv.collect(&format!("{prefix}.wv"), out);
        self.wo.collect(&format!("{prefix}.wo"), out);
    }
}

// ── Feed-forward ─────────────────────────────────────────────────────────

pub struct FeedForward<T: Scalar> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { up: Linear::new(dim, hidden, true, rng), down: Linear::new(hidden, dim, true, rng) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.down.forward(&self.up.forward(x).gelu())
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        self.up.collect(&format!("{prefix}.up"), out);
        self.down.collect(&format!("{prefix}.down"), out);
    }
}

// ── Transformer block (pre-norm) ─────────────────────────────────────────

pub struct TransformerBlock<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(dim: usize, heads: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, ffn_dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, causal: bool) -> Tensor<T> {
        let normed = self.ln1.forward(x);
        let x = x.add(&self.attn.forward(&normed, &normed, causal));
        let y = self.ffn.forward(&self.ln2.forward(&x));
        x.add(&y)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamMap<T>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }
}
