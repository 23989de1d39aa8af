//! Staged training: instruction-task assembly, loss composition, parameter
//! freezing, and the stage schedule.
//!
//! Stage 0 pretrains the text branch as a plain language model over the
//! caption corpus (the stand-in for a pretrained LM). Stage 1 teaches
//! text-to-motion with the text branch frozen except the special-token rows;
//! stage 2 adds motion-to-text and prediction under the same freeze; stage 3
//! unfreezes everything and mixes in plain-text paraphrasing.
//!
//! Supervision follows the boundary-token contract: the position whose
//! target is `<som>` is trained, caption/answer tokens are trained, and
//! prompt tokens, `<mholder_out>` slots, and any position whose target is
//! `<eom>` are excluded.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, HybridSequence};
use crate::config::{Config, TrainConfig};
use crate::corpus::instruction::{prompts, Task};
use crate::corpus::tokenizer::Vocab;
use crate::corpus::{self, captions, CorpusRecord, CorpusStats};
use crate::diffusion::DiffusionHead;
use crate::error::{Error, Result};
use crate::io::{Container, Element};
use crate::nn::ParamMap;
use crate::rng::{rng_for, step_rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{AdamW, AdamWConfig};
use crate::vae::{build_latent_cache, CachedLatent, MotionVae};

// ── Model bundle ─────────────────────────────────────────────────────────

/// Backbone plus diffusion head: everything the stages train.
pub struct Model<T: Scalar> {
    pub backbone: Backbone<T>,
    pub head: DiffusionHead<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &Config, vocab: Vocab, rng: &mut ChaCha8Rng) -> Result<Self> {
        let backbone = Backbone::new(
            &cfg.backbone,
            cfg.vae.latent_dim,
            cfg.diffusion.cond_dim,
            vocab,
            rng,
        );
        let head =
            DiffusionHead::new(cfg.vae.latent_dim, &cfg.diffusion, cfg.backbone.heads, rng)?;
        Ok(Self { backbone, head })
    }

    pub fn params(&self) -> ParamMap<T> {
        let mut map = self.backbone.params();
        self.head.collect("head", &mut map);
        map
    }

    pub fn save(&self, path: &Path, stage: u8, frozen: &[String]) -> Result<()>
    where
        T: Element,
    {
        let mut c = self.params().to_container();
        c.meta = serde_json::json!({
            "kind": "bimodal",
            "dtype": T::DTYPE.name(),
            "stage": stage,
            "backbone": self.backbone.cfg,
            "diffusion": self.head.cfg,
            "latent_dim": self.backbone.latent_dim,
            "vocab_words": self.backbone.vocab.words(),
            "frozen_groups": frozen,
        });
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, u8)>
    where
        T: Element,
    {
        let c = Container::load(path)
            .map_err(|e| Error::config(format!("cannot load model {}: {}", path.display(), e.message)))?;
        if c.meta.get("kind").and_then(|v| v.as_str()) != Some("bimodal") {
            return Err(Error::config(format!(
                "{} is not a model checkpoint",
                path.display()
            )));
        }
        let get = |k: &str| {
            c.meta.get(k).cloned().ok_or_else(|| Error::contract(format!("missing {k} in model meta")))
        };
        let backbone_cfg: crate::config::BackboneConfig = serde_json::from_value(get("backbone")?)?;
        let diffusion_cfg: crate::config::DiffusionConfig = serde_json::from_value(get("diffusion")?)?;
        let latent_dim = get("latent_dim")?.as_u64().unwrap_or(0) as usize;
        let words: Vec<String> = serde_json::from_value(get("vocab_words")?)?;
        let stage = get("stage")?.as_u64().unwrap_or(0) as u8;
        let vocab = Vocab::from_saved_words(words)?;
        let mut rng = rng_for(0, "model-load");
        let backbone = Backbone::new(&backbone_cfg, latent_dim, diffusion_cfg.cond_dim, vocab, &mut rng);
        let head = DiffusionHead::new(latent_dim, &diffusion_cfg, backbone_cfg.heads, &mut rng)?;
        let model = Self { backbone, head };
        model.params().load_container(&c)?;
        Ok((model, stage))
    }
}

// ── Stage plans ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StageSpec {
    pub stage: u8,
    /// Task mixture; empty means plain language modeling over captions.
    pub mixture: Vec<(Task, f64)>,
    /// Name prefixes whose parameters stay fixed this stage.
    pub frozen: Vec<String>,
    /// Exceptions inside frozen prefixes that keep training.
    pub exempt: Vec<String>,
    pub steps: usize,
}

pub fn stage_spec(stage: u8, t: &TrainConfig) -> Result<StageSpec> {
    let text_freeze =
        (vec!["backbone.text.".to_string()], vec!["backbone.text.special_emb".to_string()]);
    let spec = match stage {
        0 => StageSpec {
            stage,
            mixture: Vec::new(),
            frozen: vec!["backbone.motion.".to_string(), "head.".to_string()],
            exempt: Vec::new(),
            steps: t.stage0_steps,
        },
        1 => StageSpec {
            stage,
            mixture: vec![(Task::T2m, 1.0)],
            frozen: text_freeze.0,
            exempt: text_freeze.1,
            steps: t.stage1_steps,
        },
        2 => StageSpec {
            stage,
            mixture: vec![(Task::T2m, 0.4), (Task::M2t, 0.4), (Task::Predict, 0.2)],
            frozen: text_freeze.0,
            exempt: text_freeze.1,
            steps: t.stage2_steps,
        },
        3 => StageSpec {
            stage,
            mixture: vec![
                (Task::T2m, 0.3),
                (Task::M2t, 0.3),
                (Task::Predict, 0.2),
                (Task::PlainText, 0.2),
            ],
            frozen: Vec::new(),
            exempt: Vec::new(),
            steps: t.stage3_steps,
        },
        _ => return Err(Error::config(format!("unknown training stage {stage}"))),
    };
    Ok(spec)
}

impl StageSpec {
    /// Whether a parameter name is frozen under this stage.
    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
            && !self.exempt.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Apply the freeze to a parameter map.
    pub fn apply_freeze<T: Scalar>(&self, params: &ParamMap<T>) {
        params.set_trainable(|name| !self.is_frozen(name), true);
        params.set_trainable(|name| self.is_frozen(name), false);
    }

    pub fn frozen_group_names(&self) -> Vec<String> {
        self.frozen.clone()
    }
}

// ── Task assembly ────────────────────────────────────────────────────────

/// One training example: the hybrid sequence, per-position supervision
/// (Some(target id) at positions whose next-token prediction is trained),
/// and the diffusion target when the task emits motion.
pub struct TaskSample<T: Scalar> {
    pub task: Task,
    pub seq: HybridSequence<T>,
    pub supervised: Vec<Option<usize>>,
    pub diffusion_target: Option<Tensor<T>>,
}

fn latent_tensor<T: Scalar>(v: &[T]) -> Tensor<T> {
    Tensor::from_vec(v.to_vec(), &[1, v.len()])
}

/// Render a prompt template, substituting the caption slot.
fn render_prompt(template: &str, caption: &str) -> String {
    template.replace("{caption}", caption)
}

/// Build one instruction-formatted sample for `record`.
pub fn assemble<T: Scalar>(
    task: Task,
    record: &CorpusRecord,
    latents: &CachedLatent<T>,
    vocab: &Vocab,
    holders: usize,
    rng: &mut ChaCha8Rng,
) -> TaskSample<T> {
    let phr = prompts(task);
    let prompt = render_prompt(phr[rng.gen_range(0..phr.len())], &record.caption);
    let mut seq = HybridSequence::new();
    seq.push_text(vocab.bos());
    for id in vocab.tokenize(&prompt) {
        seq.push_text(id);
    }
    let mut supervised: Vec<Option<usize>> = vec![None; seq.len()];
    let mut diffusion_target = None;

    match task {
        Task::T2m => {
            // … prompt → <som> → H holders → <eom>; only <som> is predicted.
            supervised[seq.len() - 1] = Some(vocab.som());
            seq.push_text(vocab.som());
            supervised.push(None);
            for _ in 0..holders {
                seq.push_holder();
                supervised.push(None);
            }
            seq.push_text(vocab.eom());
            supervised.push(None);
            diffusion_target = Some(latent_tensor(&latents.mu));
        }
        Task::M2t => {
            // … prompt → motion latent → <eom> → caption → <eos>.
            seq.push_motion_in(latent_tensor(&latents.mu));
            supervised.push(None);
            seq.push_text(vocab.eom());
            supervised.push(None);
            append_answer(&mut seq, &mut supervised, &record.caption, vocab);
        }
        Task::Predict => {
            // … prompt → prefix latent → <eom> → <som> → holders → <eom>;
            // the diffusion target is the full-clip latent.
            seq.push_motion_in(latent_tensor(&latents.prefix_mu));
            supervised.push(None);
            seq.push_text(vocab.eom());
            supervised.push(Some(vocab.som()));
            seq.push_text(vocab.som());
            supervised.push(None);
            for _ in 0..holders {
                seq.push_holder();
                supervised.push(None);
            }
            seq.push_text(vocab.eom());
            supervised.push(None);
            diffusion_target = Some(latent_tensor(&latents.mu));
        }
        Task::PlainText => {
            // … prompt-with-caption → ":" → paraphrase → <eos>.
            let other = other_train_template(record, rng);
            let answer = captions::caption_for(&record.class, &record.params, other);
            let colon = vocab.id(":").expect("':' is in the instruction pool");
            seq.push_text(colon);
            supervised.push(None);
            append_answer(&mut seq, &mut supervised, &answer, vocab);
        }
    }
    debug_assert_eq!(supervised.len(), seq.len());
    TaskSample { task, seq, supervised, diffusion_target }
}

/// Append answer tokens plus `<eos>`, marking each predicting position.
fn append_answer<T: Scalar>(
    seq: &mut HybridSequence<T>,
    supervised: &mut Vec<Option<usize>>,
    answer: &str,
    vocab: &Vocab,
) {
    for id in vocab.tokenize(answer) {
        supervised[seq.len() - 1] = Some(id);
        seq.push_text(id);
        supervised.push(None);
    }
    supervised[seq.len() - 1] = Some(vocab.eos());
    seq.push_text(vocab.eos());
    supervised.push(None);
}

/// A train template index different from the record's own.
fn other_train_template(record: &CorpusRecord, rng: &mut ChaCha8Rng) -> usize {
    let range = captions::TRAIN_TEMPLATES;
    let n = range.end - range.start;
    let mut idx = range.start + rng.gen_range(0..n);
    if idx == record.template {
        idx = range.start + (idx - range.start + 1) % n;
    }
    idx
}

/// Plain language-model sample for stage 0: `<bos> caption <eos>`, every
/// position supervised.
pub fn assemble_lm<T: Scalar>(record: &CorpusRecord, vocab: &Vocab) -> TaskSample<T> {
    let mut seq = HybridSequence::new();
    seq.push_text(vocab.bos());
    let mut supervised: Vec<Option<usize>> = vec![None];
    for id in vocab.tokenize(&record.caption) {
        supervised[seq.len() - 1] = Some(id);
        seq.push_text(id);
        supervised.push(None);
    }
    supervised[seq.len() - 1] = Some(vocab.eos());
    seq.push_text(vocab.eos());
    supervised.push(None);
    TaskSample { task: Task::PlainText, seq, supervised, diffusion_target: None }
}

// ── Loss composition ─────────────────────────────────────────────────────

/// What one batch contributed, for logging.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: f64,
    pub ce: f64,
    pub diffusion: f64,
    pub ce_positions: usize,
    pub diffusion_samples: usize,
}

/// Run the batch through the model, composing
/// `CE(masked next-token) + λ_diff · diffusion`, with per-sample terms
/// weighted so the batch behaves as one global mean. With `train` set,
/// gradients accumulate on the parameters (call `opt.step()` after).
pub fn compose_losses<T: Scalar>(
    model: &Model<T>,
    samples: &[TaskSample<T>],
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<BatchLoss> {
    let mut run = || -> Result<BatchLoss> {
        let total_ce_positions: usize = samples
            .iter()
            .map(|s| s.supervised.iter().filter(|t| t.is_some()).count())
            .sum();
        let n_diff = samples.iter().filter(|s| s.diffusion_target.is_some()).count();
        if total_ce_positions == 0 && n_diff == 0 {
            return Ok(BatchLoss {
                total: 0.0,
                ce: 0.0,
                diffusion: 0.0,
                ce_positions: 0,
                diffusion_samples: 0,
            });
        }
        let mut ce_acc = 0.0;
        let mut diff_acc = 0.0;
        for s in samples {
            let out = model.backbone.forward(&s.seq)?;
            let mut item_loss: Option<Tensor<T>> = None;

            let count = s.supervised.iter().filter(|t| t.is_some()).count();
            if count > 0 {
                let logits = out
                    .text_logits
                    .as_ref()
                    .ok_or_else(|| Error::contract("supervised sample without text rows"))?;
                let mut targets = vec![0usize; out.text_positions.len()];
                let mut mask = vec![false; out.text_positions.len()];
                for (row, &pos) in out.text_positions.iter().enumerate() {
                    if let Some(t) = s.supervised[pos] {
                        targets[row] = t;
                        mask[row] = true;
                    }
                }
                let ce = logits.cross_entropy_masked(&targets, &mask)?;
                // cross_entropy_masked returns this sample's mean; reweight
                // to the global mean over the batch's supervised positions.
                let w = T::from_f64(count as f64 / total_ce_positions as f64);
                ce_acc += ce.item().to_f64() * count as f64 / total_ce_positions as f64;
                item_loss = Some(ce.affine(w, T::ZERO));
            }

            if let Some(z0) = &s.diffusion_target {
                let hidden = out
                    .motion_hidden
                    .as_ref()
                    .ok_or_else(|| Error::contract("diffusion target without motion rows"))?;
                let h = model.backbone.cfg.holders;
                let rows: Vec<usize> = (hidden.rows() - h..hidden.rows()).collect();
                let states = model.backbone.motion_proj(&hidden.index_select_rows(&rows))?;
                let dl = model.head.loss(z0, &states, rng);
                let w = T::from_f64(1.0 / n_diff as f64);
                diff_acc += dl.item().to_f64() / n_diff as f64;
                let term = dl.affine(w, T::ZERO);
                item_loss = Some(match item_loss {
                    Some(l) => l.add(&term),
                    None => term,
                });
            }

            if train {
                if let Some(l) = item_loss {
                    l.backward();
                }
            }
        }
        Ok(BatchLoss {
            total: ce_acc + diff_acc,
            ce: ce_acc,
            diffusion: diff_acc,
            ce_positions: total_ce_positions,
            diffusion_samples: n_diff,
        })
    };
    if train {
        run()
    } else {
        crate::tensor::no_grad(run)
    }
}

// ── Freeze verification ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct FreezeReport {
    pub checked: usize,
    pub violations: Vec<String>,
}

impl FreezeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// After a backward pass: every frozen parameter must hold no gradient (or
/// an exactly zero one).
pub fn verify_freeze<T: Scalar>(params: &ParamMap<T>, spec: &StageSpec) -> FreezeReport {
    let mut checked = 0;
    let mut violations = Vec::new();
    for (name, t) in params.iter() {
        if !spec.is_frozen(name) {
            continue;
        }
        checked += 1;
        if let Some(g) = t.grad() {
            if g.iter().any(|v| v.to_f64() != 0.0) {
                violations.push(name.to_string());
            }
        }
    }
    FreezeReport { checked, violations }
}

// ── Stage driver ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    pub final_loss: f64,
    pub best_val: f64,
}

struct StageData<T: Scalar> {
    train: Vec<CorpusRecord>,
    val: Vec<CorpusRecord>,
    train_latents: HashMap<String, CachedLatent<T>>,
    val_latents: HashMap<String, CachedLatent<T>>,
    vocab: Vocab,
    vae_latent_dim: Option<usize>,
}

fn load_stage_data<T: Element>(
    corpus_dir: &Path,
    vae_path: Option<&Path>,
) -> Result<StageData<T>> {
    let train = corpus::load_split(corpus_dir, "train")?;
    let val = corpus::load_split(corpus_dir, "val")?;
    let vocab = Vocab::load(&corpus_dir.join("vocab.json"))?;
    let (train_latents, val_latents, vae_latent_dim) = match vae_path {
        None => (HashMap::new(), HashMap::new(), None),
        Some(p) => {
            let (vae, stats): (MotionVae<T>, CorpusStats) = MotionVae::load(p)
                .map_err(|e| Error::config(format!("VAE checkpoint required: {}", e.message)))?;
            let dim = vae.cfg.latent_dim;
            (
                build_latent_cache(&vae, &stats, &train)?,
                build_latent_cache(&vae, &stats, &val)?,
                Some(dim),
            )
        }
    };
    Ok(StageData { train, val, train_latents, val_latents, vocab, vae_latent_dim })
}

fn draw_task(mixture: &[(Task, f64)], rng: &mut ChaCha8Rng) -> Task {
    let total: f64 = mixture.iter().map(|(_, w)| w).sum();
    let mut u: f64 = rng.gen_range(0.0..total);
    for (t, w) in mixture {
        if u < *w {
            return *t;
        }
        u -= w;
    }
    mixture.last().expect("mixture must not be empty").0
}

fn sample_batch<T: Scalar>(
    spec: &StageSpec,
    data: &StageData<T>,
    split: &[CorpusRecord],
    latents: &HashMap<String, CachedLatent<T>>,
    holders: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TaskSample<T>> {
    (0..batch)
        .map(|_| {
            let r = &split[rng.gen_range(0..split.len())];
            if spec.mixture.is_empty() {
                assemble_lm(r, &data.vocab)
            } else {
                let task = draw_task(&spec.mixture, rng);
                let l = latents.get(&r.id).expect("latent cache covers every record");
                assemble(task, r, l, &data.vocab, holders, rng)
            }
        })
        .collect()
}

/// Validation loss over a deterministic sample set.
fn val_loss<T: Scalar>(
    model: &Model<T>,
    spec: &StageSpec,
    data: &StageData<T>,
    holders: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng_for(seed, "val-assembly");
    let samples =
        sample_batch(spec, data, &data.val, &data.val_latents, holders, n, &mut rng);
    let mut loss_rng = rng_for(seed, "val-loss");
    Ok(compose_losses(model, &samples, &mut loss_rng, false)?.total)
}

/// Plain text-LM cross-entropy on a split's captions — the language
/// retention probe.
pub fn text_val_ce<T: Scalar>(model: &Model<T>, records: &[CorpusRecord]) -> Result<f64> {
    let samples: Vec<TaskSample<T>> =
        records.iter().map(|r| assemble_lm(r, &model.backbone.vocab)).collect();
    let mut rng = rng_for(0, "text-ce");
    Ok(compose_losses(model, &samples, &mut rng, false)?.ce)
}

/// Run one training stage end to end: loads prerequisites, freezes groups,
/// iterates mixture batches, logs metrics, and writes the best-validation
/// checkpoint to `out_path`.
pub fn run_stage<T: Element>(
    stage: u8,
    corpus_dir: &Path,
    vae_path: Option<&Path>,
    prev_model: Option<&Path>,
    out_path: &Path,
    metrics_path: &Path,
    cfg: &Config,
    verbose: bool,
) -> Result<StageReport> {
    let spec = stage_spec(stage, &cfg.train)?;
    if stage > 0 && vae_path.is_none() {
        return Err(Error::config(format!("stage {stage} requires a trained VAE checkpoint")));
    }
    let data = load_stage_data::<T>(corpus_dir, if stage > 0 { vae_path } else { None })?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::config("corpus splits must be non-empty".to_string()));
    }
    if let Some(d) = data.vae_latent_dim {
        if d != cfg.vae.latent_dim {
            return Err(Error::config(format!(
                "VAE checkpoint has latent dim {d}, model config expects {}",
                cfg.vae.latent_dim
            )));
        }
    }

    let model: Model<T> = match (stage, prev_model) {
        (0, _) => {
            let mut rng = rng_for(cfg.train.seed, "model-init");
            Model::new(cfg, data.vocab.clone(), &mut rng)?
        }
        (_, None) => {
            return Err(Error::config(format!(
                "stage {stage} requires the stage {} checkpoint (--from)",
                stage - 1
            )))
        }
        (_, Some(p)) => {
            let (m, prev_stage) = Model::load(p)?;
            if prev_stage + 1 != stage {
                return Err(Error::config(format!(
                    "checkpoint {} is from stage {prev_stage}; stage {stage} needs stage {}",
                    p.display(),
                    stage - 1
                )));
            }
            m
        }
    };

    let params = model.params();
    spec.apply_freeze(&params);
    let adamw = AdamWConfig {
        weight_decay: cfg.train.weight_decay,
        grad_clip: cfg.train.grad_clip,
        warmup_steps: ((spec.steps as f64 * cfg.train.warmup_frac) as u64).max(1),
        ..Default::default()
    };
    let (lr, lr_head) = (cfg.train.lr, cfg.train.lr_head);
    let mut opt = AdamW::new(&params, adamw, move |name| {
        if name.starts_with("head.") {
            lr_head
        } else {
            lr
        }
    });

    let mut csv = open_metrics(metrics_path)?;
    let holders = cfg.backbone.holders;
    let mut best_val = f64::INFINITY;
    let mut last = BatchLoss { total: 0.0, ce: 0.0, diffusion: 0.0, ce_positions: 0, diffusion_samples: 0 };
    for step in 0..spec.steps {
        let mut rng = step_rng(cfg.train.seed, stage as u32 + 1, step as u64, "batch");
        let samples = sample_batch(
            &spec,
            &data,
            &data.train,
            &data.train_latents,
            holders,
            cfg.train.batch,
            &mut rng,
        );
        let report = compose_losses(&model, &samples, &mut rng, true)?;
        if report.ce_positions == 0 && report.diffusion_samples == 0 {
            eprintln!("[stage {stage}] warning: skipping batch {step} with no supervision");
            continue;
        }
        let freeze = verify_freeze(&params, &spec);
        if !freeze.passed() {
            return Err(Error::contract(format!(
                "frozen parameters received gradients at step {step}: {}",
                freeze.violations.join(", ")
            )));
        }
        opt.step()?;
        last = report;

        let eval_now = (step + 1) % cfg.train.eval_every == 0 || step + 1 == spec.steps;
        if eval_now {
            let v = val_loss(&model, &spec, &data, holders, 64, cfg.train.seed ^ 0x5eed)?;
            if v < best_val {
                best_val = v;
                model.save(out_path, stage, &spec.frozen_group_names())?;
            }
            writeln!(
                csv,
                "{},{:.6},{:.6},{:.6},{:.6}",
                step + 1,
                report.ce,
                report.diffusion,
                report.total,
                v
            )?;
            if verbose {
                eprintln!(
                    "[stage {stage}] step {}/{} loss {:.4} (ce {:.4} diff {:.4}) val {v:.4}",
                    step + 1,
                    spec.steps,
                    report.total,
                    report.ce,
                    report.diffusion
                );
            }
        }
    }
    Ok(StageReport { stage, steps: spec.steps, final_loss: last.total, best_val })
}

fn open_metrics(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "step,ce,diffusion,total,val_total")?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Payload;
    use crate::config::VaeConfig;
    use crate::corpus::generate_corpus;
    use crate::vae::train_vae;

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.backbone.layers = 2;
        cfg.backbone.model_dim = 32;
        cfg.backbone.heads = 2;
        cfg.backbone.ffn_dim = 64;
        cfg.backbone.holders = 4;
        cfg.vae.latent_dim = 8;
        cfg.diffusion.width = 32;
        cfg.diffusion.blocks = 1;
        cfg.diffusion.cond_dim = 16;
        cfg.diffusion.time_dim = 16;
        cfg.diffusion.timesteps = 50;
        cfg.diffusion.sample_steps = 10;
        cfg.diffusion.beta_start = 0.004;
        cfg.diffusion.beta_end = 0.45;
        cfg.train.batch = 4;
        cfg
    }

    fn fake_record(i: usize) -> CorpusRecord {
        let class = corpus::CLASS_NAMES[i % corpus::CLASS_NAMES.len()];
        let params = crate::corpus::classes::ClipParams {
            speed: 1.0,
            amplitude: 1.0,
            direction: crate::corpus::classes::allowed_directions(class)[0],
        };
        CorpusRecord {
            id: format!("r{i}"),
            class: class.to_string(),
            caption: captions::caption_for(class, &params, i % 4),
            template: i % 4,
            params,
            fps: corpus::FPS,
            motion: vec![vec![0.0; corpus::DIMS]; 16],
        }
    }

    fn fake_latents(latent_dim: usize, seed: u64) -> CachedLatent<f64> {
        let mut rng = rng_for(seed, "fl");
        CachedLatent {
            mu: crate::rng::normal_vec(&mut rng, latent_dim),
            logvar: vec![-2.0; latent_dim],
            prefix_mu: crate::rng::normal_vec(&mut rng, latent_dim),
        }
    }

    fn tiny_model(cfg: &Config, seed: u64) -> Model<f64> {
        Model::new(cfg, Vocab::standard(), &mut rng_for(seed, "m")).unwrap()
    }

    #[test]
    fn stage_specs_match_the_schedule() {
        let t = TrainConfig::default();
        let s1 = stage_spec(1, &t).unwrap();
        assert_eq!(s1.mixture, vec![(Task::T2m, 1.0)]);
        assert!(s1.is_frozen("backbone.text.emb"));
        assert!(s1.is_frozen("backbone.text.l0.attn.wq.weight"));
        assert!(!s1.is_frozen("backbone.text.special_emb"));
        assert!(!s1.is_frozen("backbone.motion.l0.ffn.up.weight"));
        assert!(!s1.is_frozen("head.denoiser.in_proj.weight"));

        let s2 = stage_spec(2, &t).unwrap();
        let tasks: Vec<Task> = s2.mixture.iter().map(|(t, _)| *t).collect();
        assert_eq!(tasks, vec![Task::T2m, Task::M2t, Task::Predict]);
        assert!(s2.is_frozen("backbone.text.pos"));

        let s3 = stage_spec(3, &t).unwrap();
        assert_eq!(s3.mixture.len(), 4);
        assert!(!s3.is_frozen("backbone.text.emb"));

        assert!(stage_spec(4, &t).is_err());

        let s0 = stage_spec(0, &t).unwrap();
        assert!(s0.mixture.is_empty());
        assert!(s0.is_frozen("head.null_cond"));
        assert!(s0.is_frozen("backbone.motion.holder_emb"));
        assert!(!s0.is_frozen("backbone.text.emb"));
    }

    #[test]
    fn assembled_sequences_follow_the_boundary_contract() {
        let cfg = tiny_config();
        let vocab = Vocab::standard();
        let lat = fake_latents(cfg.vae.latent_dim, 1);
        let mut rng = rng_for(2, "t");
        for (i, task) in
            [Task::T2m, Task::M2t, Task::Predict, Task::PlainText].iter().enumerate()
        {
            for round in 0..20 {
                let r = fake_record(i * 20 + round);
                let s = assemble(*task, &r, &lat, &vocab, cfg.backbone.holders, &mut rng);
                assert_eq!(s.supervised.len(), s.seq.len());
                // No supervised target may be <eom> or <mholder_out>, and
                // supervised positions must be text rows.
                for (pos, sup) in s.supervised.iter().enumerate() {
                    if let Some(t) = sup {
                        assert_ne!(*t, vocab.eom(), "{}: <eom> must never be a target", task.name());
                        assert_ne!(*t, vocab.mholder_out());
                        assert_eq!(s.seq.modality(pos), 0, "supervised rows are text rows");
                    }
                }
                let n_sup = s.supervised.iter().filter(|t| t.is_some()).count();
                match task {
                    Task::T2m | Task::Predict => {
                        // Exactly one CE position: the <som> target.
                        assert_eq!(n_sup, 1, "{}", task.name());
                        let som_targets: Vec<usize> =
                            s.supervised.iter().flatten().cloned().collect();
                        assert_eq!(som_targets, vec![vocab.som()]);
                        assert!(s.diffusion_target.is_some());
                        // Tail: <som> holders… <eom>.
                        let n = s.seq.len();
                        assert_eq!(s.seq.token_at(n - 1), Some(vocab.eom()));
                        for k in 0..cfg.backbone.holders {
                            assert!(matches!(
                                s.seq.items()[n - 2 - k],
                                Payload::HolderOut
                            ));
                        }
                        assert_eq!(
                            s.seq.token_at(n - 2 - cfg.backbone.holders),
                            Some(vocab.som())
                        );
                    }
                    Task::M2t => {
                        // Caption tokens + <eos>.
                        let cap_len = vocab.tokenize(&r.caption).len();
                        assert_eq!(n_sup, cap_len + 1);
                        assert!(s.diffusion_target.is_none());
                        // The motion row is one item, followed by <eom>.
                        let m = s.seq.motion_positions();
                        assert_eq!(m.len(), 1);
                        assert_eq!(s.seq.token_at(m[0] + 1), Some(vocab.eom()));
                    }
                    Task::PlainText => {
                        assert!(n_sup >= 2);
                        assert!(s.diffusion_target.is_none());
                        assert!(s.seq.motion_positions().is_empty());
                        // The answer must be a different template's caption.
                        let full = (0..s.seq.len())
                            .filter_map(|p| s.seq.token_at(p))
                            .collect::<Vec<_>>();
                        let text = vocab.detokenize(&full);
                        assert!(text.contains(&r.caption), "prompt keeps the original caption");
                    }
                }
            }
        }
    }

    #[test]
    fn m2t_batches_leave_the_diffusion_head_untouched() {
        let cfg = tiny_config();
        let model = tiny_model(&cfg, 3);
        let vocab = model.backbone.vocab.clone();
        let lat = fake_latents(cfg.vae.latent_dim, 4);
        let mut rng = rng_for(5, "t");
        let samples: Vec<TaskSample<f64>> = (0..4)
            .map(|i| assemble(Task::M2t, &fake_record(i), &lat, &vocab, 4, &mut rng))
            .collect();
        let report = compose_losses(&model, &samples, &mut rng, true).unwrap();
        assert_eq!(report.diffusion, 0.0, "no motion output ⇒ no diffusion term");
        assert_eq!(report.diffusion_samples, 0);
        assert!(report.ce > 0.0);
        // Direct gradient inspection: every diffusion-head parameter.
        let mut head_params = ParamMap::new();
        model.head.collect("head", &mut head_params);
        for (name, t) in head_params.iter() {
            assert!(t.grad().is_none(), "{name} must hold no gradient after an M2T batch");
        }
    }

    #[test]
    fn eom_target_positions_get_zero_gradient_under_the_mask_rule() {
        // Synthetic: text row whose next token is <eom> must be masked out,
        // so its logits row receives exactly zero gradient.
        let cfg = tiny_config();
        let model = tiny_model(&cfg, 6);
        let v = &model.backbone.vocab;
        let ids = [v.bos(), 0, v.eom(), 1, v.eos()];
        let seq = HybridSequence::<f64>::from_text(&ids);
        // Supervision mimicking the assembler's rule: position 1 targets
        // <eom> (masked OFF), position 3 targets <eos> (ON).
        let supervised = vec![None, None, None, Some(v.eos()), None];
        let out = model.backbone.forward(&seq).unwrap();
        let logits = out.text_logits.clone().unwrap();
        let mut targets = vec![0usize; 5];
        let mut mask = vec![false; 5];
        for (row, &pos) in out.text_positions.iter().enumerate() {
            if let Some(t) = supervised[pos] {
                targets[row] = t;
                mask[row] = true;
            }
        }
        let ce = logits.cross_entropy_masked(&targets, &mask).unwrap();
        ce.backward();
        let g = logits.grad().expect("logits gradient is retained");
        let vlen = v.len();
        for row in [0usize, 1, 2, 4] {
            assert!(
                g[row * vlen..(row + 1) * vlen].iter().all(|x| *x == 0.0),
                "masked-off row {row} must get zero gradient"
            );
        }
        assert!(g[3 * vlen..4 * vlen].iter().any(|x| *x != 0.0));
    }

    #[test]
    fn freeze_verification_catches_a_planted_violation() {
        let cfg = tiny_config();
        let model = tiny_model(&cfg, 7);
        let params = model.params();
        let spec = stage_spec(1, &cfg.train).unwrap();
        spec.apply_freeze(&params);

        let vocab = model.backbone.vocab.clone();
        let lat = fake_latents(cfg.vae.latent_dim, 8);
        let mut rng = rng_for(9, "t");
        let samples: Vec<TaskSample<f64>> = (0..2)
            .map(|i| assemble(Task::T2m, &fake_record(i), &lat, &vocab, 4, &mut rng))
            .collect();
        compose_losses(&model, &samples, &mut rng, true).unwrap();
        let report = verify_freeze(&params, &spec);
        assert!(report.passed(), "violations: {:?}", report.violations);
        assert!(report.checked > 10);
        params.zero_grads();

        // Plant a violation: unfreeze one text parameter behind the spec's
        // back and run another batch.
        params.set_trainable(|n| n == "backbone.text.emb", true);
        let samples: Vec<TaskSample<f64>> = (0..2)
            .map(|i| assemble(Task::T2m, &fake_record(i), &lat, &vocab, 4, &mut rng))
            .collect();
        compose_losses(&model, &samples, &mut rng, true).unwrap();
        let report = verify_freeze(&params, &spec);
        assert_eq!(report.violations, vec!["backbone.text.emb".to_string()]);
    }

    #[test]
    fn special_token_rows_learn_while_the_base_table_stays_fixed() {
        let cfg = tiny_config();
        let model = tiny_model(&cfg, 10);
        let params = model.params();
        let spec = stage_spec(1, &cfg.train).unwrap();
        spec.apply_freeze(&params);
        let before_base = params.get("backbone.text.emb").unwrap().to_vec();
        let before_special = params.get("backbone.text.special_emb").unwrap().to_vec();

        let vocab = model.backbone.vocab.clone();
        let lat = fake_latents(cfg.vae.latent_dim, 11);
        let mut opt = AdamW::new(&params, AdamWConfig::default(), |_| 1e-3);
        let mut rng = rng_for(12, "t");
        for i in 0..3 {
            let samples: Vec<TaskSample<f64>> = (0..2)
                .map(|k| assemble(Task::T2m, &fake_record(i * 2 + k), &lat, &vocab, 4, &mut rng))
                .collect();
            compose_losses(&model, &samples, &mut rng, true).unwrap();
            opt.step().unwrap();
        }
        let after_base = params.get("backbone.text.emb").unwrap().to_vec();
        let after_special = params.get("backbone.text.special_emb").unwrap().to_vec();
        assert_eq!(before_base, after_base, "base embedding must stay bitwise fixed");
        assert_ne!(before_special, after_special, "special rows must move");
    }

    #[test]
    fn training_is_reproducible_and_resumable() {
        let cfg = tiny_config();
        let vocab = Vocab::standard();
        let lat = fake_latents(cfg.vae.latent_dim, 13);
        let records: Vec<CorpusRecord> = (0..8).map(fake_record).collect();
        let spec = stage_spec(1, &cfg.train).unwrap();

        let run = |from: usize, to: usize, model: &Model<f64>, opt: &mut AdamW<f64>| -> Vec<f64> {
            let mut losses = Vec::new();
            for step in from..to {
                let mut rng = step_rng(99, 1, step as u64, "batch");
                let samples: Vec<TaskSample<f64>> = (0..2)
                    .map(|_| {
                        let r = &records[rng.gen_range(0..records.len())];
                        assemble(Task::T2m, r, &lat, &vocab, 4, &mut rng)
                    })
                    .collect();
                let rep = compose_losses(model, &samples, &mut rng, true).unwrap();
                opt.step().unwrap();
                losses.push(rep.total);
            }
            losses
        };

        // Straight 12-step run.
        let model_a = tiny_model(&cfg, 14);
        let params_a = model_a.params();
        spec.apply_freeze(&params_a);
        let mut opt_a = AdamW::new(&params_a, AdamWConfig::default(), |_| 1e-3);
        let mut losses_a = run(0, 6, &model_a, &mut opt_a);
        losses_a.extend(run(6, 12, &model_a, &mut opt_a));

        // Same run, checkpointed at step 6 and resumed in a fresh process
        // image (fresh model + optimizer, state loaded from containers).
        let dir = tempfile::tempdir().unwrap();
        let model_b = tiny_model(&cfg, 14);
        let params_b = model_b.params();
        spec.apply_freeze(&params_b);
        let mut opt_b = AdamW::new(&params_b, AdamWConfig::default(), |_| 1e-3);
        let first = run(0, 6, &model_b, &mut opt_b);
        model_b.save(&dir.path().join("m.bin"), 1, &[]).unwrap();
        opt_b.state_container().save(&dir.path().join("opt.bin")).unwrap();

        let (model_c, _) = Model::<f64>::load(&dir.path().join("m.bin")).unwrap();
        let params_c = model_c.params();
        spec.apply_freeze(&params_c);
        let mut opt_c = AdamW::new(&params_c, AdamWConfig::default(), |_| 1e-3);
        opt_c.load_state(&Container::load(&dir.path().join("opt.bin")).unwrap()).unwrap();
        let second = run(6, 12, &model_c, &mut opt_c);

        let losses_b: Vec<f64> = first.into_iter().chain(second).collect();
        for (a, b) in losses_a.iter().zip(&losses_b) {
            assert!((a - b).abs() < 1e-6, "trajectories diverged: {a} vs {b}");
        }
    }

    #[test]
    fn run_stage_demands_its_prerequisites() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        generate_corpus(&corpus_dir, 40, 42).unwrap();
        let mut cfg = tiny_config();
        cfg.train.stage1_steps = 2;

        // Stage 1 without a VAE checkpoint.
        let err = run_stage::<f64>(
            1,
            &corpus_dir,
            None,
            None,
            &dir.path().join("m.bin"),
            &dir.path().join("metrics.csv"),
            &cfg,
            false,
        )
        .unwrap_err();
        assert_eq!(err.kind, crate::ErrorKind::Config);

        // Stage 1 with a VAE but no stage-0 checkpoint.
        let vae_path = dir.path().join("vae.bin");
        let vae_cfg = VaeConfig {
            latent_dim: 8,
            model_dim: 32,
            layers: 1,
            heads: 2,
            ffn_dim: 32,
            steps: 2,
            batch: 2,
            ..Default::default()
        };
        train_vae::<f64>(&corpus_dir, &vae_path, &vae_cfg, 1, false).unwrap();
        let err = run_stage::<f64>(
            1,
            &corpus_dir,
            Some(&vae_path),
            None,
            &dir.path().join("m.bin"),
            &dir.path().join("metrics.csv"),
            &cfg,
            false,
        )
        .unwrap_err();
        assert_eq!(err.kind, crate::ErrorKind::Config);
        assert!(err.message.contains("stage 0"), "{}", err.message);
    }

    #[test]
    fn a_short_stage_pipeline_trains_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        generate_corpus(&corpus_dir, 40, 42).unwrap();
        let mut cfg = tiny_config();
        cfg.vae.latent_dim = 8;
        cfg.train.stage0_steps = 4;
        cfg.train.stage1_steps = 4;
        cfg.train.eval_every = 2;
        cfg.train.batch = 2;

        let vae_path = dir.path().join("vae.bin");
        let vae_cfg = VaeConfig {
            latent_dim: 8,
            model_dim: 32,
            layers: 1,
            heads: 2,
            ffn_dim: 32,
            steps: 2,
            batch: 2,
            ..Default::default()
        };
        train_vae::<f64>(&corpus_dir, &vae_path, &vae_cfg, 1, false).unwrap();

        let m0 = dir.path().join("stage0.bin");
        let r0 = run_stage::<f64>(
            0,
            &corpus_dir,
            None,
            None,
            &m0,
            &dir.path().join("metrics0.csv"),
            &cfg,
            false,
        )
        .unwrap();
        assert_eq!(r0.stage, 0);
        assert!(m0.exists());
        let (_, stage) = Model::<f64>::load(&m0).unwrap();
        assert_eq!(stage, 0);

        let m1 = dir.path().join("stage1.bin");
        let r1 = run_stage::<f64>(
            1,
            &corpus_dir,
            Some(&vae_path),
            Some(&m0),
            &m1,
            &dir.path().join("metrics1.csv"),
            &cfg,
            false,
        )
        .unwrap();
        assert!(r1.best_val.is_finite());
        assert!(m1.exists());

        // Chaining stage 2 from stage 0 must fail the provenance check.
        let err = run_stage::<f64>(
            2,
            &corpus_dir,
            Some(&vae_path),
            Some(&m0),
            &dir.path().join("m2.bin"),
            &dir.path().join("metrics2.csv"),
            &cfg,
            false,
        )
        .unwrap_err();
        assert_eq!(err.kind, crate::ErrorKind::Config);

        // Metrics CSV exists with a header and at least one row.
        let text = std::fs::read_to_string(dir.path().join("metrics1.csv")).unwrap();
        assert!(text.starts_with("step,ce,diffusion,total,val_total"));
        assert!(text.lines().count() >= 2);
    }
}
