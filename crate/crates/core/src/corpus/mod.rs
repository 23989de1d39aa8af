//! Synthetic motion–caption corpus.
//!
//! Clips are analytic trajectories (see [`classes`]) sampled at 20 fps over
//! 16–64 frames with small Gaussian jitter; captions come from per-class
//! templates ([`captions`]); the word-level vocabulary and the instruction
//! phrasings live in [`tokenizer`] and [`instruction`]. Generation is fully
//! deterministic in the corpus seed: records are stratified over the ten
//! classes round-robin, split 80/10/10 within each class, and written as
//! JSONL plus sidecar `vocab.json` / `stats.json` files.

pub mod captions;
pub mod classes;
pub mod instruction;
pub mod tokenizer;

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use captions::{caption_for, EVAL_TEMPLATES, N_TEMPLATES, TRAIN_TEMPLATES};
pub use classes::{allowed_directions, pose_at, ClipParams, Direction, CLASS_NAMES, DIMS};
pub use instruction::Task;
pub use tokenizer::Vocab;

use crate::error::{Error, Result};
use crate::rng::{rng_for, splitmix64};

pub const FPS: u32 = 20;
pub const MIN_FRAMES: usize = 16;
pub const MAX_FRAMES: usize = 64;
pub const JITTER_STD: f64 = 0.01;

// ── Records ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub class: String,
    pub caption: String,
    /// Which caption template rendered `caption` (train and eval records use
    /// disjoint template ranges).
    pub template: usize,
    pub params: ClipParams,
    pub fps: u32,
    /// Frames × 15 joint coordinates.
    pub motion: Vec<Vec<f64>>,
}

impl CorpusRecord {
    pub fn frames(&self) -> usize {
        self.motion.len()
    }

    /// Row-major [frames × DIMS] copy.
    pub fn flat_motion(&self) -> Vec<f64> {
        self.motion.iter().flatten().copied().collect()
    }
}

// ── Clip generation ──────────────────────────────────────────────────────

/// Noise-free trajectory for a class at the given parameters.
pub fn clean_clip(class: &str, params: &ClipParams, frames: usize) -> Result<Vec<Vec<f64>>> {
    check_frames(frames)?;
    (0..frames)
        .map(|f| pose_at(class, params, f as f64 / FPS as f64).map(|p| p.to_vec()))
        .collect()
}

/// Trajectory plus seeded Gaussian jitter. Equal inputs give identical
/// output; the jitter stream depends only on `seed`.
pub fn generate_clip(
    class: &str,
    params: &ClipParams,
    frames: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut clip = clean_clip(class, params, frames)?;
    let mut rng = rng_for(seed, "clip-jitter");
    let noise = Normal::new(0.0, JITTER_STD).expect("valid jitter std");
    for row in clip.iter_mut() {
        for v in row.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(clip)
}

fn check_frames(frames: usize) -> Result<()> {
    if !(MIN_FRAMES..=MAX_FRAMES).contains(&frames) {
        return Err(Error::contract(format!(
            "clip length {frames} outside [{MIN_FRAMES}, {MAX_FRAMES}]"
        )));
    }
    Ok(())
}

// ── Per-dimension statistics ─────────────────────────────────────────────

/// Per-dimension mean/std over the train split, used to standardize motion
/// before it reaches any model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CorpusStats {
    pub fn compute(records: &[CorpusRecord]) -> Self {
        let mut mean = vec![0.0; DIMS];
        let mut count = 0usize;
        for r in records {
            for row in &r.motion {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            count += r.frames();
        }
        let n = count.max(1) as f64;
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; DIMS];
        for r in records {
            for row in &r.motion {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(1e-6)).collect();
        Self { mean, std }
    }

    /// Standardize a row-major [frames × DIMS] buffer in place.
    pub fn standardize(&self, flat: &mut [f64]) {
        for (i, v) in flat.iter_mut().enumerate() {
            let d = i % DIMS;
            *v = (*v - self.mean[d]) / self.std[d];
        }
    }

    /// Inverse of [`CorpusStats::standardize`].
    pub fn destandardize(&self, flat: &mut [f64]) {
        for (i, v) in flat.iter_mut().enumerate() {
            let d = i % DIMS;
            *v = *v * self.std[d] + self.mean[d];
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::config(format!("cannot read stats {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

// ── Corpus generation ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

/// Generate `n` records under `seed` and write `train.jsonl`, `val.jsonl`,
/// `test.jsonl`, `vocab.json`, and `stats.json` into `out_dir`. Classes are
/// assigned round-robin and each class is split 80/10/10 internally, so
/// every split covers every class (given enough records). Byte-identical
/// output for equal `(n, seed)`.
pub fn generate_corpus(out_dir: &Path, n: usize, seed: u64) -> Result<CorpusSummary> {
    if n < 30 {
        return Err(Error::config(format!(
            "corpus size {n} too small: need at least 3 records per class per split"
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    // Split assignment: within each class cohort, shuffle ordinals and cut
    // 80/10/10. Records are then generated in id order with a per-record rng.
    let mut split_of = vec![0u8; n]; // 0 train, 1 val, 2 test
    for (c, class) in CLASS_NAMES.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|i| i % CLASS_NAMES.len() == c).collect();
        let mut order: Vec<usize> = (0..members.len()).collect();
        let mut rng = rng_for(seed, &format!("split:{class}"));
        // Fisher–Yates so the cut points, not the rng call count, decide.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let k = members.len();
        let n_tr = k * 8 / 10;
        let n_va = (k - n_tr + 1) / 2;
        for (pos, &ord) in order.iter().enumerate() {
            split_of[members[ord]] =
                if pos < n_tr { 0 } else if pos < n_tr + n_va { 1 } else { 2 };
        }
    }

    let mut buckets: [Vec<CorpusRecord>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..n {
        let class = CLASS_NAMES[i % CLASS_NAMES.len()];
        let rec_seed = splitmix64(seed ^ splitmix64(i as u64 + 1));
        let mut rng = rng_for(rec_seed, "record");
        let frames = rng.gen_range(MIN_FRAMES..=MAX_FRAMES);
        let dirs = allowed_directions(class);
        let params = ClipParams {
            speed: rng.gen_range(0.6..1.8),
            amplitude: rng.gen_range(0.5..1.5),
            direction: dirs[rng.gen_range(0..dirs.len())],
        };
        let range = if split_of[i] == 0 { TRAIN_TEMPLATES } else { EVAL_TEMPLATES };
        let template = rng.gen_range(range);
        let record = CorpusRecord {
            id: format!("rec_{i:05}"),
            class: class.to_string(),
            caption: caption_for(class, &params, template),
            template,
            params,
            fps: FPS,
            motion: generate_clip(class, &params, frames, rec_seed)?,
        };
        buckets[split_of[i] as usize].push(record);
    }

    let stats = CorpusStats::compute(&buckets[0]);
    stats.save(&out_dir.join("stats.json"))?;
    Vocab::standard().save(&out_dir.join("vocab.json"))?;
    for (bucket, name) in buckets.iter().zip(["train", "val", "test"]) {
        write_jsonl(&out_dir.join(format!("{name}.jsonl")), bucket)?;
    }

    Ok(CorpusSummary {
        n_train: buckets[0].len(),
        n_val: buckets[1].len(),
        n_test: buckets[2].len(),
        vocab_size: Vocab::standard().len(),
        seed,
    })
}

fn write_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load one split (`"train"`, `"val"`, `"test"`) from a corpus directory.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<CorpusRecord>> {
    let path = dir.join(format!("{split}.jsonl"));
    let file = std::fs::File::open(&path)
        .map_err(|e| Error::config(format!("cannot open split {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| {
            Error::config(format!("bad record at {}:{}: {e}", path.display(), ln + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn corpus_generation_is_byte_identical_for_equal_seeds() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_corpus(d1.path(), 60, 99).unwrap();
        generate_corpus(d2.path(), 60, 99).unwrap();
        for name in ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.json", "stats.json"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
        let d3 = tempfile::tempdir().unwrap();
        generate_corpus(d3.path(), 60, 100).unwrap();
        let a = std::fs::read(d1.path().join("train.jsonl")).unwrap();
        let b = std::fs::read(d3.path().join("train.jsonl")).unwrap();
        assert_ne!(a, b, "different seeds must differ");
    }

    #[test]
    fn splits_are_disjoint_and_stratified() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate_corpus(dir.path(), 100, 7).unwrap();
        assert_eq!((summary.n_train, summary.n_val, summary.n_test), (80, 10, 10));
        let mut seen = HashSet::new();
        for split in ["train", "val", "test"] {
            let recs = load_split(dir.path(), split).unwrap();
            let mut by_class: HashMap<String, usize> = HashMap::new();
            for r in &recs {
                assert!(seen.insert(r.id.clone()), "duplicate id {}", r.id);
                *by_class.entry(r.class.clone()).or_default() += 1;
            }
            assert_eq!(by_class.len(), 10, "{split} must cover all classes");
            let expect = if split == "train" { 8 } else { 1 };
            for (class, k) in by_class {
                assert_eq!(k, expect, "{split}/{class}");
            }
        }
    }

    #[test]
    fn record_invariants_hold() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(dir.path(), 60, 3).unwrap();
        for split in ["train", "val", "test"] {
            for r in load_split(dir.path(), split).unwrap() {
                assert!((MIN_FRAMES..=MAX_FRAMES).contains(&r.frames()));
                assert!(CLASS_NAMES.contains(&r.class.as_str()));
                assert_eq!(r.fps, FPS);
                assert!(r.caption.contains(&r.class), "{} ∉ '{}'", r.class, r.caption);
                for row in &r.motion {
                    assert_eq!(row.len(), DIMS);
                    assert!(row.iter().all(|v| v.is_finite()));
                }
                let in_train_range = TRAIN_TEMPLATES.contains(&r.template);
                assert_eq!(in_train_range, split == "train", "{split} template {}", r.template);
            }
        }
    }

    #[test]
    fn clip_generation_depends_only_on_inputs() {
        let p = ClipParams { speed: 1.1, amplitude: 0.9, direction: Direction::Left };
        let a = generate_clip("kick", &p, 24, 42).unwrap();
        let b = generate_clip("kick", &p, 24, 42).unwrap();
        assert_eq!(a, b);
        // A different jitter seed moves every value, but only slightly.
        let c = generate_clip("kick", &p, 24, 43).unwrap();
        let mut max_diff: f64 = 0.0;
        for (ra, rc) in a.iter().zip(&c) {
            for (va, vc) in ra.iter().zip(rc) {
                max_diff = max_diff.max((va - vc).abs());
            }
        }
        assert!(max_diff > 0.0 && max_diff < 0.15, "max jitter delta {max_diff}");
    }

    #[test]
    fn out_of_range_lengths_are_rejected() {
        let p = ClipParams { speed: 1.0, amplitude: 1.0, direction: Direction::Forward };
        assert!(generate_clip("walk", &p, 15, 1).is_err());
        assert!(generate_clip("walk", &p, 65, 1).is_err());
        assert!(generate_clip("walk", &p, 16, 1).is_ok());
    }

    #[test]
    fn standardized_train_frames_have_unit_moments() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(dir.path(), 120, 5).unwrap();
        let train = load_split(dir.path(), "train").unwrap();
        let stats = CorpusStats::load(&dir.path().join("stats.json")).unwrap();
        let mut all: Vec<f64> = Vec::new();
        for r in &train {
            let mut flat = r.flat_motion();
            stats.standardize(&mut flat);
            all.extend(flat);
        }
        let frames = all.len() / DIMS;
        for d in 0..DIMS {
            let col: Vec<f64> = (0..frames).map(|f| all[f * DIMS + d]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / col.len() as f64;
            assert!(mean.abs() < 1e-9, "dim {d} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "dim {d} var {var}");
        }
    }
}
