//! Caption-quality metrics: BLEU with modified n-gram precision and brevity
//! penalty, and ROUGE-L as an LCS F-measure.

use std::collections::HashMap;

/// BLEU@n for a candidate against one or more references, n ∈ {1..=4}.
/// Geometric mean of clipped n-gram precisions times the brevity penalty;
/// any zero precision zeroes the score (no smoothing at this scale).
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> f64 {
    assert!((1..=4).contains(&max_n), "BLEU order must be 1..=4");
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<Vec<&str>> = references.iter().map(|r| r.split_whitespace().collect()).collect();
    if cand.is_empty() || refs.iter().all(|r| r.is_empty()) {
        return 0.0;
    }

    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let p = modified_precision(&cand, &refs, n);
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / max_n as f64;
    }

    // Brevity penalty against the reference length closest to the candidate
    // (ties go to the shorter reference).
    let c = cand.len() as f64;
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as f64 - c).abs() * 1e6) as u64 * 2 + u64::from(l as f64 > c))
        .unwrap_or(0) as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

/// Clipped n-gram precision: each candidate n-gram counts at most as often
/// as it appears in the most generous single reference.
fn modified_precision(cand: &[&str], refs: &[Vec<&str>], n: usize) -> f64 {
    if cand.len() < n {
        return 0.0;
    }
    let cand_counts = ngram_counts(cand, n);
    let total: usize = cand_counts.values().sum();
    let mut clipped = 0usize;
    for (gram, &count) in &cand_counts {
        let max_ref = refs.iter().map(|r| *ngram_counts(r, n).get(gram).unwrap_or(&0)).max();
        clipped += count.min(max_ref.unwrap_or(0));
    }
    clipped as f64 / total as f64
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-L: F-measure over the longest common subsequence with β = 1.2
/// (recall-weighted, matching the summarization convention).
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refr: Vec<&str> = reference.split_whitespace().collect();
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&cand, &refr) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / cand.len() as f64;
    let r = lcs / refr.len() as f64;
    let beta2 = 1.2f64 * 1.2;
    (1.0 + beta2) * r * p / (r + beta2 * p)
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
