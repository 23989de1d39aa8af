//! Retrieval and distributional metrics over evaluator feature rows.
//!
//! Every function here is pure `f64` math on plain feature vectors; model
//! and evaluator stay outside. Order-sensitivity is scrubbed by sorting
//! inputs into a canonical content order before any randomized grouping or
//! floating-point reduction, so a common permutation of the evaluation set
//! changes nothing — bit for bit.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_for;

// ── Canonical ordering ───────────────────────────────────────────────────

/// Indices sorted by row content (lexicographic total order on the floats,
/// tie-broken by the paired row). Identical inputs in any order produce the
/// same sequence of row values.
fn canonical_order(primary: &[Vec<f64>], secondary: Option<&[Vec<f64>]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..primary.len()).collect();
    idx.sort_by(|&a, &b| {
        let by_primary = cmp_rows(&primary[a], &primary[b]);
        match (by_primary, secondary) {
            (std::cmp::Ordering::Equal, Some(s)) => cmp_rows(&s[a], &s[b]),
            _ => by_primary,
        }
    });
    idx
}

fn cmp_rows(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        let c = x.total_cmp(y);
        if c != std::cmp::Ordering::Equal {
            return c;
        }
    }
    a.len().cmp(&b.len())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sum in a content-determined order so the result ignores input order.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    values.into_iter().sum::<f64>() / n as f64
}

// ── Retrieval ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct RetrievalReport {
    /// Fraction of queries whose true match ranked within top-1/2/3.
    pub r_at: [f64; 3],
    pub mm_dist: f64,
    pub queries: usize,
}

/// Batched text→motion retrieval. Pairs are grouped into batches of `batch`
/// (canonical order, then a seeded shuffle); within a batch, each text ranks
/// all motion embeddings by Euclidean distance, and the true pair counts as
/// a top-k hit iff fewer than k distances beat it. MM Dist is the mean
/// matched-pair distance over the same queries.
pub fn r_precision(
    text: &[Vec<f64>],
    motion: &[Vec<f64>],
    batch: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    if text.len() != motion.len() {
        return Err(Error::contract(format!(
            "retrieval needs paired sets, got {} texts and {} motions",
            text.len(),
            motion.len()
        )));
    }
    if batch < 2 || text.len() < batch {
        return Err(Error::contract(format!(
            "retrieval needs at least one full batch of {batch}, got {} pairs",
            text.len()
        )));
    }
    let mut order = canonical_order(text, Some(motion));
    let mut rng = rng_for(seed, "retrieval-batches");
    order.shuffle(&mut rng);

    let mut hits = [0usize; 3];
    let mut matched = Vec::new();
    let mut queries = 0;
    for chunk in order.chunks(batch) {
        if chunk.len() < batch {
            break; // remainder dropped: every query faces the same pool size
        }
        for &qi in chunk {
            let d_true = euclidean(&text[qi], &motion[qi]);
            let beaten = chunk
                .iter()
                .filter(|&&mj| mj != qi && euclidean(&text[qi], &motion[mj]) < d_true)
                .count();
            for (k, h) in hits.iter_mut().enumerate() {
                if beaten <= k {
                    *h += 1;
                }
            }
            matched.push(d_true);
            queries += 1;
        }
    }
    Ok(RetrievalReport {
        r_at: [
            hits[0] as f64 / queries as f64,
            hits[1] as f64 / queries as f64,
            hits[2] as f64 / queries as f64,
        ],
        mm_dist: stable_mean(matched),
        queries,
    })
}

// ── FID ──────────────────────────────────────────────────────────────────

/// Fréchet distance between the Gaussian fits of two feature sets:
/// ‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2}), with the matrix square root via
/// symmetric eigendecomposition and negative eigenvalues clamped at zero.
pub fn fid(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = moments(real)?;
    let (m2, s2) = moments(gen)?;
    let d = m1.len();
    if m2.len() != d {
        return Err(Error::contract(format!(
            "feature widths differ: {} vs {}",
            d,
            m2.len()
        )));
    }
    let mean_term: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b) * (a - b)).sum();

    // Tr((Σ₁Σ₂)^{1/2}) = Tr((√Σ₁ Σ₂ √Σ₁)^{1/2}); the inner product of
    // symmetric PSD factors is symmetric PSD, so one solver serves both.
    let root1 = sym_sqrt(&s1, d);
    let inner = matmul_sq(&matmul_sq(&root1, &s2, d), &root1, d);
    let (evals, _) = jacobi_eigh(&inner, d);
    let tr_sqrt: f64 = evals.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let tr1: f64 = (0..d).map(|i| s1[i * d + i]).sum();
    let tr2: f64 = (0..d).map(|i| s2[i * d + i]).sum();
    let value = mean_term + tr1 + tr2 - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::contract("non-finite covariance in FID inputs"));
    }
    Ok(value.max(0.0))
}

/// Sample mean and unbiased covariance (row-major d×d), accumulated in
/// canonical row order.
fn moments(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if rows.len() < 2 {
        return Err(Error::contract(format!(
            "need at least 2 feature rows per side, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::contract("ragged feature rows"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::contract("non-finite feature values"));
    }
    let order = canonical_order(rows, None);
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &order {
        for (m, v) in mean.iter_mut().zip(&rows[i]) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for &i in &order {
        for a in 0..d {
            let da = rows[i][a] - mean[a];
            for b in 0..d {
                cov[a * d + b] += da * (rows[i][b] - mean[b]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= n - 1.0;
    }
    Ok((mean, cov))
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition: V √Λ Vᵀ with negative
/// eigenvalues clamped at zero.
fn sym_sqrt(a: &[f64], d: usize) -> Vec<f64> {
    let (evals, v) = jacobi_eigh(a, d);
    let mut out = vec![0.0; d * d];
    for (k, &l) in evals.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..d {
            let vik = v[i * d + k];
            for j in 0..d {
                out[i * d + j] += s * vik * v[j * d + k];
            }
        }
    }
    out
}

/// Cyclic Jacobi eigensolver for a symmetric matrix (row-major d×d).
/// Returns (eigenvalues, eigenvectors as columns). Sweeps rotate away the
/// largest off-diagonal mass until it falls below a scale-relative floor.
pub fn jacobi_eigh(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), d * d, "matrix must be d×d");
    // Work on the symmetrized copy: ½(A + Aᵀ) guards against drift.
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = 0.5 * (a[i * d + j] + a[j * d + i]);
        }
    }
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    let tol = 1e-30 * scale;
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j] * m[i * d + j])
            .sum();
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                // Classic Jacobi rotation angle.
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let evals: Vec<f64> = (0..d).map(|i| m[i * d + i]).collect();
    (evals, v)
}

// ── Diversity & MultiModality ────────────────────────────────────────────

/// Mean distance between paired elements of two disjoint random subsets of
/// size `subset`.
pub fn diversity(feats: &[Vec<f64>], subset: usize, seed: u64) -> Result<f64> {
    if subset == 0 || feats.len() < 2 * subset {
        return Err(Error::contract(format!(
            "diversity needs at least {} samples (2 × subset), got {}",
            2 * subset,
            feats.len()
        )));
    }
    let mut order = canonical_order(feats, None);
    let mut rng = rng_for(seed, "diversity-subsets");
    order.shuffle(&mut rng);
    let dists: Vec<f64> = (0..subset)
        .map(|i| euclidean(&feats[order[i]], &feats[order[subset + i]]))
        .collect();
    Ok(stable_mean(dists))
}

/// Mean pairwise distance among each caption's repeated generations,
/// averaged over captions.
pub fn multimodality(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::contract("multimodality needs at least one caption group"));
    }
    let mut per_group = Vec::with_capacity(groups.len());
    for g in groups {
        if g.len() < 2 {
            return Err(Error::contract(format!(
                "multimodality needs ≥ 2 generations per caption, got {}",
                g.len()
            )));
        }
        let mut dists = Vec::new();
        for i in 0..g.len() {
            for j in (i + 1)..g.len() {
                dists.push(euclidean(&g[i], &g[j]));
            }
        }
        per_group.push(stable_mean(dists));
    }
    Ok(stable_mean(per_group))
}
