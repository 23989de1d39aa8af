//! Differentiable operations.
//!
//! Each op computes its forward value eagerly, then registers a backward
//! closure over the saved context. Shape violations panic with messages that
//! name both shapes; conditions reachable from user data (an empty
//! supervision mask) return `Result` instead.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{assert_same_shape, Tensor};

// ── Raw kernels (also used by backward rules) ───────────────────────────

/// c += a · b for row-major a [m×k], b [k×n]. ikj order: the inner loop runs
/// contiguously over a row of `b` and `c`, which auto-vectorizes well.
pub(crate) fn mm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == T::ZERO {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += a_il * *bv;
            }
        }
    }
}

/// c += aᵀ · b for a [m×k], b [m×n], c [k×n].
pub(crate) fn mm_at_b_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == T::ZERO {
                continue;
            }
            let c_row = &mut c[l * n..(l + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += a_il * *bv;
            }
        }
    }
}

/// Dot product with eight independent accumulator lanes and a fixed
/// reduction tree. The lanes break the serial add dependency (so the loop
/// can keep multiple FMAs in flight) while keeping the summation order a
/// deterministic function of the length alone.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len();
    let chunks = n / LANES;
    let mut acc = [T::ZERO; LANES];
    for c in 0..chunks {
        let ar = &a[c * LANES..c * LANES + LANES];
        let br = &b[c * LANES..c * LANES + LANES];
        for l in 0..LANES {
            acc[l] += ar[l] * br[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * LANES..n {
        tail += a[i] * b[i];
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// c += a · bᵀ for a [m×n], b [k×n], c [m×k]: rows dot rows, contiguous.
pub(crate) fn mm_a_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            c[i * k + j] += dot(a_row, b_row);
        }
    }
}

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // √(2/π)
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

impl<T: Scalar> Tensor<T> {
    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_same_shape(self, other, "add");
        let data: Vec<T> =
            self.data().iter().zip(other.data().iter()).map(|(a, b)| *a + *b).collect();
        Tensor::from_op(data, self.shape(), vec![self.clone(), other.clone()], |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.to_vec()),
            ]
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_same_shape(self, other, "sub");
        let data: Vec<T> =
            self.data().iter().zip(other.data().iter()).map(|(a, b)| *a - *b).collect();
        Tensor::from_op(data, self.shape(), vec![self.clone(), other.clone()], |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -*v).collect()),
            ]
        })
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_same_shape(self, other, "mul");
        let data: Vec<T> =
            self.data().iter().zip(other.data().iter()).map(|(a, b)| *a * *b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, self.shape(), vec![self.clone(), other.clone()], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(b.data().iter()).map(|(gv, bv)| *gv * *bv).collect()),
                needs[1].then(|| g.iter().zip(a.data().iter()).map(|(gv, av)| *gv * *av).collect()),
            ]
        })
    }

    /// scale·x + shift, elementwise with scalar constants.
    pub fn affine(&self, scale: T, shift: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|v| scale * *v + shift).collect();
        Tensor::from_op(data, self.shape(), vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| g.iter().map(|v| scale * *v).collect())]
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.affine(-T::ONE, T::ZERO)
    }

    pub fn exp(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|v| v.exp()).collect();
        let out_data = data.clone();
        Tensor::from_op(data, self.shape(), vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| g.iter().zip(out_data.iter()).map(|(gv, y)| *gv * *y).collect())]
        })
    }

    /// Clamp into `[lo, hi]`. Backward passes through strictly inside the
    /// interval and is zero at or beyond the bounds.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        assert!(lo < hi, "clamp bounds must satisfy lo < hi");
        let x = self.to_vec();
        let data: Vec<T> = x.iter().map(|v| (*v).maximum(lo).minimum(hi)).collect();
        Tensor::from_op(data, self.shape(), vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| {
                g.iter()
                    .zip(x.iter())
                    .map(|(gv, xv)| if *xv > lo && *xv < hi { *gv } else { T::ZERO })
                    .collect()
            })]
        })
    }

    pub fn gelu(&self) -> Tensor<T> {
        let x = self.to_vec();
        let data: Vec<T> = x.iter().map(|v| gelu_scalar(*v)).collect();
        Tensor::from_op(data, self.shape(), vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| {
                g.iter().zip(x.iter()).map(|(gv, xv)| *gv * gelu_grad_scalar(*xv)).collect()
            })]
        })
    }

    /// Adds `other`, whose shape (ignoring leading 1-dims) must be a suffix
    /// of `self`'s shape, repeated over the leading dimensions (bias rows,
    /// broadcast masks).
    pub fn add_suffix(&self, other: &Tensor<T>) -> Tensor<T> {
        let s = self.shape();
        let mut o: &[usize] = other.shape();
        while o.first() == Some(&1) {
            o = &o[1..];
        }
        assert!(
            o.len() <= s.len() && s[s.len() - o.len()..] == *o,
            "add_suffix shape mismatch: lhs {:?} vs rhs {:?} (rhs must be a suffix)",
            s,
            other.shape()
        );
        let chunk = other.numel();
        let mut data = self.to_vec();
        {
            let ob = other.data();
            for c in data.chunks_mut(chunk) {
                for (cv, ov) in c.iter_mut().zip(ob.iter()) {
                    *cv += *ov;
                }
            }
        }
        Tensor::from_op(data, self.shape(), vec![self.clone(), other.clone()], move |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| {
                    let mut db = vec![T::ZERO; chunk];
                    for c in g.chunks(chunk) {
                        for (dv, gv) in db.iter_mut().zip(c.iter()) {
                            *dv += *gv;
                        }
                    }
                    db
                }),
            ]
        })
    }

    // ── Matrix ops ──────────────────────────────────────────────────────

    /// Rank-2 matrix product [m×k]·[k×n] → [m×n].
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(
            self.shape().len() == 2 && other.shape().len() == 2 && self.cols() == other.rows(),
            "matmul shape mismatch: lhs {:?} vs rhs {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut data = vec![T::ZERO; m * n];
        mm_acc(&self.data(), &other.data(), &mut data, m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, &[m, n], vec![self.clone(), other.clone()], move |g, needs| {
            vec![
                needs[0].then(|| {
                    // dA = g · Bᵀ
                    let mut da = vec![T::ZERO; m * k];
                    mm_a_bt_acc(g, &b.data(), &mut da, m, n, k);
                    da
                }),
                needs[1].then(|| {
                    // dB = Aᵀ · g
                    let mut db = vec![T::ZERO; k * n];
                    mm_at_b_acc(&a.data(), g, &mut db, m, k, n);
                    db
                }),
            ]
        })
    }

    /// Rank-2 transpose.
    pub fn transpose2(&self) -> Tensor<T> {
        let (m, n) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        drop(src);
        Tensor::from_op(data, &[n, m], vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| {
                let mut dg = vec![T::ZERO; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dg[i * n + j] = g[j * m + i];
                    }
                }
                dg
            })]
        })
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::ZERO;
        for v in self.data().iter() {
            acc += *v;
        }
        let n = self.numel();
        Tensor::from_op(vec![acc], &[1], vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum_all().affine(T::from_f64(1.0 / n as f64), T::ZERO)
    }

    /// Column means of a rank-2 tensor: [k×d] → [1×d].
    pub fn mean_axis0(&self) -> Tensor<T> {
        let (k, d) = (self.rows(), self.cols());
        let src = self.data();
        let inv = T::from_f64(1.0 / k as f64);
        let mut data = vec![T::ZERO; d];
        for row in src.chunks(d) {
            for (o, v) in data.iter_mut().zip(row.iter()) {
                *o += *v;
            }
        }
        for o in data.iter_mut() {
            *o *= inv;
        }
        drop(src);
        Tensor::from_op(data, &[1, d], vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| {
                let mut dg = vec![T::ZERO; k * d];
                for row in dg.chunks_mut(d) {
                    for (o, gv) in row.iter_mut().zip(g.iter()) {
                        *o = *gv * inv;
                    }
                }
                dg
            })]
        })
    }

    // ── Row / column structure ──────────────────────────────────────────

    /// Gathers rows of a rank-2 tensor: out[i] = self[idx[i]].
    pub fn index_select_rows(&self, idx: &[usize]) -> Tensor<T> {
        let (k, d) = (self.rows(), self.cols());
        for &i in idx {
            assert!(i < k, "index_select_rows index {i} out of range for {k} rows");
        }
        let src = self.data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        drop(src);
        let idx = idx.to_vec();
        Tensor::from_op(data, &[idx.len(), d], vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| {
                let mut dg = vec![T::ZERO; k * d];
                for (r, &i) in idx.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    let drow = &mut dg[i * d..(i + 1) * d];
                    for (dv, gv) in drow.iter_mut().zip(grow.iter()) {
                        *dv += *gv;
                    }
                }
                dg
            })]
        })
    }

    /// Writes rows of `src` into a copy of `self` at `idx` (unique indices):
    /// the reassembly primitive for merging per-branch projections back into
    /// original sequence order.
    pub fn scatter_rows(&self, src: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
        let (k, d) = (self.rows(), self.cols());
        assert!(
            src.shape().len() == 2 && src.cols() == d && src.rows() == idx.len(),
            "scatter_rows shape mismatch: dst {:?}, src {:?}, {} indices",
            self.shape(),
            src.shape(),
            idx.len()
        );
        let mut seen = vec![false; k];
        for &i in idx {
            assert!(i < k, "scatter_rows index {i} out of range for {k} rows");
            assert!(!seen[i], "scatter_rows duplicate index {i}");
            seen[i] = true;
        }
        let mut data = self.to_vec();
        {
            let sb = src.data();
            for (r, &i) in idx.iter().enumerate() {
                data[i * d..(i + 1) * d].copy_from_slice(&sb[r * d..(r + 1) * d]);
            }
        }
        let idx = idx.to_vec();
        Tensor::from_op(data, &[k, d], vec![self.clone(), src.clone()], move |g, needs| {
            vec![
                needs[0].then(|| {
                    let mut dg = g.to_vec();
                    for &i in &idx {
                        dg[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::ZERO);
                    }
                    dg
                }),
                needs[1].then(|| {
                    let mut ds = Vec::with_capacity(idx.len() * d);
                    for &i in &idx {
                        ds.extend_from_slice(&g[i * d..(i + 1) * d]);
                    }
                    ds
                }),
            ]
        })
    }

    /// Concatenates rank-2 tensors along rows.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let d = parts[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert!(
                p.cols() == d,
                "concat_rows column mismatch: {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            );
            rows += p.rows();
            data.extend_from_slice(&p.data());
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        let parents: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        Tensor::from_op(data, &[rows, d], parents, move |g, needs| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut off = 0;
            for (sz, need) in sizes.iter().zip(needs.iter()) {
                out.push(need.then(|| g[off..off + sz].to_vec()));
                off += sz;
            }
            out
        })
    }

    /// Concatenates two rank-2 tensors along columns.
    pub fn concat_cols(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(
            self.shape().len() == 2 && other.shape().len() == 2 && self.rows() == other.rows(),
            "concat_cols shape mismatch: lhs {:?} vs rhs {:?}",
            self.shape(),
            other.shape()
        );
        let (k, m, n) = (self.rows(), self.cols(), other.cols());
        let (a, b) = (self.data(), other.data());
        let mut data = Vec::with_capacity(k * (m + n));
        for i in 0..k {
            data.extend_from_slice(&a[i * m..(i + 1) * m]);
            data.extend_from_slice(&b[i * n..(i + 1) * n]);
        }
        drop(a);
        drop(b);
        Tensor::from_op(data, &[k, m + n], vec![self.clone(), other.clone()], move |g, needs| {
            vec![
                needs[0].then(|| {
                    let mut da = Vec::with_capacity(k * m);
                    for i in 0..k {
                        da.extend_from_slice(&g[i * (m + n)..i * (m + n) + m]);
                    }
                    da
                }),
                needs[1].then(|| {
                    let mut db = Vec::with_capacity(k * n);
                    for i in 0..k {
                        db.extend_from_slice(&g[i * (m + n) + m..(i + 1) * (m + n)]);
                    }
                    db
                }),
            ]
        })
    }

    /// Column slice `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor<T> {
        let (k, d) = (self.rows(), self.cols());
        assert!(
            start < end && end <= d,
            "slice_cols range {start}..{end} out of bounds for shape {:?}",
            self.shape()
        );
        let w = end - start;
        let src = self.data();
        let mut data = Vec::with_capacity(k * w);
        for i in 0..k {
            data.extend_from_slice(&src[i * d + start..i * d + end]);
        }
        drop(src);
        Tensor::from_op(data, &[k, w], vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| {
                let mut dg = vec![T::ZERO; k * d];
                for i in 0..k {
                    dg[i * d + start..i * d + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                dg
            })]
        })
    }

    /// Reinterprets the row-major data under a new shape with equal element
    /// count. Gradient passes through unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        assert!(
            numel == self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape(),
            shape
        );
        Tensor::from_op(self.to_vec(), shape, vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| g.to_vec())]
        })
    }

    /// Repeats a single row n times: [1×d] → [n×d].
    pub fn repeat_row(&self, n: usize) -> Tensor<T> {
        assert!(
            self.shape().len() == 2 && self.rows() == 1,
            "repeat_row needs shape [1, d], got {:?}",
            self.shape()
        );
        let d = self.cols();
        let row = self.to_vec();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        Tensor::from_op(data, &[n, d], vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| {
                let mut dg = vec![T::ZERO; d];
                for chunk in g.chunks(d) {
                    for (dv, gv) in dg.iter_mut().zip(chunk.iter()) {
                        *dv += *gv;
                    }
                }
                dg
            })]
        })
    }

    /// Embedding lookup: rows of `self` (a [V×d] table) at `ids`. Gradient
    /// accumulates only at looked-up rows.
    pub fn embedding(&self, ids: &[usize]) -> Tensor<T> {
        let v = self.rows();
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range for table with {v} rows");
        }
        self.index_select_rows(ids)
    }

    // ── Normalization and softmax ───────────────────────────────────────

    /// Row-wise softmax of a rank-2 tensor, max-subtracted for stability.
    pub fn softmax_rows(&self) -> Tensor<T> {
        let (k, n) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = vec![T::ZERO; k * n];
        for i in 0..k {
            softmax_into(&src[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        drop(src);
        let probs = data.clone();
        Tensor::from_op(data, &[k, n], vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| {
                let mut dx = vec![T::ZERO; k * n];
                for i in 0..k {
                    let p = &probs[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mut dot = T::ZERO;
                    for (pv, gv) in p.iter().zip(gr.iter()) {
                        dot += *pv * *gv;
                    }
                    for ((dv, pv), gv) in dx[i * n..(i + 1) * n].iter_mut().zip(p).zip(gr) {
                        *dv = *pv * (*gv - dot);
                    }
                }
                dx
            })]
        })
    }

    /// Row-wise layer normalization with learnable gain and bias over the
    /// last dimension: y = (x − μ)/√(σ² + ε) · gain + bias.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Tensor<T> {
        let (k, d) = (self.rows(), self.cols());
        assert!(
            gain.numel() == d && bias.numel() == d,
            "layer_norm parameter mismatch: x {:?}, gain {:?}, bias {:?}",
            self.shape(),
            gain.shape(),
            bias.shape()
        );
        let src = self.data();
        let gb = gain.data();
        let bb = bias.data();
        let mut data = vec![T::ZERO; k * d];
        let mut xhat = vec![T::ZERO; k * d];
        let mut inv_std = vec![T::ZERO; k];
        let inv_d = T::from_f64(1.0 / d as f64);
        for i in 0..k {
            let row = &src[i * d..(i + 1) * d];
            let mut mean = T::ZERO;
            for v in row {
                mean += *v;
            }
            mean *= inv_d;
            let mut var = T::ZERO;
            for v in row {
                let c = *v - mean;
                var += c * c;
            }
            var *= inv_d;
            let istd = T::ONE / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[i * d + j] = xh;
                data[i * d + j] = xh * gb[j] + bb[j];
            }
        }
        drop(src);
        drop(gb);
        drop(bb);
        let gain_c = gain.clone();
        Tensor::from_op(
            data,
            &[k, d],
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g, needs| {
                let dgain = needs[1].then(|| {
                    let mut dg = vec![T::ZERO; d];
                    for i in 0..k {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                    dg
                });
                let dbias = needs[2].then(|| {
                    let mut db = vec![T::ZERO; d];
                    for i in 0..k {
                        for j in 0..d {
                            db[j] += g[i * d + j];
                        }
                    }
                    db
                });
                let dx = needs[0].then(|| {
                    let gb = gain_c.data();
                    let mut dx = vec![T::ZERO; k * d];
                    for i in 0..k {
                        // dxhat = g ⊙ gain; dx = istd·(dxhat − mean(dxhat)
                        //          − xhat·mean(dxhat ⊙ xhat))
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..d {
                            let dxh = g[i * d + j] * gb[j];
                            m1 += dxh;
                            m2 += dxh * xhat[i * d + j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = g[i * d + j] * gb[j];
                            dx[i * d + j] = inv_std[i] * (dxh - m1 - xhat[i * d + j] * m2);
                        }
                    }
                    dx
                });
                vec![dx, dgain, dbias]
            },
        )
    }

    /// Row-wise L2 normalization: y = x / (‖x‖ + ε).
    pub fn l2_normalize_rows(&self, eps: T) -> Tensor<T> {
        let (k, d) = (self.rows(), self.cols());
        let x = self.to_vec();
        let mut data = vec![T::ZERO; k * d];
        let mut norms = vec![T::ZERO; k];
        for i in 0..k {
            let row = &x[i * d..(i + 1) * d];
            let mut sq = T::ZERO;
            for v in row {
                sq += *v * *v;
            }
            let norm = sq.sqrt();
            norms[i] = norm;
            let r = T::ONE / (norm + eps);
            for j in 0..d {
                data[i * d + j] = row[j] * r;
            }
        }
        Tensor::from_op(data, &[k, d], vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| {
                let mut dx = vec![T::ZERO; k * d];
                for i in 0..k {
                    let row = &x[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let norm = norms[i];
                    let r = norm + eps;
                    let mut dot = T::ZERO;
                    for (gv, xv) in gr.iter().zip(row.iter()) {
                        dot += *gv * *xv;
                    }
                    for j in 0..d {
                        let mut v = gr[j] / r;
                        if norm > T::from_f64(1e-30) {
                            v -= row[j] * dot / (norm * r * r);
                        }
                        dx[i * d + j] = v;
                    }
                }
                dx
            })]
        })
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Masked token cross entropy over logits [k×V]: mean negative
    /// log-likelihood over masked-in rows only. Masked-out rows contribute
    /// exactly zero loss and exactly zero gradient.
    pub fn cross_entropy_masked(
        &self,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Tensor<T>> {
        let (k, v) = (self.rows(), self.cols());
        assert!(
            targets.len() == k && mask.len() == k,
            "cross_entropy_masked expects {k} targets/mask entries, got {}/{}",
            targets.len(),
            mask.len()
        );
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::contract(
                "cross entropy over an empty supervision mask (no masked-in positions)",
            ));
        }
        let src = self.data();
        let mut loss = T::ZERO;
        // Saved context: softmax probabilities of masked-in rows only.
        let mut saved: Vec<(usize, Vec<T>)> = Vec::with_capacity(count);
        for i in 0..k {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            assert!(t < v, "cross_entropy_masked target {t} out of range for {v} classes");
            let row = &src[i * v..(i + 1) * v];
            let mut probs = vec![T::ZERO; v];
            let lse = log_sum_exp_into(row, &mut probs);
            loss += lse - row[t];
            saved.push((i, probs));
        }
        drop(src);
        let inv_count = T::from_f64(1.0 / count as f64);
        loss *= inv_count;
        let targets = targets.to_vec();
        Ok(Tensor::from_op(vec![loss], &[1], vec![self.clone()], move |g, needs| {
            vec![needs[0].then(|| {
                let scale = g[0] * inv_count;
                let mut dl = vec![T::ZERO; k * v];
                for (i, probs) in &saved {
                    let drow = &mut dl[i * v..(i + 1) * v];
                    for (dv, pv) in drow.iter_mut().zip(probs.iter()) {
                        *dv = *pv * scale;
                    }
                    drow[targets[*i]] -= scale;
                }
                dl
            })]
        }))
    }

    // ── Attention ───────────────────────────────────────────────────────

    /// Fused multi-head scaled-dot-product attention.
    ///
    /// `q` is [kq×d], `key`/`value` are [kk×d], d divisible by `n_heads`.
    /// With `causal` set (requires kq == kk), query row i attends only to
    /// key rows j ≤ i; excluded keys never enter the softmax sums, so states
    /// before a perturbed position are bitwise unaffected by it.
    pub fn multi_head_attention(
        q: &Tensor<T>,
        key: &Tensor<T>,
        value: &Tensor<T>,
        n_heads: usize,
        causal: bool,
    ) -> Tensor<T> {
        let (kq, d) = (q.rows(), q.cols());
        let kk = key.rows();
        assert!(
            key.cols() == d && value.cols() == d && value.rows() == kk,
            "attention shape mismatch: q {:?}, k {:?}, v {:?}",
            q.shape(),
            key.shape(),
            value.shape()
        );
        assert!(d % n_heads == 0, "model dim {d} not divisible by {n_heads} heads");
        assert!(!causal || kq == kk, "causal attention requires kq == kk, got {kq} vs {kk}");
        let hd = d / n_heads;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());

        let qb = q.data();
        let kb = key.data();
        let vb = value.data();
        let mut out = vec![T::ZERO; kq * d];
        // Dense per-head probability matrix, zero at causally excluded slots.
        let mut probs = vec![T::ZERO; n_heads * kq * kk];
        let mut scores: Vec<T> = vec![T::ZERO; kk];
        for h in 0..n_heads {
            let hoff = h * hd;
            for i in 0..kq {
                let allowed = if causal { i + 1 } else { kk };
                let qrow = &qb[i * d + hoff..i * d + hoff + hd];
                for j in 0..allowed {
                    let krow = &kb[j * d + hoff..j * d + hoff + hd];
                    scores[j] = dot(qrow, krow) * scale;
                }
                let prow = &mut probs[(h * kq + i) * kk..(h * kq + i) * kk + allowed];
                softmax_into(&scores[..allowed], prow);
                let orow = &mut out[i * d + hoff..i * d + hoff + hd];
                for j in 0..allowed {
                    let p = prow[j];
                    if p == T::ZERO {
                        continue;
                    }
                    let vrow = &vb[j * d + hoff..j * d + hoff + hd];
                    for (ov, vv) in orow.iter_mut().zip(vrow.iter()) {
                        *ov += p * *vv;
                    }
                }
            }
        }
        drop(qb);
        drop(kb);
        drop(vb);

        let (qc, kc, vc) = (q.clone(), key.clone(), value.clone());
        Tensor::from_op(
            out,
            &[kq, d],
            vec![q.clone(), key.clone(), value.clone()],
            move |g, needs| {
                let qb = qc.data();
                let kb = kc.data();
                let vb = vc.data();
                let mut dq = vec![T::ZERO; kq * d];
                let mut dk = vec![T::ZERO; kk * d];
                let mut dv = vec![T::ZERO; kk * d];
                let mut dp = vec![T::ZERO; kk];
                for h in 0..n_heads {
                    let hoff = h * hd;
                    for i in 0..kq {
                        let allowed = if causal { i + 1 } else { kk };
                        let prow = &probs[(h * kq + i) * kk..(h * kq + i) * kk + allowed];
                        let grow = &g[i * d + hoff..i * d + hoff + hd];
                        // dV_j += p_ij · g_i ; dP_ij = g_i · V_j
                        for j in 0..allowed {
                            let vrow = &vb[j * d + hoff..j * d + hoff + hd];
                            dp[j] = dot(grow, vrow);
                            let p = prow[j];
                            if p != T::ZERO {
                                let dvrow = &mut dv[j * d + hoff..j * d + hoff + hd];
                                for (dvv, gv) in dvrow.iter_mut().zip(grow.iter()) {
                                    *dvv += p * *gv;
                                }
                            }
                        }
                        // Softmax backward: dS_ij = p_ij (dP_ij − Σ p dP)
                        let pdot = dot(prow, &dp[..allowed]);
                        let qrow = &qb[i * d + hoff..i * d + hoff + hd];
                        for j in 0..allowed {
                            let ds = prow[j] * (dp[j] - pdot) * scale;
                            if ds == T::ZERO {
                                continue;
                            }
                            let krow = &kb[j * d + hoff..j * d + hoff + hd];
                            let dqrow = &mut dq[i * d + hoff..i * d + hoff + hd];
                            for (dqv, kv) in dqrow.iter_mut().zip(krow.iter()) {
                                *dqv += ds * *kv;
                            }
                            let dkrow = &mut dk[j * d + hoff..j * d + hoff + hd];
                            for (dkv, qv) in dkrow.iter_mut().zip(qrow.iter()) {
                                *dkv += ds * *qv;
                            }
                        }
                    }
                }
                vec![
                    needs[0].then_some(dq),
                    needs[1].then_some(dk),
                    needs[2].then_some(dv),
                ]
            },
        )
    }
}

/// Max-subtracted softmax of `row` into `out` (same length).
fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut max = row[0];
    for v in row {
        max = max.maximum(*v);
    }
    let mut sum = T::ZERO;
    for (o, v) in out.iter_mut().zip(row.iter()) {
        let e = (*v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = T::ONE / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Computes log Σ exp(row) stably and fills `probs` with softmax(row).
fn log_sum_exp_into<T: Scalar>(row: &[T], probs: &mut [T]) -> T {
    let mut max = row[0];
    for v in row {
        max = max.maximum(*v);
    }
    let mut sum = T::ZERO;
    for (p, v) in probs.iter_mut().zip(row.iter()) {
        let e = (*v - max).exp();
        *p = e;
        sum += e;
    }
    let inv = T::ONE / sum;
    for p in probs.iter_mut() {
        *p *= inv;
    }
    max + sum.ln()
}
