//! Finite-difference gradient checking: the independent oracle for every
//! backward rule in the crate.
//!
//! For a deterministic scalar-valued function `f` of a parameter set, the
//! central difference (f(θ+h) − f(θ−h)) / 2h is compared per coordinate
//! against the reverse-mode gradient. Checks always run at 64-bit; the
//! default probe is h = 1e-5, where truncation and round-off are both far
//! below the 1e-4 acceptance threshold.
//!
//! The relative error denominator is max(|g_ad|, |g_fd|, 1e-3): the floor
//! keeps coordinates whose true gradient is at the finite-difference noise
//! level (|g| ≲ 1e-6) from registering spurious relative errors, while any
//! genuinely wrong rule still shows up at full scale on other coordinates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_H: f64 = 1e-5;
const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error observed.
    pub max_rel_err: f64,
    /// Number of coordinates probed.
    pub checked: usize,
}

/// Checks every coordinate of every parameter. `f` must rebuild its forward
/// pass from the parameter handles on each call and must be deterministic
/// (verified by double evaluation — any internal randomness must be frozen
/// before calling).
pub fn grad_check(
    f: impl Fn() -> Tensor<f64>,
    params: &[Tensor<f64>],
    h: f64,
) -> Result<GradCheckReport> {
    grad_check_inner(f, params, h, None, 0)
}

/// Like [`grad_check`] but probes at most `max_coords_per_param` randomly
/// chosen coordinates per parameter — the tool for sweeping many random
/// model configurations under a time budget.
pub fn grad_check_sampled(
    f: impl Fn() -> Tensor<f64>,
    params: &[Tensor<f64>],
    h: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    grad_check_inner(f, params, h, Some(max_coords_per_param), seed)
}

fn grad_check_inner(
    f: impl Fn() -> Tensor<f64>,
    params: &[Tensor<f64>],
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    assert!(h > 0.0, "grad_check step h must be positive, got {h}");

    // Oracle validity: f must be bit-deterministic at fixed parameters.
    let probe_a = no_grad(|| f()).item();
    let probe_b = no_grad(|| f()).item();
    if probe_a.to_bits() != probe_b.to_bits() {
        return Err(Error::contract(
            "grad_check oracle invalid: f is nondeterministic at fixed parameters",
        ));
    }

    // Reverse-mode gradients.
    for p in params {
        p.zero_grad();
    }
    let loss = f();
    assert!(loss.numel() == 1, "grad_check needs a scalar loss, got {:?}", loss.shape());
    loss.backward();
    let ad_grads: Vec<Vec<f64>> =
        params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();

    let mut rng = rng_for(seed, "gradcheck-coords");
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0usize;
    for (p, ad) in params.iter().zip(ad_grads.iter()) {
        let n = p.numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => {
                let mut picked: Vec<usize> = (0..n).collect();
                for i in 0..m {
                    let j = rng.gen_range(i..n);
                    picked.swap(i, j);
                }
                picked.truncate(m);
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let original = p.data()[c];
            p.with_data_mut(|d| d[c] = original + h);
            let f_plus = no_grad(|| f()).item();
            p.with_data_mut(|d| d[c] = original - h);
            let f_minus = no_grad(|| f()).item();
            p.with_data_mut(|d| d[c] = original);
            let fd = (f_plus - f_minus) / (2.0 * h);
            let denom = ad[c].abs().max(fd.abs()).max(REL_ERR_FLOOR);
            let rel = (ad[c] - fd).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, uniform};
    use rand::Rng;

    #[test]
    fn quadratic_gradcheck_is_machine_precise() {
        // Central differences are exact for quadratics up to round-off.
        let x = Tensor::param(vec![0.7f64, -1.3, 2.1], &[3]);
        let a = Tensor::from_vec(vec![2.0f64, -0.5, 1.5], &[3]);
        let f = {
            let (x, a) = (x.clone(), a.clone());
            move || x.mul(&x).mul(&a).sum_all()
        };
        let report = grad_check(f, &[x], DEFAULT_H).unwrap();
        assert!(report.max_rel_err < 1e-9, "quadratic rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn nondeterministic_f_is_rejected() {
        use std::cell::Cell;
        use std::rc::Rc;
        let x = Tensor::param(vec![1.0f64], &[1]);
        let calls = Rc::new(Cell::new(0.0f64));
        let f = {
            let (x, calls) = (x.clone(), calls.clone());
            move || {
                calls.set(calls.get() + 1.0);
                x.affine(1.0, calls.get()).sum_all()
            }
        };
        let err = grad_check(f, &[x], DEFAULT_H).unwrap_err();
        assert!(err.message.contains("nondeterministic"), "{}", err.message);
    }

    /// Every primitive op's backward against central differences, 50 random
    /// shapes/seeds, 64-bit, threshold 1e-4.
    #[test]
    fn primitive_ops_pass_gradcheck_over_50_random_shapes() {
        for seed in 0..50u64 {
            let mut rng = rng_for(seed, "prim-sweep");
            let k = rng.gen_range(1..5usize);
            let d = 2 * rng.gen_range(1..4usize); // even, for 2-head attention
            let m = rng.gen_range(1..4usize);

            let x = Tensor::param(normal_vec::<f64, _>(&mut rng, k * d), &[k, d]);
            let y = Tensor::param(normal_vec::<f64, _>(&mut rng, k * d), &[k, d]);
            let w = Tensor::param(normal_vec::<f64, _>(&mut rng, d * m), &[d, m]);
            let bias = Tensor::param(normal_vec::<f64, _>(&mut rng, d), &[d]);
            let gain = Tensor::param(
                normal_vec::<f64, _>(&mut rng, d).iter().map(|v| 1.0 + 0.1 * v).collect(),
                &[d],
            );
            let q = Tensor::param(normal_vec::<f64, _>(&mut rng, k * d), &[k, d]);
            let v = Tensor::param(normal_vec::<f64, _>(&mut rng, k * d), &[k, d]);
            let targets: Vec<usize> = (0..k).map(|_| rng.gen_range(0..d)).collect();
            let mut mask: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
            mask[0] = true;
            let idx: Vec<usize> = {
                let mut p: Vec<usize> = (0..k).collect();
                for i in (1..k).rev() {
                    let j = uniform(&mut rng, 0.0, (i + 1) as f64) as usize;
                    p.swap(i, j);
                }
                p
            };

            type Case = (&'static str, Box<dyn Fn() -> Tensor<f64>>, Vec<Tensor<f64>>);
            let cases: Vec<Case> = vec![
                (
                    "add/mul/affine",
                    Box::new({
                        let (x, y) = (x.clone(), y.clone());
                        move || x.add(&y).mul(&x).affine(0.7, -0.2).sum_all()
                    }),
                    vec![x.clone(), y.clone()],
                ),
                (
                    "sub/exp",
                    Box::new({
                        let (x, y) = (x.clone(), y.clone());
                        move || x.sub(&y).affine(0.3, 0.0).exp().sum_all()
                    }),
                    vec![x.clone(), y.clone()],
                ),
                (
                    "matmul",
                    Box::new({
                        let (x, w) = (x.clone(), w.clone());
                        move || x.matmul(&w).mul(&x.matmul(&w)).sum_all()
                    }),
                    vec![x.clone(), w.clone()],
                ),
                (
                    "softmax",
                    Box::new({
                        let (x, y) = (x.clone(), y.clone());
                        move || x.softmax_rows().mul(&y).sum_all()
                    }),
                    vec![x.clone()],
                ),
                (
                    "layer_norm",
                    Box::new({
                        let (x, gain, bias, y) = (x.clone(), gain.clone(), bias.clone(), y.clone());
                        move || x.layer_norm(&gain, &bias, 1e-5).mul(&y).sum_all()
                    }),
                    vec![x.clone(), gain.clone(), bias.clone()],
                ),
                (
                    "gelu",
                    Box::new({
                        let x = x.clone();
                        move || x.gelu().sum_all()
                    }),
                    vec![x.clone()],
                ),
                (
                    "attention",
                    Box::new({
                        let (q, x, v, y) = (q.clone(), x.clone(), v.clone(), y.clone());
                        move || {
                            Tensor::multi_head_attention(&q, &x, &v, 2, true).mul(&y).sum_all()
                        }
                    }),
                    vec![q.clone(), x.clone(), v.clone()],
                ),
                (
                    "cross_entropy",
                    Box::new({
                        let (x, targets, mask) = (x.clone(), targets.clone(), mask.clone());
                        move || x.cross_entropy_masked(&targets, &mask).unwrap()
                    }),
                    vec![x.clone()],
                ),
                (
                    "embedding/index/scatter",
                    Box::new({
                        let (x, y, idx) = (x.clone(), y.clone(), idx.clone());
                        move || {
                            let picked = x.index_select_rows(&idx);
                            Tensor::zeros(&[k, d]).scatter_rows(&picked, &idx).mul(&y).sum_all()
                        }
                    }),
                    vec![x.clone()],
                ),
                (
                    "concat/slice/repeat/mean",
                    Box::new({
                        let (x, y) = (x.clone(), y.clone());
                        move || {
                            let c = x.concat_cols(&y).slice_cols(d / 2, d + d / 2);
                            let r = c.mean_axis0().repeat_row(k);
                            r.mul(&x.add_suffix(&c.mean_axis0())).sum_all()
                        }
                    }),
                    vec![x.clone(), y.clone()],
                ),
                (
                    "l2_normalize/clamp",
                    Box::new({
                        let (x, y) = (x.clone(), y.clone());
                        move || x.l2_normalize_rows(1e-8).mul(&y).clamp(-0.9, 0.9).sum_all()
                    }),
                    vec![x.clone()],
                ),
                (
                    "transpose",
                    Box::new({
                        let (x, w) = (x.clone(), w.clone());
                        move || w.transpose2().matmul(&x.transpose2()).sum_all()
                    }),
                    vec![x.clone(), w.clone()],
                ),
            ];

            for (name, f, params) in cases {
                let report = grad_check(f, &params, DEFAULT_H)
                    .unwrap_or_else(|e| panic!("{name} gradcheck (seed {seed}): {e}"));
                assert!(
                    report.max_rel_err < 1e-4,
                    "{name} backward deviates from finite differences (seed {seed}): \
                     rel err {}",
                    report.max_rel_err
                );
            }
        }
    }
}
