//! Brute-force references: finite-difference curvature of the output loss,
//! exhaustive mask search, and a closed-form unrolled scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    inverse_softplus, parameterize_a, scan_sequence, selective_scan, MambaConfig, MambaLayer,
    SsmParams,
};
use crate::ssm_prune::{Pattern, PruneMask};
use crate::tensor::{spd_factor_solve, Tensor};

pub const EXHAUSTIVE_MAX_ENTRIES: usize = 16;

/// `(1/B) Σ_b ‖y_b − ŷ_b‖²`, with B the leading dimension.
pub fn loss_l2(y: &Tensor, y_ref: &Tensor) -> Result<f64> {
    if y.shape() != y_ref.shape() {
        return Err(Error::dim(format!(
            "loss: {:?} vs {:?}",
            y.shape(),
            y_ref.shape()
        )));
    }
    let b = y.shape()[0] as f64;
    let sq: f64 = y.data().iter().zip(y_ref.data()).map(|(a, r)| (a - r) * (a - r)).sum();
    Ok(sq / b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    /// Relative step: `h = max(step, step · |a_log|)`.
    pub step: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { step: 1e-4 }
    }
}

/// SSM outputs for fixed `(δ, B, C)`; those depend on `x` only, so any
/// perturbation of `A_log` can reuse them.
struct FixedInputs<'a> {
    layer: &'a MambaLayer,
    x: &'a Tensor,
    params: Vec<SsmParams>,
}

impl<'a> FixedInputs<'a> {
    fn new(layer: &'a MambaLayer, x: &'a Tensor) -> Result<Self> {
        let (bsz, l, d) = x.dims3()?;
        if d != layer.d_inner() {
            return Err(Error::dim("input width differs from layer channels"));
        }
        let params = (0..bsz)
            .map(|b| layer.ssm_params(&x.data()[b * l * d..(b + 1) * l * d], l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layer, x, params })
    }

    fn outputs(&self, a_log: &Tensor) -> Result<Tensor> {
        let (bsz, l, d) = self.x.dims3()?;
        let a = parameterize_a(a_log);
        let mut y = Vec::with_capacity(bsz * l * d);
        for (b, p) in self.params.iter().enumerate() {
            y.extend(scan_sequence(
                &a,
                p,
                &self.x.data()[b * l * d..(b + 1) * l * d],
                self.layer.d_skip.data(),
                None,
            )?);
        }
        Tensor::new("y", &[bsz, l, d], y)
    }
}

/// Central-difference diagonal of `∂²L/∂A_log²` with
/// `L = loss_l2(SSM(A_log + h e_i; x), y_ref)`.
pub fn fd_hessian_diag(
    layer: &MambaLayer,
    x: &Tensor,
    y_ref: &Tensor,
    cfg: FdConfig,
) -> Result<Tensor> {
    if !(cfg.step > 0.0) {
        return Err(Error::arg("finite-difference step must be > 0"));
    }
    let fixed = FixedInputs::new(layer, x)?;
    let base = loss_l2(&fixed.outputs(&layer.a_log)?, y_ref)?;
    let diag = (0..layer.a_log.numel())
        .into_par_iter()
        .map(|i| {
            let v = layer.a_log.data()[i];
            let h = cfg.step.max(cfg.step * v.abs());
            let eval = |delta: f64| -> Result<f64> {
                let mut a = layer.a_log.clone();
                a.data_mut()[i] = v + delta;
                loss_l2(&fixed.outputs(&a)?, y_ref)
            };
            let (lp, lm) = (eval(h)?, eval(-h)?);
            let second = (lp - 2.0 * base + lm) / (h * h);
            if !second.is_finite() {
                return Err(Error::Numerical(format!("non-finite curvature at entry {i}")));
            }
            Ok(second)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new("fd_hessian_diag", layer.a_log.shape(), diag)
}

/// `½ · H_ii · A_log_i²`.
pub fn diagonal_saliency(fd_diag: &Tensor, a_log: &Tensor) -> Result<Tensor> {
    fd_diag.zip_with(a_log, |h, w| 0.5 * h * w * w)
}

/// Indices sorted by ascending value, ties by index.
pub fn argsort(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

/// Ascending ranking of the diagonal saliency.
pub fn saliency_ranking(fd_diag: &Tensor, a_log: &Tensor) -> Result<Vec<usize>> {
    Ok(argsort(diagonal_saliency(fd_diag, a_log)?.data()))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let order = argsort(values);
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::dim("spearman needs two equal-length samples of size >= 2"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Error of zeroing the given `A_log` entries, measured against the dense output.
pub fn mask_error(layer: &MambaLayer, x: &Tensor, zeros: &[usize]) -> Result<f64> {
    let fixed = FixedInputs::new(layer, x)?;
    let dense = fixed.outputs(&layer.a_log)?;
    let mut a = layer.a_log.clone();
    zeros.iter().for_each(|&i| a.data_mut()[i] = 0.0);
    loss_l2(&fixed.outputs(&a)?, &dense)
}

/// Enumerates every way to zero `k` entries of `A_log` and returns the mask
/// with the smallest output error (first in lexicographic order on ties),
/// together with that error.
pub fn exhaustive_best_mask(layer: &MambaLayer, x: &Tensor, k: usize) -> Result<(PruneMask, f64)> {
    let (d, n) = layer.a_log.dims2()?;
    let total = d * n;
    if total > EXHAUSTIVE_MAX_ENTRIES {
        return Err(Error::arg(format!(
            "exhaustive search limited to D·N <= {EXHAUSTIVE_MAX_ENTRIES}, got {total}"
        )));
    }
    if k > total {
        return Err(Error::arg(format!("cannot zero {k} of {total} entries")));
    }
    let fixed = FixedInputs::new(layer, x)?;
    let dense = fixed.outputs(&layer.a_log)?;
    let mut comb: Vec<usize> = (0..k).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let mut a = layer.a_log.clone();
        comb.iter().for_each(|&i| a.data_mut()[i] = 0.0);
        let err = loss_l2(&fixed.outputs(&a)?, &dense)?;
        if best.as_ref().is_none_or(|(_, e)| err < *e) {
            best = Some((comb.clone(), err));
        }
        // next combination in lexicographic order
        let Some(pos) = (0..k).rev().find(|&i| comb[i] < total - k + i) else {
            break;
        };
        comb[pos] += 1;
        for j in pos + 1..k {
            comb[j] = comb[j - 1] + 1;
        }
    }
    let (zeros, err) = best.expect("at least one combination");
    let mut mask = Tensor::full("mask", &[d, n], 1.0)?;
    zeros.iter().for_each(|&i| mask.data_mut()[i] = 0.0);
    Ok((
        PruneMask {
            mask,
            k_pruned: k,
            pattern: Pattern::Unstructured,
        },
        err,
    ))
}

/// Smallest `Σ_rows (w − ŵ)ᵀ G_r (w − ŵ)` of a row survivor with the
/// entries `pruned` forced to zero, plus that survivor. Kept entries take the
/// least-squares compensation `−G_KK⁻¹ G_KP w_P`.
pub fn optimal_row_update(w: &[f64], gram: &Tensor, pruned: &[usize]) -> Result<(Vec<f64>, f64)> {
    let k = w.len();
    gram.expect_shape(&[k, k])?;
    let kept: Vec<usize> = (0..k).filter(|j| !pruned.contains(j)).collect();
    let mut delta = vec![0.0; k];
    pruned.iter().for_each(|&j| delta[j] = -w[j]);
    if !kept.is_empty() && !pruned.is_empty() {
        let gkk = Tensor::new(
            "G_KK",
            &[kept.len(), kept.len()],
            kept.iter().flat_map(|&i| kept.iter().map(move |&j| (i, j))).map(|(i, j)| gram.get2(i, j)).collect(),
        )?;
        let rhs: Vec<f64> = kept
            .iter()
            .map(|&i| -pruned.iter().map(|&j| gram.get2(i, j) * delta[j]).sum::<f64>())
            .collect();
        let sol = spd_factor_solve(&gkk, &Tensor::new("rhs", &[kept.len()], rhs)?)?;
        for (&i, &v) in kept.iter().zip(sol.data()) {
            delta[i] = v;
        }
    }
    let err: f64 = (0..k)
        .map(|i| delta[i] * (0..k).map(|j| gram.get2(i, j) * delta[j]).sum::<f64>())
        .sum();
    Ok((w.iter().zip(&delta).map(|(a, b)| a + b).collect(), err))
}

/// Brute-force pruning reference for linear and conv modules. Every mask
/// with `zeros_per_row[r]` zeros in row `r` is tried when a per-row budget is
/// given, otherwise every mask with `total` zeros anywhere. `grams` holds one
/// shared Gram or one per row. Returns the best weight, mask and error.
pub fn exhaustive_obs_prune(
    weight: &Tensor,
    grams: &[Tensor],
    total: usize,
    zeros_per_row: Option<&[usize]>,
) -> Result<(Tensor, Tensor, f64)> {
    let (rows, k) = weight.dims2()?;
    let numel = rows * k;
    if numel > EXHAUSTIVE_MAX_ENTRIES {
        return Err(Error::arg(format!(
            "exhaustive search limited to {EXHAUSTIVE_MAX_ENTRIES} weights, got {numel}"
        )));
    }
    if grams.len() != 1 && grams.len() != rows {
        return Err(Error::dim(format!("{rows} rows but {} grams", grams.len())));
    }
    if total > numel {
        return Err(Error::arg(format!("cannot zero {total} of {numel} weights")));
    }
    let gram = |r: usize| &grams[if grams.len() == 1 { 0 } else { r }];
    let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
    for bits in 0u32..(1 << numel) {
        if bits.count_ones() as usize != total {
            continue;
        }
        let pruned_in = |r: usize| -> Vec<usize> { (0..k).filter(|&j| bits >> (r * k + j) & 1 == 1).collect() };
        if let Some(budget) = zeros_per_row {
            if (0..rows).any(|r| pruned_in(r).len() != budget[r]) {
                continue;
            }
        }
        let mut w = Vec::with_capacity(numel);
        let mut err = 0.0;
        for r in 0..rows {
            let (row, e) = optimal_row_update(weight.row(r), gram(r), &pruned_in(r))?;
            w.extend(row);
            err += e;
        }
        if best.as_ref().is_none_or(|b| err < b.2) {
            let mask = (0..numel).map(|i| if bits >> i & 1 == 1 { 0.0 } else { 1.0 }).collect();
            best = Some((w, mask, err));
        }
    }
    let (w, mask, err) = best.ok_or_else(|| Error::arg("no mask satisfies the row budget"))?;
    Ok((
        Tensor::new(weight.name(), &[rows, k], w)?,
        Tensor::new("mask", &[rows, k], mask)?,
        err,
    ))
}

/// Closed-form scan: `h_t = Σ_{i≤t} (Π_{i<j≤t} e^{δ_j A}) δ_i B_i x_i`,
/// `y_t = C_t · h_t + D_skip x_t`, evaluated without the recurrence.
pub fn unrolled_scan(layer: &MambaLayer, x: &Tensor) -> Result<Tensor> {
    let (bsz, l, d) = x.dims3()?;
    let n = layer.d_state();
    let a = parameterize_a(&layer.a_log);
    let mut out = Vec::with_capacity(bsz * l * d);
    for b in 0..bsz {
        let xb = &x.data()[b * l * d..(b + 1) * l * d];
        let p = layer.ssm_params(xb, l)?;
        for t in 0..l {
            for ch in 0..d {
                let mut y = layer.d_skip.data()[ch] * xb[t * d + ch];
                for s in 0..n {
                    let av = a.get2(ch, s);
                    let mut h = 0.0;
                    for i in 0..=t {
                        let exponent: f64 = (i + 1..=t).map(|j| p.delta[j * d + ch] * av).sum();
                        h += exponent.exp() * p.delta[i * d + ch] * p.b[i * n + s] * xb[i * d + ch];
                    }
                    y += h * p.c[t * n + s];
                }
                out.push(y);
            }
        }
    }
    Tensor::new("y_unrolled", &[bsz, l, d], out)
}

/// Dense equivalent of a column-structured prune: the B and C rows of the
/// removed state columns are zeroed, shapes unchanged.
pub fn zero_state_rows(layer: &MambaLayer, cols: &[usize]) -> Result<MambaLayer> {
    let (r, n) = (layer.dt_rank(), layer.d_state());
    if cols.iter().any(|&c| c >= n) {
        return Err(Error::arg("state column out of range"));
    }
    let mut out = layer.clone();
    for &c in cols {
        out.x_proj.row_mut(r + c).fill(0.0);
        out.x_proj.row_mut(r + n + c).fill(0.0);
    }
    Ok(out)
}

/// A standalone SSM layer and a batch of its inputs.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub layer: MambaLayer,
    /// `[B, L, D]`
    pub x: Tensor,
}

impl TinyInstance {
    pub fn dense_output(&self) -> Result<Tensor> {
        Ok(selective_scan(&self.layer, &self.x, false)?.0)
    }
}

pub const TINY_DELTA_RANGE: (f64, f64) = (0.05, 0.3);

/// Seeded random SSM layer whose step sizes on the generated inputs all lie in
/// [`TINY_DELTA_RANGE`]; draws are repeated until they do.
pub fn tiny_instance(seed: u64, b: usize, l: usize, d: usize, n: usize) -> Result<TinyInstance> {
    let cfg = MambaConfig {
        n_layers: 1,
        d_model: d,
        d_inner: d,
        d_state: n,
        d_conv: 2,
        dt_rank: 1,
        vocab_size: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = TINY_DELTA_RANGE;
    for _ in 0..1000 {
        let mut layer = MambaLayer::init(&cfg, &mut rng)?;
        for v in layer.a_log.data_mut() {
            *v = rng.random_range(-1.0..2.0);
        }
        for v in layer.dt_bias.data_mut() {
            *v = inverse_softplus(rng.random_range(lo + 0.03..hi - 0.08));
        }
        for v in layer.dt_proj.data_mut() {
            *v *= 0.3;
        }
        let xs = (0..b * l * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::new("x", &[b, l, d], xs)?;
        let in_range = (0..b).try_fold(true, |ok, bi| -> Result<bool> {
            let p = layer.ssm_params(&x.data()[bi * l * d..(bi + 1) * l * d], l)?;
            Ok(ok && p.delta.iter().all(|&v| (lo..=hi).contains(&v)))
        })?;
        if in_range {
            return Ok(TinyInstance { layer, x });
        }
    }
    Err(Error::Numerical("could not draw step sizes inside the target range".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_basics() {
        let y = Tensor::new("y", &[1, 2], vec![3.0, 4.0]).unwrap();
        let z = Tensor::zeros("z", &[1, 2]).unwrap();
        assert_eq!(loss_l2(&y, &y).unwrap(), 0.0);
        assert_eq!(loss_l2(&y, &z).unwrap(), 25.0);
        let a = Tensor::new("a", &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new("b", &[2, 3], vec![0.5, 2.5, 3.0, 1.0, 5.0, 7.0]).unwrap();
        let mut s = 0.0;
        for i in 0..6 {
            s += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((loss_l2(&a, &b).unwrap() - s / 2.0).abs() < 1e-15);
        assert!(loss_l2(&a, &y).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn tiny_instance_deltas_in_range() {
        for seed in 0..5 {
            let inst = tiny_instance(seed, 4, 8, 4, 4).unwrap();
            let (_, tr) = selective_scan(&inst.layer, &inst.x, true).unwrap();
            let tr = tr.unwrap();
            assert!(tr.deltas.data().iter().all(|&v| (0.05..=0.3).contains(&v)));
        }
    }

    #[test]
    fn unrolled_matches_recurrence() {
        let inst = tiny_instance(9, 2, 6, 4, 3).unwrap();
        let y = inst.dense_output().unwrap();
        let u = unrolled_scan(&inst.layer, &inst.x).unwrap();
        assert!(y.max_abs_diff(&u).unwrap() < 1e-12);
    }

    #[test]
    fn fd_zero_influence_entry() {
        let mut inst = tiny_instance(3, 2, 6, 2, 3).unwrap();
        inst.layer = zero_state_rows(&inst.layer, &[1]).unwrap();
        let y = inst.dense_output().unwrap();
        let h = fd_hessian_diag(&inst.layer, &inst.x, &y, FdConfig::default()).unwrap();
        for ch in 0..2 {
            assert!(h.get2(ch, 1).abs() < 1e-6);
        }
        assert!(h.data().iter().all(|&v| v >= -1e-6));
    }

    #[test]
    fn fd_matches_two_step_closed_form() {
        let inst = tiny_instance(5, 1, 2, 1, 1).unwrap();
        let y = inst.dense_output().unwrap();
        let h = fd_hessian_diag(&inst.layer, &inst.x, &y, FdConfig::default()).unwrap();
        let p = inst.layer.ssm_params(inst.x.data(), 2).unwrap();
        let a = -inst.layer.a_log.data()[0].exp();
        let u0 = p.delta[0] * p.b[0] * inst.x.data()[0];
        let d1 = p.delta[1];
        let grad = p.c[1] * u0 * (d1 * a).exp() * d1 * a;
        let expect = 2.0 * grad * grad;
        assert!(((h.data()[0] - expect) / expect).abs() < 1e-4, "{} vs {expect}", h.data()[0]);
    }

    #[test]
    fn fd_step_refinement_is_stable() {
        let inst = tiny_instance(6, 2, 5, 2, 2).unwrap();
        let y = inst.dense_output().unwrap();
        let coarse = fd_hessian_diag(&inst.layer, &inst.x, &y, FdConfig { step: 1e-3 }).unwrap();
        let fine = fd_hessian_diag(&inst.layer, &inst.x, &y, FdConfig { step: 1e-4 }).unwrap();
        let scale = fine.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (c, f) in coarse.data().iter().zip(fine.data()) {
            assert!((c - f).abs() <= 1e-6 * scale.max(1.0) + 1e-3 * f.abs(), "{c} vs {f}");
        }
    }

    #[test]
    fn exhaustive_edges_and_candidates() {
        let inst = tiny_instance(7, 2, 5, 2, 2).unwrap();
        let (m0, e0) = exhaustive_best_mask(&inst.layer, &inst.x, 0).unwrap();
        assert_eq!((m0.k_pruned, e0), (0, 0.0));
        let (mall, _) = exhaustive_best_mask(&inst.layer, &inst.x, 4).unwrap();
        assert_eq!(mall.mask.count_zeros(), 4);
        let (m1, e1) = exhaustive_best_mask(&inst.layer, &inst.x, 1).unwrap();
        let errs: Vec<f64> = (0..4).map(|i| mask_error(&inst.layer, &inst.x, &[i]).unwrap()).collect();
        let best = argsort(&errs)[0];
        assert_eq!(m1.zeros(), vec![best]);
        assert!((e1 - errs[best]).abs() < 1e-15);
        let big = tiny_instance(1, 1, 2, 4, 5).unwrap();
        assert!(exhaustive_best_mask(&big.layer, &big.x, 1).is_err());
    }

    #[test]
    fn saliency_ranking_cases() {
        let a = Tensor::new("a", &[1, 3], vec![0.5, -2.0, 1.0]).unwrap();
        let uniform = Tensor::full("h", &[1, 3], 3.0).unwrap();
        assert_eq!(saliency_ranking(&uniform, &a).unwrap(), vec![0, 2, 1]);
        let zero = Tensor::zeros("a", &[1, 3]).unwrap();
        assert!(diagonal_saliency(&uniform, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
