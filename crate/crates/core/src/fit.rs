//! Reverse-mode gradient of the mean next-token NLL with respect to every
//! layer's `A_log`, used to settle the trained fixture's transitions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{silu, softplus, MambaLayer, MambaModel, EXP_CLAMP, RMS_EPS};
use crate::tensor::{linear_rows, Tensor};

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

/// `dx += dy · W` for `y = x Wᵀ` over `rows` rows.
fn linear_backward(dy: &[f64], rows: usize, w: &Tensor, dx: &mut [f64]) {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    for r in 0..rows {
        let g = &dy[r * out..(r + 1) * out];
        let d = &mut dx[r * inp..(r + 1) * inp];
        for (o, &gv) in g.iter().enumerate() {
            if gv != 0.0 {
                for (dv, wv) in d.iter_mut().zip(w.row(o)) {
                    *dv += gv * wv;
                }
            }
        }
    }
}

struct Norm {
    inv: Vec<f64>,
}

fn norm_forward(x: &[f64], rows: usize, w: &[f64]) -> (Vec<f64>, Norm) {
    let k = w.len();
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * k..(r + 1) * k];
        let s = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / k as f64 + RMS_EPS).sqrt();
        out.extend(row.iter().zip(w).map(|(v, g)| v * s * g));
        inv.push(s);
    }
    (out, Norm { inv })
}

/// Gradient through `x ↦ w ⊙ x / rms(x)`, accumulated into `dx`.
fn norm_backward(x: &[f64], w: &[f64], cache: &Norm, dout: &[f64], dx: &mut [f64]) {
    let k = w.len();
    for (r, &s) in cache.inv.iter().enumerate() {
        let xr = &x[r * k..(r + 1) * k];
        let gw: Vec<f64> = dout[r * k..(r + 1) * k].iter().zip(w).map(|(a, b)| a * b).collect();
        let proj: f64 = gw.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() * s * s * s / k as f64;
        for j in 0..k {
            dx[r * k + j] += gw[j] * s - xr[j] * proj;
        }
    }
}

/// Forward activations of one block on one sequence.
struct BlockCache {
    norm: Norm,
    u: Vec<f64>,
    x: Vec<f64>,
    conv_pre: Vec<f64>,
    xc: Vec<f64>,
    z_pre: Vec<f64>,
    dt_pre: Vec<f64>,
    delta: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    /// `h_t` for t = 0..L, `[L, D, N]`.
    h: Vec<f64>,
    y: Vec<f64>,
}

fn block_forward_cached(layer: &MambaLayer, resid: &[f64], norm_w: &[f64], l: usize) -> Result<(Vec<f64>, BlockCache)> {
    let (d, n, r, k) = (layer.d_inner(), layer.d_state(), layer.dt_rank(), layer.d_conv());
    let (u, norm) = norm_forward(resid, l, norm_w);
    let xr = linear_rows(&u, l, &layer.in_proj)?;
    let mut x = Vec::with_capacity(l * d);
    let mut z_pre = Vec::with_capacity(l * d);
    for t in 0..l {
        x.extend_from_slice(&xr[t * 2 * d..t * 2 * d + d]);
        z_pre.extend_from_slice(&xr[t * 2 * d + d..(t + 1) * 2 * d]);
    }
    let conv_pre = layer.causal_conv(&x, l);
    let xc: Vec<f64> = conv_pre.iter().map(|&v| silu(v)).collect();
    let x_dbl = linear_rows(&xc, l, &layer.x_proj)?;
    let rows = r + 2 * n;
    let mut dt_low = Vec::with_capacity(l * r);
    let mut b = Vec::with_capacity(l * n);
    let mut c = Vec::with_capacity(l * n);
    for t in 0..l {
        let row = &x_dbl[t * rows..(t + 1) * rows];
        dt_low.extend_from_slice(&row[..r]);
        b.extend_from_slice(&row[r..r + n]);
        c.extend_from_slice(&row[r + n..]);
    }
    let mut dt_pre = linear_rows(&dt_low, l, &layer.dt_proj)?;
    for t in 0..l {
        for ch in 0..d {
            dt_pre[t * d + ch] += layer.dt_bias.data()[ch];
        }
    }
    let delta: Vec<f64> = dt_pre.iter().map(|&v| softplus(v)).collect();
    let a: Vec<f64> = layer.a_log.data().iter().map(|v| -v.exp()).collect();
    let mut h = vec![0.0; l * d * n];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let dl = delta[t * d + ch];
            let xv = xc[t * d + ch];
            let mut acc = layer.d_skip.data()[ch] * xv;
            for s in 0..n {
                let prev = if t == 0 { 0.0 } else { h[((t - 1) * d + ch) * n + s] };
                let e = (dl * a[ch * n + s]).clamp(EXP_CLAMP.0, EXP_CLAMP.1).exp();
                let hv = e * prev + dl * b[t * n + s] * xv;
                h[(t * d + ch) * n + s] = hv;
                acc += c[t * n + s] * hv;
            }
            y[t * d + ch] = acc;
        }
    }
    let gated: Vec<f64> = y.iter().zip(&z_pre).map(|(a, z)| a * silu(*z)).collect();
    let out = linear_rows(&gated, l, &layer.out_proj)?;
    debug_assert_eq!(k, layer.conv_weight.shape()[1]);
    Ok((
        out,
        BlockCache {
            norm,
            u,
            x,
            conv_pre,
            xc,
            z_pre,
            dt_pre,
            delta,
            b,
            c,
            h,
            y,
        },
    ))
}

/// Back-propagates `dout` through one block, adding the `A_log` gradient to
/// `d_alog` and the residual-input gradient to `dresid`.
fn block_backward(
    layer: &MambaLayer,
    resid: &[f64],
    norm_w: &[f64],
    cache: &BlockCache,
    dout: &[f64],
    l: usize,
    d_alog: &mut [f64],
    dresid: &mut [f64],
) {
    let (d, n, r, k, dm) = (layer.d_inner(), layer.d_state(), layer.dt_rank(), layer.d_conv(), layer.d_model());
    let mut dgated = vec![0.0; l * d];
    linear_backward(dout, l, &layer.out_proj, &mut dgated);
    let mut dxr = vec![0.0; l * 2 * d];
    let mut dy = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let i = t * d + ch;
            let z = cache.z_pre[i];
            dy[i] = dgated[i] * silu(z);
            dxr[t * 2 * d + d + ch] = dgated[i] * cache.y[i] * silu_grad(z);
        }
    }
    let a: Vec<f64> = layer.a_log.data().iter().map(|v| -v.exp()).collect();
    let mut dxc = vec![0.0; l * d];
    let mut ddelta = vec![0.0; l * d];
    let mut db = vec![0.0; l * n];
    let mut dc = vec![0.0; l * n];
    let mut da = vec![0.0; d * n];
    let mut carry = vec![0.0; d * n];
    for t in (0..l).rev() {
        for ch in 0..d {
            let i = t * d + ch;
            let (dl, xv, g) = (cache.delta[i], cache.xc[i], dy[i]);
            dxc[i] += g * layer.d_skip.data()[ch];
            for s in 0..n {
                let j = ch * n + s;
                let hv = cache.h[i * n + s];
                dc[t * n + s] += g * hv;
                let dh = g * cache.c[t * n + s] + carry[j];
                let prev = if t == 0 { 0.0 } else { cache.h[((t - 1) * d + ch) * n + s] };
                let raw = dl * a[j];
                let e = raw.clamp(EXP_CLAMP.0, EXP_CLAMP.1).exp();
                if raw > EXP_CLAMP.0 {
                    let de = dh * prev * e;
                    da[j] += de * dl;
                    ddelta[i] += de * a[j];
                }
                ddelta[i] += dh * cache.b[t * n + s] * xv;
                db[t * n + s] += dh * dl * xv;
                dxc[i] += dh * dl * cache.b[t * n + s];
                carry[j] = dh * e;
            }
        }
    }
    for (g, (&dv, &av)) in d_alog.iter_mut().zip(da.iter().zip(&a)) {
        *g += dv * av;
    }
    // δ = softplus(dt_proj · dt_low + bias), (dt_low, B, C) = x_proj · xc
    let rows = r + 2 * n;
    let dt_grad: Vec<f64> = ddelta.iter().zip(&cache.dt_pre).map(|(g, &p)| g * sigmoid(p)).collect();
    let mut ddt_low = vec![0.0; l * r];
    linear_backward(&dt_grad, l, &layer.dt_proj, &mut ddt_low);
    let mut dxdbl = vec![0.0; l * rows];
    for t in 0..l {
        dxdbl[t * rows..t * rows + r].copy_from_slice(&ddt_low[t * r..(t + 1) * r]);
        dxdbl[t * rows + r..t * rows + r + n].copy_from_slice(&db[t * n..(t + 1) * n]);
        dxdbl[t * rows + r + n..(t + 1) * rows].copy_from_slice(&dc[t * n..(t + 1) * n]);
    }
    linear_backward(&dxdbl, l, &layer.x_proj, &mut dxc);
    let mut dx = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let g = dxc[t * d + ch] * silu_grad(cache.conv_pre[t * d + ch]);
            if g == 0.0 {
                continue;
            }
            for (tap, &wv) in layer.conv_weight.row(ch).iter().enumerate() {
                if let Some(src) = (t + tap).checked_sub(k - 1) {
                    dx[src * d + ch] += g * wv;
                }
            }
        }
    }
    for t in 0..l {
        dxr[t * 2 * d..t * 2 * d + d].copy_from_slice(&dx[t * d..(t + 1) * d]);
    }
    let mut du = vec![0.0; l * dm];
    linear_backward(&dxr, l, &layer.in_proj, &mut du);
    debug_assert_eq!(cache.u.len(), l * dm);
    debug_assert_eq!(cache.x.len(), l * d);
    norm_backward(resid, norm_w, &cache.norm, &du, dresid);
}

/// Summed NLL of one sequence and its `A_log` gradients, one flat vector per layer.
fn sequence_grad(model: &MambaModel, seq: &[u32]) -> Result<(f64, Vec<Vec<f64>>)> {
    let l = seq.len();
    let (dm, v, nl) = (model.config.d_model, model.config.vocab_size, model.config.n_layers);
    let mut resids = vec![model.embed(seq)?];
    let mut caches = Vec::with_capacity(nl);
    for (i, layer) in model.layers.iter().enumerate() {
        let (out, cache) = block_forward_cached(layer, &resids[i], model.norms[i].data(), l)?;
        resids.push(resids[i].iter().zip(&out).map(|(a, b)| a + b).collect());
        caches.push(cache);
    }
    let (feat, fnorm) = norm_forward(&resids[nl], l, model.norms[nl].data());
    let logits = linear_rows(&feat, l, &model.lm_head)?;
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; l * v];
    for t in 0..l - 1 {
        let row = &logits[t * v..(t + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let target = seq[t + 1] as usize;
        loss += max + z.ln() - row[target];
        for (j, x) in row.iter().enumerate() {
            dlogits[t * v + j] = (x - max).exp() / z;
        }
        dlogits[t * v + target] -= 1.0;
    }
    let mut dfeat = vec![0.0; l * dm];
    linear_backward(&dlogits, l, &model.lm_head, &mut dfeat);
    let mut dresid = vec![0.0; l * dm];
    norm_backward(&resids[nl], model.norms[nl].data(), &fnorm, &dfeat, &mut dresid);
    let mut grads: Vec<Vec<f64>> = model.layers.iter().map(|ly| vec![0.0; ly.a_log.numel()]).collect();
    for i in (0..nl).rev() {
        // the residual branch passes dresid through unchanged
        let mut dnext = dresid.clone();
        block_backward(
            &model.layers[i],
            &resids[i],
            model.norms[i].data(),
            &caches[i],
            &dresid,
            l,
            &mut grads[i],
            &mut dnext,
        );
        dresid = dnext;
    }
    Ok((loss, grads))
}

/// Mean next-token NLL over the corpus and its gradient for every layer's `A_log`.
pub(crate) fn a_log_nll_grad(model: &MambaModel, corpus: &[Vec<u32>]) -> Result<(f64, Vec<Tensor>)> {
    let count: usize = corpus.iter().map(|s| s.len().saturating_sub(1)).sum();
    if count == 0 {
        return Err(Error::arg("gradient needs a sequence of at least two tokens"));
    }
    let parts = corpus
        .par_iter()
        .map(|s| sequence_grad(model, s))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = model.layers.iter().map(|ly| vec![0.0; ly.a_log.numel()]).collect();
    for (l, g) in parts {
        loss += l;
        for (acc, part) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / count as f64;
    let tensors = grads
        .into_iter()
        .zip(&model.layers)
        .map(|(g, ly)| Tensor::new("A_log.grad", ly.a_log.shape(), g.into_iter().map(|v| v * scale).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss * scale, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::make_synthetic_corpus;
    use crate::eval::perplexity;
    use crate::model::MambaConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = MambaConfig {
            n_layers: 2,
            d_model: 4,
            d_inner: 8,
            d_state: 3,
            d_conv: 3,
            dt_rank: 2,
            vocab_size: 6,
        };
        let mut model = MambaModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for layer in &mut model.layers {
            layer.dt_bias.data_mut().iter_mut().for_each(|v| *v += 2.0);
        }
        let corpus = make_synthetic_corpus(5, 6, 3, 7).unwrap().sequences;
        let (loss, grads) = a_log_nll_grad(&model, &corpus).unwrap();
        assert!((loss - perplexity(&model, &corpus).unwrap().ln()).abs() < 1e-12);
        let h = 1e-3;
        for (li, g) in grads.iter().enumerate() {
            for idx in [0, 11, 17, 23] {
                let mut plus = model.clone();
                plus.layers[li].a_log.data_mut()[idx] += h;
                let mut minus = model.clone();
                minus.layers[li].a_log.data_mut()[idx] -= h;
                let fd = (perplexity(&plus, &corpus).unwrap().ln() - perplexity(&minus, &corpus).unwrap().ln()) / (2.0 * h);
                let an = g.data()[idx];
                assert!(an.abs() > 1e-9 && (fd - an).abs() <= 1e-4 * fd.abs() + 1e-11, "layer {li} entry {idx}: fd {fd} vs {an}");
            }
        }
    }
}
