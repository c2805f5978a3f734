//! Mamba block definition and the instrumented selective-scan forward pass.
//!
//! Shapes follow the usual Mamba layout: `D = d_inner` channels, each with an
//! independent diagonal SSM of width `N = d_state`.
//!
//! ```text
//! u [L, d_model] -> in_proj -> (x, res)
//!   x -> causal depthwise conv -> SiLU -> x_proj -> (dt_low, B, C)
//!   delta = softplus(dt_proj · dt_low + dt_bias)
//!   y = selective_scan(x; A, delta, B, C) + D_skip ⊙ x
//!   out = out_proj(y ⊙ SiLU(res))
//! ```

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, linear_rows, Tensor};

/// Embedding init scale of the reference implementation; keeps the blocks,
/// not the raw embedding, dominant in the residual stream.
pub const EMBED_STD: f64 = 0.02;
pub const RMS_EPS: f64 = 1e-5;
/// Bounds for the exponent of the discretized transition.
pub const EXP_CLAMP: (f64, f64) = (-60.0, 0.0);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub dt_rank: usize,
    pub vocab_size: usize,
}

impl MambaConfig {
    /// The shipped desk-scale shape: 2 layers, d_model 32, D 64, N 8.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            d_inner: 64,
            d_state: 8,
            d_conv: 4,
            dt_rank: 2,
            vocab_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("dt_rank", self.dt_rank),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("config field {name} must be >= 1")));
        }
        if self.d_inner % self.d_model != 0 {
            return Err(Error::arg(format!(
                "d_inner {} is not an integer multiple of d_model {}",
                self.d_inner, self.d_model
            )));
        }
        Ok(())
    }
}

/// The linear and convolutional sub-modules of a block, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Module {
    InProj,
    Conv1d,
    XProj,
    DtProj,
    OutProj,
}

impl Module {
    pub const ALL: [Module; 5] = [
        Module::InProj,
        Module::Conv1d,
        Module::XProj,
        Module::DtProj,
        Module::OutProj,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Module::InProj => "in_proj",
            Module::Conv1d => "conv1d",
            Module::XProj => "x_proj",
            Module::DtProj => "dt_proj",
            Module::OutProj => "out_proj",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MambaLayer {
    /// `[D, N]`, with `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[D, d_conv]` depthwise kernel.
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    /// `[2D, d_model]`
    pub in_proj: Tensor,
    /// `[dt_rank + 2N, D]`; rows are the dt block, then B, then C.
    pub x_proj: Tensor,
    /// `[D, dt_rank]`
    pub dt_proj: Tensor,
    pub dt_bias: Tensor,
    /// `[d_model, D]`
    pub out_proj: Tensor,
    /// `[D]`
    pub d_skip: Tensor,
}

/// Per-module input activations captured during an instrumented forward pass.
/// Each entry is `[B, L, width]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModuleInputs(pub BTreeMap<Module, Tensor>);

impl ModuleInputs {
    pub fn get(&self, m: Module) -> Option<&Tensor> {
        self.0.get(&m)
    }
}

/// Recorded internals of a selective scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanTrace {
    /// `[B, L, D, N]`: `hidden[b, t]` is the state after step t.
    pub hidden: Tensor,
    /// `[B, L, D]`, post-softplus step sizes.
    pub deltas: Tensor,
    pub inputs: ModuleInputs,
}

impl ScanTrace {
    pub fn batch(&self) -> usize {
        self.hidden.shape()[0]
    }
}

pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// `A = -exp(a_log)`, elementwise.
pub fn parameterize_a(a_log: &Tensor) -> Tensor {
    a_log.map(|v| -v.exp()).with_name("A")
}

#[inline]
pub(crate) fn decay(delta: f64, a: f64) -> f64 {
    (delta * a).clamp(EXP_CLAMP.0, EXP_CLAMP.1).exp()
}

/// `(ΔA)[b,l,d,n] = exp(delta[b,l,d] · a[d,n])`.
pub fn discretize(a: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let (d, n) = a.dims2()?;
    let (bsz, l, d2) = delta.dims3()?;
    if d != d2 {
        return Err(Error::dim(format!(
            "discretize: A has {d} channels, delta has {d2}"
        )));
    }
    let mut out = Vec::with_capacity(bsz * l * d * n);
    for bl in 0..bsz * l {
        for c in 0..d {
            let dt = delta.data()[bl * d + c];
            out.extend(a.row(c).iter().map(|&av| decay(dt, av)));
        }
    }
    Tensor::new("dA", &[bsz, l, d, n], out)
}

/// Input-dependent SSM parameters for one sequence.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub seqlen: usize,
    /// `[L, D]`
    pub delta: Vec<f64>,
    /// `[L, N]`
    pub b: Vec<f64>,
    /// `[L, N]`
    pub c: Vec<f64>,
    /// `[L, dt_rank]`
    pub dt_low: Vec<f64>,
}

/// Runs the diagonal recurrence for one sequence.
///
/// `h_t = exp(δ_t A) ⊙ h_{t-1} + (δ_t B_t) ⊙ x_t`, `h_{-1} = 0`,
/// `y_t = h_t · C_t + d_skip ⊙ x_t`. When `hidden` is given it receives every
/// `h_t` as `[L, D, N]`.
pub fn scan_sequence(
    a: &Tensor,
    params: &SsmParams,
    x: &[f64],
    d_skip: &[f64],
    mut hidden: Option<&mut Vec<f64>>,
) -> Result<Vec<f64>> {
    let (d, n) = a.dims2()?;
    let l = params.seqlen;
    if x.len() != l * d || params.delta.len() != l * d || params.b.len() != l * n {
        return Err(Error::dim(format!(
            "scan: inconsistent lengths for L={l}, D={d}, N={n}"
        )));
    }
    let a = a.data();
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; l * d];
    if let Some(buf) = hidden.as_deref_mut() {
        buf.clear();
        buf.reserve(l * d * n);
    }
    for t in 0..l {
        let bt = &params.b[t * n..(t + 1) * n];
        let ct = &params.c[t * n..(t + 1) * n];
        for ch in 0..d {
            let dt = params.delta[t * d + ch];
            let xv = x[t * d + ch];
            let hs = &mut h[ch * n..(ch + 1) * n];
            let ar = &a[ch * n..(ch + 1) * n];
            for s in 0..n {
                hs[s] = decay(dt, ar[s]) * hs[s] + dt * bt[s] * xv;
            }
            let out = dot(hs, ct) + d_skip[ch] * xv;
            if !out.is_finite() {
                return Err(Error::NonFinite {
                    step: t,
                    context: format!("channel {ch}"),
                });
            }
            y[t * d + ch] = out;
        }
        if let Some(buf) = hidden.as_deref_mut() {
            buf.extend_from_slice(&h);
        }
    }
    Ok(y)
}

impl MambaLayer {
    pub fn d_inner(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn d_state(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_proj.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.in_proj.shape()[1]
    }

    pub fn d_conv(&self) -> usize {
        self.conv_weight.shape()[1]
    }

    /// Mamba-style initialization for a fresh layer.
    pub fn init(cfg: &MambaConfig, rng: &mut impl Rng) -> Result<Self> {
        let (dm, di, ds, k, r) = (cfg.d_model, cfg.d_inner, cfg.d_state, cfg.d_conv, cfg.dt_rank);
        let uniform = |rng: &mut dyn rand::RngCore, shape: &[usize], bound: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new("w", shape, data)
        };
        let in_proj = uniform(rng, &[2 * di, dm], 1.0 / (dm as f64).sqrt())?;
        let conv_weight = uniform(rng, &[di, k], 1.0 / (k as f64).sqrt())?;
        let conv_bias = uniform(rng, &[di], 1.0 / (k as f64).sqrt())?;
        let x_proj = uniform(rng, &[r + 2 * ds, di], 1.0 / (di as f64).sqrt())?;
        let dt_proj = uniform(rng, &[di, r], 1.0 / (r as f64).sqrt())?;
        let (dt_min, dt_max) = (1e-3f64, 1e-1f64);
        let dt_bias: Vec<f64> = (0..di)
            .map(|_| {
                let u: f64 = rng.random();
                let dt = (u * (dt_max.ln() - dt_min.ln()) + dt_min.ln()).exp().max(1e-4);
                inverse_softplus(dt)
            })
            .collect();
        let out_proj = uniform(rng, &[dm, di], 1.0 / (di as f64).sqrt())?;
        let a_log: Vec<f64> = (0..di)
            .flat_map(|_| (0..ds).map(|s| ((s + 1) as f64).ln()))
            .collect();
        Ok(Self {
            a_log: Tensor::new("A_log", &[di, ds], a_log)?,
            conv_weight,
            conv_bias,
            in_proj,
            x_proj,
            dt_proj,
            dt_bias: Tensor::new("dt_bias", &[di], dt_bias)?,
            out_proj,
            d_skip: Tensor::full("D", &[di], 1.0)?,
        })
    }

    pub fn validate(&self, cfg: &MambaConfig) -> Result<()> {
        let (di, ds, r) = (cfg.d_inner, cfg.d_state, cfg.dt_rank);
        self.a_log.expect_shape(&[di, ds])?;
        self.conv_weight.expect_shape(&[di, cfg.d_conv])?;
        self.conv_bias.expect_shape(&[di])?;
        self.in_proj.expect_shape(&[2 * di, cfg.d_model])?;
        self.x_proj.expect_shape(&[r + 2 * ds, di])?;
        self.dt_proj.expect_shape(&[di, r])?;
        self.dt_bias.expect_shape(&[di])?;
        self.out_proj.expect_shape(&[cfg.d_model, di])?;
        self.d_skip.expect_shape(&[di])?;
        Ok(())
    }

    /// The weight tensor of a linear/conv sub-module.
    pub fn module_weight(&self, m: Module) -> &Tensor {
        match m {
            Module::InProj => &self.in_proj,
            Module::Conv1d => &self.conv_weight,
            Module::XProj => &self.x_proj,
            Module::DtProj => &self.dt_proj,
            Module::OutProj => &self.out_proj,
        }
    }

    pub fn module_weight_mut(&mut self, m: Module) -> &mut Tensor {
        match m {
            Module::InProj => &mut self.in_proj,
            Module::Conv1d => &mut self.conv_weight,
            Module::XProj => &mut self.x_proj,
            Module::DtProj => &mut self.dt_proj,
            Module::OutProj => &mut self.out_proj,
        }
    }

    /// Computes `(delta, B, C)` from the SSM input `x` of one sequence (`[L, D]`).
    pub fn ssm_params(&self, x: &[f64], seqlen: usize) -> Result<SsmParams> {
        let (r, n) = (self.dt_rank(), self.d_state());
        let rows = self.x_proj.shape()[0];
        if rows != r + 2 * n {
            return Err(Error::dim(format!(
                "x_proj has {rows} rows, expected dt_rank + 2N = {}",
                r + 2 * n
            )));
        }
        let x_dbl = linear_rows(x, seqlen, &self.x_proj)?;
        let mut dt_low = Vec::with_capacity(seqlen * r);
        let mut b = Vec::with_capacity(seqlen * n);
        let mut c = Vec::with_capacity(seqlen * n);
        for t in 0..seqlen {
            let row = &x_dbl[t * rows..(t + 1) * rows];
            dt_low.extend_from_slice(&row[..r]);
            b.extend_from_slice(&row[r..r + n]);
            c.extend_from_slice(&row[r + n..]);
        }
        let mut delta = linear_rows(&dt_low, seqlen, &self.dt_proj)?;
        let d = self.d_inner();
        for t in 0..seqlen {
            for ch in 0..d {
                let v = &mut delta[t * d + ch];
                *v = softplus(*v + self.dt_bias.data()[ch]);
            }
        }
        Ok(SsmParams {
            seqlen,
            delta,
            b,
            c,
            dt_low,
        })
    }

    /// Causal depthwise convolution of `x` (`[L, D]`), without activation.
    pub fn causal_conv(&self, x: &[f64], seqlen: usize) -> Vec<f64> {
        let (d, k) = (self.d_inner(), self.d_conv());
        let mut out = vec![0.0; seqlen * d];
        for t in 0..seqlen {
            for ch in 0..d {
                let w = self.conv_weight.row(ch);
                let mut s = self.conv_bias.data()[ch];
                for (tap, &wv) in w.iter().enumerate() {
                    // tap k reads x[t - (K-1) + k]
                    if let Some(src) = (t + tap).checked_sub(k - 1) {
                        s += wv * x[src * d + ch];
                    }
                }
                out[t * d + ch] = s;
            }
        }
        out
    }
}

/// Unfolded causal windows of channel `ch`: `[L, d_conv]`, zero padded on the left.
pub fn causal_windows(x: &[f64], seqlen: usize, d: usize, ch: usize, k: usize) -> Vec<f64> {
    let mut w = vec![0.0; seqlen * k];
    for t in 0..seqlen {
        for tap in 0..k {
            if let Some(src) = (t + tap).checked_sub(k - 1) {
                w[t * k + tap] = x[src * d + ch];
            }
        }
    }
    w
}

fn stack(name: &str, parts: &[Vec<f64>], inner: &[usize]) -> Result<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(inner);
    Tensor::new(name, &shape, parts.concat())
}

/// Selective scan over a batch `x: [B, L, D]` of SSM inputs, with `delta`, `B`
/// and `C` derived from `x` through `x_proj` / `dt_proj`.
pub fn selective_scan(
    layer: &MambaLayer,
    x: &Tensor,
    record: bool,
) -> Result<(Tensor, Option<ScanTrace>)> {
    let (bsz, l, d) = x.dims3()?;
    if d != layer.d_inner() {
        return Err(Error::dim(format!(
            "selective_scan: input width {d}, layer has {} channels",
            layer.d_inner()
        )));
    }
    let a = parameterize_a(&layer.a_log);
    let n = layer.d_state();
    let mut ys = Vec::with_capacity(bsz);
    let mut hiddens = Vec::new();
    let mut deltas = Vec::new();
    let mut dt_lows = Vec::new();
    for b in 0..bsz {
        let xb = &x.data()[b * l * d..(b + 1) * l * d];
        let params = layer.ssm_params(xb, l)?;
        let mut hidden = Vec::new();
        let y = scan_sequence(
            &a,
            &params,
            xb,
            layer.d_skip.data(),
            record.then_some(&mut hidden),
        )?;
        ys.push(y);
        if record {
            hiddens.push(hidden);
            deltas.push(params.delta);
            dt_lows.push(params.dt_low);
        }
    }
    let y = stack("y", &ys, &[l, d])?;
    let trace = if record {
        let mut inputs = BTreeMap::new();
        inputs.insert(Module::XProj, x.clone().with_name("x_proj.input"));
        inputs.insert(
            Module::DtProj,
            stack("dt_proj.input", &dt_lows, &[l, layer.dt_rank()])?,
        );
        Some(ScanTrace {
            hidden: stack("hidden", &hiddens, &[l, d, n])?,
            deltas: stack("deltas", &deltas, &[l, d])?,
            inputs: ModuleInputs(inputs),
        })
    } else {
        None
    };
    Ok((y, trace))
}

/// One full Mamba block on `u: [B, L, d_model]`.
pub fn block_forward(
    layer: &MambaLayer,
    u: &Tensor,
    record: bool,
) -> Result<(Tensor, Option<ScanTrace>)> {
    let (bsz, l, dm) = u.dims3()?;
    if dm != layer.d_model() {
        return Err(Error::dim(format!(
            "block_forward: input width {dm}, layer expects {}",
            layer.d_model()
        )));
    }
    let d = layer.d_inner();
    let mut conv_in = Vec::with_capacity(bsz);
    let mut ssm_in = Vec::with_capacity(bsz);
    let mut gates = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let ub = &u.data()[b * l * dm..(b + 1) * l * dm];
        let xr = linear_rows(ub, l, &layer.in_proj)?;
        let mut x = Vec::with_capacity(l * d);
        let mut res = Vec::with_capacity(l * d);
        for t in 0..l {
            x.extend_from_slice(&xr[t * 2 * d..t * 2 * d + d]);
            res.extend(xr[t * 2 * d + d..(t + 1) * 2 * d].iter().map(|&v| silu(v)));
        }
        let xc: Vec<f64> = layer.causal_conv(&x, l).into_iter().map(silu).collect();
        conv_in.push(x);
        ssm_in.push(xc);
        gates.push(res);
    }
    let ssm_x = stack("ssm.input", &ssm_in, &[l, d])?;
    let (y, trace) = selective_scan(layer, &ssm_x, record)?;

    let dm_out = layer.out_proj.shape()[0];
    let mut outs = Vec::with_capacity(bsz);
    let mut gated_all = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let yb = &y.data()[b * l * d..(b + 1) * l * d];
        let gated: Vec<f64> = yb.iter().zip(&gates[b]).map(|(a, g)| a * g).collect();
        outs.push(linear_rows(&gated, l, &layer.out_proj)?);
        if record {
            gated_all.push(gated);
        }
    }
    let out = stack("block.out", &outs, &[l, dm_out])?;
    let trace = match trace {
        Some(mut tr) => {
            let ins = &mut tr.inputs.0;
            ins.insert(Module::InProj, u.clone().with_name("in_proj.input"));
            ins.insert(Module::Conv1d, stack("conv1d.input", &conv_in, &[l, d])?);
            ins.insert(Module::OutProj, stack("out_proj.input", &gated_all, &[l, d])?);
            Some(tr)
        }
        None => None,
    };
    Ok((out, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MambaModel {
    pub config: MambaConfig,
    /// `[vocab, d_model]`
    pub embedding: Tensor,
    pub layers: Vec<MambaLayer>,
    /// `n_layers + 1` RMS norm weights; the last one precedes the head.
    pub norms: Vec<Tensor>,
    /// `[vocab, d_model]`
    pub lm_head: Tensor,
}

pub fn rms_norm(x: &[f64], rows: usize, weight: &[f64]) -> Vec<f64> {
    let w = weight.len();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x[r * w..(r + 1) * w];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / w as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        out.extend(row.iter().zip(weight).map(|(v, g)| v * inv * g));
    }
    out
}

impl MambaModel {
    pub fn init(config: MambaConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (v, dm) = (config.vocab_size, config.d_model);
        let emb: Vec<f64> = (0..v * dm)
            .map(|_| EMBED_STD * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        let layers = (0..config.n_layers)
            .map(|_| MambaLayer::init(&config, rng))
            .collect::<Result<Vec<_>>>()?;
        let norms = (0..=config.n_layers)
            .map(|_| Tensor::full("norm", &[dm], 1.0))
            .collect::<Result<Vec<_>>>()?;
        let bound = 1.0 / (dm as f64).sqrt();
        let head = (0..v * dm).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Self {
            embedding: Tensor::new("embedding", &[v, dm], emb)?,
            layers,
            norms,
            lm_head: Tensor::new("lm_head", &[v, dm], head)?,
            config,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.n_layers || self.norms.len() != c.n_layers + 1 {
            return Err(Error::dim("layer/norm count does not match config"));
        }
        self.embedding.expect_shape(&[c.vocab_size, c.d_model])?;
        self.lm_head.expect_shape(&[c.vocab_size, c.d_model])?;
        for n in &self.norms {
            n.expect_shape(&[c.d_model])?;
        }
        for l in &self.layers {
            l.validate(c)?;
        }
        Ok(())
    }

    /// Residual stream at the model input, `[L, d_model]`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(tokens.len() * self.config.d_model);
        for (pos, &tok) in tokens.iter().enumerate() {
            if tok as usize >= v {
                return Err(Error::arg(format!(
                    "token id {tok} at position {pos} is out of range for vocab size {v}"
                )));
            }
            out.extend_from_slice(self.embedding.row(tok as usize));
        }
        Ok(out)
    }

    /// Normalized input to block `layer` for a batch of residual streams.
    pub fn block_input(&self, layer: usize, resid: &Tensor) -> Result<Tensor> {
        let (b, l, dm) = resid.dims3()?;
        let normed = rms_norm(resid.data(), b * l, self.norms[layer].data());
        Tensor::new("block.input", &[b, l, dm], normed)
    }

    /// `resid + block(norm(resid))` for one layer.
    pub fn apply_layer(
        &self,
        layer: usize,
        resid: &Tensor,
        record: bool,
    ) -> Result<(Tensor, Option<ScanTrace>)> {
        let normed = self.block_input(layer, resid)?;
        let (out, trace) = block_forward(&self.layers[layer], &normed, record)?;
        let next = resid.zip_with(&out, |a, b| a + b)?.with_name("resid");
        Ok((next, trace))
    }

    /// Final norm followed by the output head: `[B, L, d_model] -> [B, L, V]`.
    pub fn head(&self, resid: &Tensor) -> Result<Tensor> {
        let (b, l, _) = resid.dims3()?;
        let normed = rms_norm(resid.data(), b * l, self.norms[self.config.n_layers].data());
        let logits = linear_rows(&normed, b * l, &self.lm_head)?;
        Tensor::new("logits", &[b, l, self.config.vocab_size], logits)
    }

    pub fn embed_batch(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        let l = tokens.first().map_or(0, Vec::len);
        if tokens.is_empty() || l == 0 {
            return Err(Error::arg("empty token batch"));
        }
        if tokens.iter().any(|s| s.len() != l) {
            return Err(Error::arg("all sequences in a batch must share one length"));
        }
        let mut data = Vec::with_capacity(tokens.len() * l * self.config.d_model);
        for seq in tokens {
            data.extend(self.embed(seq)?);
        }
        Tensor::new("resid", &[tokens.len(), l, self.config.d_model], data)
    }
}

/// Token batch `[B][L]` to logits `[B, L, vocab]`.
pub fn model_forward(model: &MambaModel, tokens: &[Vec<u32>]) -> Result<Tensor> {
    let mut resid = model.embed_batch(tokens)?;
    for i in 0..model.layers.len() {
        resid = model.apply_layer(i, &resid, false)?.0;
    }
    model.head(&resid)
}
