//! Calibration data and the activation statistics gathered from it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn_prune::GramAccumulator;
use crate::model::{causal_windows, decay, parameterize_a, MambaLayer, MambaModel, Module, ScanTrace};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibSource {
    Synthetic,
    TokenFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub seed: u64,
    pub source: CalibSource,
}

impl CalibrationSet {
    pub fn seqlen(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Seeded token sequences mixing recurring motifs with uniform noise.
pub fn make_synthetic_corpus(
    seed: u64,
    vocab_size: usize,
    nsamples: usize,
    seqlen: usize,
) -> Result<CalibrationSet> {
    if vocab_size < 2 {
        return Err(Error::arg("synthetic corpus needs vocab_size >= 2"));
    }
    if nsamples == 0 || seqlen == 0 {
        return Err(Error::arg("nsamples and seqlen must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vocab_size as u32;
    let motifs: Vec<Vec<u32>> = (0..8)
        .map(|_| {
            let len = rng.random_range(3..=8);
            (0..len).map(|_| rng.random_range(0..v)).collect()
        })
        .collect();
    let sequences = (0..nsamples)
        .map(|_| {
            let mut motif = rng.random_range(0..motifs.len());
            let mut pos = rng.random_range(0..motifs[motif].len());
            (0..seqlen)
                .map(|_| {
                    if rng.random_bool(0.25) {
                        return rng.random_range(0..v);
                    }
                    let tok = motifs[motif][pos];
                    pos += 1;
                    if pos == motifs[motif].len() {
                        motif = rng.random_range(0..motifs.len());
                        pos = 0;
                    }
                    tok
                })
                .collect()
        })
        .collect();
    Ok(CalibrationSet {
        sequences,
        seed,
        source: CalibSource::Synthetic,
    })
}

/// Parses newline-delimited token sequences (whitespace-separated unsigned ints).
pub fn parse_token_lines(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(lineno, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|e| {
                        Error::arg(format!("token file line {}: `{tok}`: {e}", lineno + 1))
                    })
                })
                .collect()
        })
        .collect()
}

/// Draws `nsamples` random contiguous windows of `seqlen` tokens from a token file.
pub fn load_token_file(
    path: &Path,
    nsamples: usize,
    seqlen: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if nsamples == 0 || seqlen == 0 {
        return Err(Error::arg("nsamples and seqlen must be >= 1"));
    }
    let lines = parse_token_lines(&fs::read_to_string(path)?)?;
    let eligible: Vec<&Vec<u32>> = lines.iter().filter(|l| l.len() >= seqlen).collect();
    if eligible.is_empty() {
        return Err(Error::arg(format!(
            "{}: no sequence has at least {seqlen} tokens",
            path.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..nsamples)
        .map(|_| {
            let line = eligible[rng.random_range(0..eligible.len())];
            let start = rng.random_range(0..=line.len() - seqlen);
            line[start..start + seqlen].to_vec()
        })
        .collect();
    Ok(CalibrationSet {
        sequences,
        seed,
        source: CalibSource::TokenFile(path.to_path_buf()),
    })
}

/// Per-time-step running mean of the squared state entering each step.
///
/// `s[t]` tracks `h_{t-1}²` (the zero state at `t = 0`), averaged over every
/// accumulated trace.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStats {
    /// `[L, D, N]`
    pub s: Tensor,
    pub n_seen: usize,
}

fn running_mean_update(s: &mut [f64], sample: &[f64], n: usize) {
    let keep = (n - 1) as f64 / n as f64;
    let add = 1.0 / n as f64;
    for (acc, &v) in s.iter_mut().zip(sample) {
        *acc = keep * *acc + add * v;
    }
}

/// Batch mean of `f(b, t, d, n) · h_{b,t-1,d,n}²`, shifted so index t holds the
/// state entering step t.
fn entering_state_mean(trace: &ScanTrace, weight: impl Fn(usize, usize, usize, usize) -> f64) -> Result<Vec<f64>> {
    let (bsz, l, d, n) = trace.hidden.dims4()?;
    let h = trace.hidden.data();
    let mut out = vec![0.0; l * d * n];
    let step = d * n;
    for b in 0..bsz {
        for t in 1..l {
            let prev = &h[(b * l + t - 1) * step..(b * l + t) * step];
            let dst = &mut out[t * step..(t + 1) * step];
            for ch in 0..d {
                for s in 0..n {
                    let hv = prev[ch * n + s];
                    dst[ch * n + s] += weight(b, t, ch, s) * hv * hv;
                }
            }
        }
    }
    let inv = 1.0 / bsz as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

impl HiddenStats {
    pub fn new(seqlen: usize, d_inner: usize, d_state: usize) -> Result<Self> {
        Ok(Self {
            s: Tensor::zeros("S", &[seqlen, d_inner, d_state])?,
            n_seen: 0,
        })
    }

    pub fn accumulate(&mut self, trace: &ScanTrace) -> Result<()> {
        let (_, l, d, n) = trace.hidden.dims4()?;
        if self.s.shape() != [l, d, n] {
            return Err(Error::dim(format!(
                "hidden stats are {:?}, trace is L={l}, D={d}, N={n}",
                self.s.shape()
            )));
        }
        let sample = entering_state_mean(trace, |_, _, _, _| 1.0)?;
        self.n_seen += 1;
        running_mean_update(self.s.data_mut(), &sample, self.n_seen);
        Ok(())
    }

    /// Combines two accumulators as a mean weighted by `n_seen`.
    pub fn merge(&self, other: &HiddenStats) -> Result<HiddenStats> {
        if self.s.shape() != other.s.shape() {
            return Err(Error::dim("merging hidden stats of different shapes"));
        }
        let n = self.n_seen + other.n_seen;
        if n == 0 {
            return Ok(self.clone());
        }
        let (wa, wb) = (self.n_seen as f64 / n as f64, other.n_seen as f64 / n as f64);
        Ok(HiddenStats {
            s: self.s.zip_with(&other.s, |a, b| wa * a + wb * b)?,
            n_seen: n,
        })
    }

    /// `Σ_t s[t]`, shape `[D, N]`.
    pub fn time_summed(&self) -> Tensor {
        sum_over_time(&self.s)
    }
}

pub(crate) fn sum_over_time(s: &Tensor) -> Tensor {
    let shape = s.shape();
    let (l, dn) = (shape[0], shape[1] * shape[2]);
    let mut out = vec![0.0; dn];
    for t in 0..l {
        for (o, v) in out.iter_mut().zip(&s.data()[t * dn..(t + 1) * dn]) {
            *o += v;
        }
    }
    Tensor::new("S_sum", &shape[1..], out).expect("non-empty shape")
}

/// Functional form of [`HiddenStats::accumulate`].
pub fn accumulate_stats(mut stats: HiddenStats, trace: &ScanTrace) -> Result<HiddenStats> {
    stats.accumulate(trace)?;
    Ok(stats)
}

/// Streaming per-step statistics for the full importance score:
/// running mean of `δ_t² · exp(2 δ_t A) · h_{t-1}²`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullScoreStats {
    /// `[L, D, N]`
    pub s: Tensor,
    /// Continuous transition `A` the statistics were gathered under, `[D, N]`.
    pub a: Tensor,
    pub n_seen: usize,
}

impl FullScoreStats {
    pub fn new(seqlen: usize, a_log: &Tensor) -> Result<Self> {
        let (d, n) = a_log.dims2()?;
        Ok(Self {
            s: Tensor::zeros("S_full", &[seqlen, d, n])?,
            a: parameterize_a(a_log),
            n_seen: 0,
        })
    }

    pub fn accumulate(&mut self, trace: &ScanTrace) -> Result<()> {
        let (_, l, d, n) = trace.hidden.dims4()?;
        if self.s.shape() != [l, d, n] {
            return Err(Error::dim("full-score stats shape differs from trace"));
        }
        let deltas = trace.deltas.data();
        let a = self.a.data();
        let sample = entering_state_mean(trace, |b, t, ch, s| {
            let dt = deltas[(b * l + t) * d + ch];
            let w = decay(dt, a[ch * n + s]);
            dt * dt * w * w
        })?;
        self.n_seen += 1;
        running_mean_update(self.s.data_mut(), &sample, self.n_seen);
        Ok(())
    }
}

/// Everything one layer's pruning needs from the calibration pass.
#[derive(Debug, Clone)]
pub struct LayerCalibration {
    pub stats: HiddenStats,
    pub full: FullScoreStats,
    /// Input Gram accumulators of the linear modules (everything but conv1d).
    pub grams: BTreeMap<Module, GramAccumulator>,
    /// One `d_conv × d_conv` Gram per depthwise-conv channel over its unfolded windows.
    pub conv_grams: Vec<GramAccumulator>,
    /// SSM inputs per sample, each `[1, L, D]`.
    pub ssm_inputs: Vec<Tensor>,
    /// Step sizes per sample, each `[1, L, D]`.
    pub deltas: Vec<Tensor>,
}

impl LayerCalibration {
    pub fn new(layer: &MambaLayer, seqlen: usize) -> Result<Self> {
        let (d, n) = (layer.d_inner(), layer.d_state());
        let mut grams = BTreeMap::new();
        for m in Module::ALL {
            if m != Module::Conv1d {
                grams.insert(m, GramAccumulator::new(layer.module_weight(m).shape()[1])?);
            }
        }
        Ok(Self {
            stats: HiddenStats::new(seqlen, d, n)?,
            full: FullScoreStats::new(seqlen, &layer.a_log)?,
            grams,
            conv_grams: (0..d)
                .map(|_| GramAccumulator::new(layer.d_conv()))
                .collect::<Result<_>>()?,
            ssm_inputs: Vec::new(),
            deltas: Vec::new(),
        })
    }

    /// Folds one recorded block forward into every accumulator.
    pub fn observe(&mut self, layer: &MambaLayer, trace: &ScanTrace) -> Result<()> {
        self.stats.accumulate(trace)?;
        self.full.accumulate(trace)?;
        for (m, acc) in self.grams.iter_mut() {
            let input = trace
                .inputs
                .get(*m)
                .ok_or_else(|| Error::State(format!("trace has no captured input for {m}")))?;
            let width = input.shape()[2];
            acc.add_rows(input.data(), input.numel() / width)?;
        }
        let conv_in = trace
            .inputs
            .get(Module::Conv1d)
            .ok_or_else(|| Error::State("trace has no captured conv1d input".into()))?;
        let (bsz, l, d) = conv_in.dims3()?;
        let k = layer.d_conv();
        for b in 0..bsz {
            let xb = &conv_in.data()[b * l * d..(b + 1) * l * d];
            for (ch, acc) in self.conv_grams.iter_mut().enumerate() {
                acc.add_rows(&causal_windows(xb, l, d, ch, k), l)?;
            }
        }
        let ssm_in = trace
            .inputs
            .get(Module::XProj)
            .ok_or_else(|| Error::State("trace has no captured SSM input".into()))?;
        self.ssm_inputs.push(ssm_in.clone().with_name("ssm.input"));
        self.deltas.push(trace.deltas.clone());
        Ok(())
    }
}

fn tag(err: Error, layer: usize, sample: usize) -> Error {
    match err {
        Error::NonFinite { step, context } => Error::NonFinite {
            step,
            context: format!("layer {layer}, sample {sample}: {context}"),
        },
        Error::Numerical(m) => Error::Numerical(format!("layer {layer}, sample {sample}: {m}")),
        other => other,
    }
}

/// Residual streams `[1, L, d_model]` at the model input, one per sample.
pub fn embed_samples(model: &MambaModel, calib: &CalibrationSet) -> Result<Vec<Tensor>> {
    calib
        .sequences
        .iter()
        .map(|seq| model.embed_batch(std::slice::from_ref(seq)))
        .collect()
}

/// Instrumented pass of every sample through one layer. Returns the layer's
/// statistics and the residual streams leaving it.
pub fn calibrate_layer(
    model: &MambaModel,
    layer: usize,
    resid: &[Tensor],
) -> Result<(LayerCalibration, Vec<Tensor>)> {
    let seqlen = resid
        .first()
        .ok_or_else(|| Error::arg("calibration needs at least one sample"))?
        .shape()[1];
    let mut cal = LayerCalibration::new(&model.layers[layer], seqlen)?;
    let mut next = Vec::with_capacity(resid.len());
    for (s, r) in resid.iter().enumerate() {
        let (out, trace) = model.apply_layer(layer, r, true).map_err(|e| tag(e, layer, s))?;
        let trace = trace.expect("record mode returns a trace");
        cal.observe(&model.layers[layer], &trace)
            .map_err(|e| tag(e, layer, s))?;
        next.push(out);
    }
    Ok((cal, next))
}

/// One instrumented forward pass per calibration sample through the whole model.
pub fn run_calibration(model: &MambaModel, calib: &CalibrationSet) -> Result<Vec<LayerCalibration>> {
    if calib.is_empty() {
        return Err(Error::arg("empty calibration set"));
    }
    let mut resid = embed_samples(model, calib)?;
    let mut out = Vec::with_capacity(model.layers.len());
    for i in 0..model.layers.len() {
        let (cal, next) = calibrate_layer(model, i, &resid)?;
        out.push(cal);
        resid = next;
    }
    Ok(out)
}
