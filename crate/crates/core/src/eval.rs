//! Reconstruction error, perplexity, and the JSON prune report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{model_forward, selective_scan, MambaLayer, MambaModel};
use crate::oracles::loss_l2;
use crate::pipeline::RunConfig;
use crate::tensor::Tensor;

/// Mean over input batches of `loss_l2(SSM(dense; x), SSM(pruned; x))`.
pub fn reconstruction_error(dense: &MambaLayer, pruned: &MambaLayer, inputs: &[Tensor]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::arg("reconstruction error needs at least one input"));
    }
    let errs = inputs
        .par_iter()
        .map(|x| {
            let (a, _) = selective_scan(dense, x, false)?;
            let (b, _) = selective_scan(pruned, x, false)?;
            loss_l2(&a, &b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// `-log softmax(logits)[target]` with max subtraction.
pub fn token_nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Sum of next-token NLLs and the number of predicted positions.
pub fn sequence_nll(model: &MambaModel, seq: &[u32]) -> Result<(f64, usize)> {
    let logits = model_forward(model, std::slice::from_ref(&seq.to_vec()))?;
    let v = model.config.vocab_size;
    let mut total = 0.0;
    for t in 0..seq.len() - 1 {
        total += token_nll(&logits.data()[t * v..(t + 1) * v], seq[t + 1] as usize);
    }
    Ok((total, seq.len() - 1))
}

/// `exp(mean next-token NLL)` over every predicted position of the corpus.
pub fn perplexity(model: &MambaModel, corpus: &[Vec<u32>]) -> Result<f64> {
    let parts = corpus
        .par_iter()
        .filter(|s| s.len() >= 2)
        .map(|s| sequence_nll(model, s))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = parts.iter().map(|p| p.1).sum();
    if count == 0 {
        return Err(Error::arg("perplexity needs a sequence of at least two tokens"));
    }
    let total: f64 = parts.iter().map(|p| p.0).sum();
    Ok((total / count as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleReport {
    pub name: String,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub zeros: usize,
    pub size: usize,
    /// Layer-wise reconstruction error on the calibration inputs.
    pub recon_error: f64,
}

impl ModuleReport {
    pub fn new(name: impl Into<String>, target: f64, zeros: usize, size: usize, recon_error: f64) -> Self {
        Self {
            name: name.into(),
            target_sparsity: target,
            achieved_sparsity: zeros as f64 / size as f64,
            zeros,
            size,
            recon_error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerVerify {
    pub layer: usize,
    /// Rank agreement of the full score with the finite-difference saliency.
    pub spearman_full_vs_fd: f64,
    /// Rank agreement of the time-summed simplified score with the full score.
    pub spearman_simplified_vs_full: f64,
    pub mask_error: f64,
    pub magnitude_mask_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneReport {
    pub method: String,
    pub score_mode: String,
    pub pattern: String,
    pub target: String,
    pub seed: u64,
    pub alpha_effective: f64,
    pub perplexity_before: f64,
    pub perplexity_after: f64,
    pub total_params: usize,
    pub zeroed_params: usize,
    /// State size of the emitted checkpoint (smaller than the input after column pruning).
    pub d_state_out: usize,
    pub modules: Vec<ModuleReport>,
    pub notes: Vec<String>,
    pub config: RunConfig,
    pub verify: Option<Vec<LayerVerify>>,
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

impl PruneReport {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.method.as_str(), "sparsessm" | "magnitude") {
            return Err(schema(format!("unknown method `{}`", self.method)));
        }
        for (name, p) in [("perplexity_before", self.perplexity_before), ("perplexity_after", self.perplexity_after)] {
            if !(p.is_finite() && p >= 1.0) {
                return Err(schema(format!("{name} = {p} is not a finite value >= 1")));
            }
        }
        let mut zeros = 0;
        for m in &self.modules {
            if m.size == 0 || m.zeros > m.size {
                return Err(schema(format!("{}: {} zeros of {}", m.name, m.zeros, m.size)));
            }
            if m.achieved_sparsity != m.zeros as f64 / m.size as f64 {
                return Err(schema(format!("{}: achieved sparsity disagrees with zero count", m.name)));
            }
            if !(0.0..=1.0).contains(&m.target_sparsity) {
                return Err(schema(format!("{}: target sparsity {}", m.name, m.target_sparsity)));
            }
            if !(m.recon_error.is_finite() && m.recon_error >= 0.0) {
                return Err(schema(format!("{}: reconstruction error {}", m.name, m.recon_error)));
            }
            zeros += m.zeros;
        }
        if zeros != self.zeroed_params {
            return Err(schema("zeroed_params is not the sum of module zeros"));
        }
        if self.zeroed_params > self.total_params {
            return Err(schema("more zeroed params than params"));
        }
        Ok(())
    }

    /// Sorted-key JSON with every float written to 17 significant digits.
    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::new();
        write_value(&serde_json::to_value(self)?, 0, &mut out);
        out.push('\n');
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: PruneReport = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize, out: &mut String| out.extend(std::iter::repeat_n(' ', n));
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) if !n.is_f64() => write!(out, "{u}").unwrap(),
            (_, Some(i), _) if !n.is_f64() => write!(out, "{i}").unwrap(),
            (_, _, Some(f)) => write!(out, "{f:.16e}").unwrap(),
            _ => out.push_str("null"),
        },
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(indent + 2, out);
                write_value(item, indent + 2, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(indent, out);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            // serde_json's default map is ordered by key
            for (i, (k, item)) in map.iter().enumerate() {
                pad(indent + 2, out);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(item, indent + 2, out);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            pad(indent, out);
            out.push('}');
        }
    }
}

/// Validates then writes the report.
pub fn emit_report(report: &PruneReport, path: &Path) -> Result<()> {
    let text = report.to_json()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<PruneReport> {
    PruneReport::from_json(&fs::read_to_string(path)?)
}
