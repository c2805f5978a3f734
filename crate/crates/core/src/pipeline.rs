//! End-to-end run: load, calibrate, plan, prune layer by layer, evaluate, emit.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    calibrate_layer, embed_samples, load_token_file, make_synthetic_corpus, run_calibration,
    CalibrationSet, HiddenStats, LayerCalibration,
};
use crate::checkpoint::{load_checkpoint, named_tensors, round_to_f32, save_checkpoint};
use crate::error::{Error, Result};
use crate::eval::{emit_report, perplexity, reconstruction_error, LayerVerify, ModuleReport, PruneReport};
use crate::ffn_prune::{
    allocate_sparsity, gram_reconstruction_error, prune_conv_as_linear, prune_linear_obs,
    prune_magnitude, sensitivity_scores, SparsityPlan,
};
use crate::model::{selective_scan, MambaLayer, MambaModel, Module};
use crate::oracles::{diagonal_saliency, fd_hessian_diag, mask_error, spearman, FdConfig};
use crate::ssm_prune::{
    apply_mask, importance_full, importance_full_field, importance_simplified, magnitude_mask,
    remove_state_columns, select_mask, Pattern, PruneMask, ScoreMode,
};
use crate::tensor::Tensor;

pub const DEFAULT_NSAMPLES: usize = 64;
pub const DEFAULT_SEQLEN: usize = 64;
pub const DEFAULT_ALPHA: f64 = 0.04;
/// Calibration samples used by the finite-difference verification.
pub const VERIFY_SAMPLES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibSpec {
    Synthetic,
    File(PathBuf),
}

impl FromStr for CalibSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" => Err(Error::arg("empty calibration source")),
            "synthetic" => Ok(Self::Synthetic),
            path => Ok(Self::File(PathBuf::from(path))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Ssm,
    Ffn,
    All,
}

impl Target {
    pub fn ssm(self) -> bool {
        matches!(self, Target::Ssm | Target::All)
    }

    pub fn ffn(self) -> bool {
        matches!(self, Target::Ffn | Target::All)
    }
}

impl FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssm" => Ok(Self::Ssm),
            "ffn" => Ok(Self::Ffn),
            "all" => Ok(Self::All),
            _ => Err(Error::arg(format!("unknown target `{s}`"))),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ssm => "ssm",
            Self::Ffn => "ffn",
            Self::All => "all",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    SparseSsm,
    Magnitude,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparsessm" => Ok(Self::SparseSsm),
            "magnitude" => Ok(Self::Magnitude),
            _ => Err(Error::arg(format!("unknown method `{s}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SparseSsm => "sparsessm",
            Self::Magnitude => "magnitude",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub checkpoint: PathBuf,
    pub calib: CalibSpec,
    pub nsamples: usize,
    pub seqlen: usize,
    pub seed: u64,
    pub sparsity: f64,
    pub alpha: f64,
    pub score: ScoreMode,
    pub pattern: Pattern,
    pub target: Target,
    pub blocksize: usize,
    pub method: Method,
    pub report: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub verify: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            calib: CalibSpec::Synthetic,
            nsamples: DEFAULT_NSAMPLES,
            seqlen: DEFAULT_SEQLEN,
            seed: 0,
            sparsity: 0.5,
            alpha: DEFAULT_ALPHA,
            score: ScoreMode::Simplified,
            pattern: Pattern::Unstructured,
            target: Target::Ssm,
            blocksize: crate::ffn_prune::DEFAULT_BLOCKSIZE,
            method: Method::SparseSsm,
            report: None,
            out: None,
            verify: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::arg(format!("sparsity {} outside [0, 1]", self.sparsity)));
        }
        if !(self.alpha >= 0.0 && self.alpha <= 0.5) {
            return Err(Error::arg(format!("alpha {} outside [0, 0.5]", self.alpha)));
        }
        if self.nsamples == 0 {
            return Err(Error::arg("nsamples must be >= 1"));
        }
        if self.seqlen < 2 {
            return Err(Error::arg("seqlen must be >= 2"));
        }
        if self.blocksize == 0 {
            return Err(Error::arg("blocksize must be >= 1"));
        }
        if self.pattern == Pattern::Column && self.target == Target::Ffn {
            return Err(Error::arg("pattern `column` applies to the SSM and cannot be used with target `ffn`"));
        }
        Ok(())
    }

    /// `alpha` clipped to `[0, min(s, 1 − s)]` so the schedule stays inside [0, 1].
    pub fn effective_alpha(&self) -> f64 {
        self.alpha.min(self.sparsity).min(1.0 - self.sparsity).max(0.0)
    }

    /// SSM sparsity implied by the pattern.
    pub fn ssm_sparsity(&self) -> f64 {
        match self.pattern {
            Pattern::NM { n, m } => n as f64 / m as f64,
            _ => self.sparsity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Calibration,
    FfnPrune,
    SsmPrune,
    Evaluation,
    Emit,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Calibration => "calibration",
            Stage::FfnPrune => "ffn-prune",
            Stage::SsmPrune => "ssm-prune",
            Stage::Evaluation => "evaluation",
            Stage::Emit => "emit",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Load => 3,
            Stage::Calibration => 4,
            Stage::FfnPrune => 5,
            Stage::SsmPrune => 6,
            Stage::Evaluation => 7,
            Stage::Emit => 8,
        }
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage.name(), self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

pub type PipelineResult<T> = std::result::Result<T, PipelineError>;

/// Calibration windows and a disjoint held-out evaluation corpus.
pub fn build_corpora(cfg: &RunConfig, vocab_size: usize) -> Result<(CalibrationSet, Vec<Vec<u32>>)> {
    match &cfg.calib {
        CalibSpec::Synthetic => {
            let mut all = make_synthetic_corpus(cfg.seed, vocab_size, 2 * cfg.nsamples, cfg.seqlen)?;
            let eval = all.sequences.split_off(cfg.nsamples);
            Ok((all, eval))
        }
        CalibSpec::File(path) => {
            let calib = load_token_file(path, cfg.nsamples, cfg.seqlen, cfg.seed)?;
            let eval = load_token_file(path, cfg.nsamples, cfg.seqlen, cfg.seed.wrapping_add(1))?;
            Ok((calib, eval.sequences))
        }
    }
}

fn module_name(layer: usize, m: Module) -> String {
    format!("layers.{layer}.{m}.weight")
}

fn ssm_name(layer: usize) -> String {
    format!("layers.{layer}.ssm.A_log")
}

/// Sensitivity-ranked sparsity plan over every `in_proj` / `out_proj`, from
/// one calibration pass of the unpruned model.
pub fn plan_sparsity(model: &MambaModel, calib: &CalibrationSet, s: f64, alpha: f64) -> Result<SparsityPlan> {
    let cals = run_calibration(model, calib)?;
    let mut pool = Vec::new();
    for (i, cal) in cals.iter().enumerate() {
        for m in [Module::InProj, Module::OutProj] {
            pool.push((module_name(i, m), &cal.grams[&m]));
        }
    }
    allocate_sparsity(sensitivity_scores(&pool)?, s, alpha)
}

fn prune_ffn_layer(
    layer: &mut MambaLayer,
    index: usize,
    cal: &LayerCalibration,
    plan: &SparsityPlan,
    cfg: &RunConfig,
) -> Result<Vec<ModuleReport>> {
    let mut reports = Vec::new();
    for m in Module::ALL {
        let name = module_name(index, m);
        let target = plan.sparsity_for(&name);
        let weight = layer.module_weight(m).clone();
        let (pruned, recon) = if m == Module::Conv1d {
            let grams: Vec<Tensor> = cal.conv_grams.iter().map(|g| g.gram.clone()).collect();
            match cfg.method {
                Method::SparseSsm => {
                    let r = prune_conv_as_linear(&weight, &grams, target)?;
                    (r.weight, r.recon_error)
                }
                Method::Magnitude => {
                    let (w, _) = prune_magnitude(&weight, target)?;
                    let mut err = 0.0;
                    for (ch, g) in grams.iter().enumerate() {
                        let a = Tensor::new("w", &[1, weight.shape()[1]], weight.row(ch).to_vec())?;
                        let b = Tensor::new("w", &[1, weight.shape()[1]], w.row(ch).to_vec())?;
                        err += gram_reconstruction_error(&a, &b, g)?;
                    }
                    (w, err)
                }
            }
        } else {
            let gram = &cal.grams[&m].gram;
            match cfg.method {
                Method::SparseSsm => {
                    let r = prune_linear_obs(&weight, gram, target, cfg.blocksize)?;
                    (r.weight, r.recon_error)
                }
                Method::Magnitude => {
                    let (w, _) = prune_magnitude(&weight, target)?;
                    let err = gram_reconstruction_error(&weight, &w, gram)?;
                    (w, err)
                }
            }
        };
        reports.push(ModuleReport::new(name, target, pruned.count_zeros(), pruned.numel(), recon));
        *layer.module_weight_mut(m) = pruned.with_name(weight.name());
    }
    Ok(reports)
}

fn ssm_mask(layer: &MambaLayer, cal: &LayerCalibration, cfg: &RunConfig) -> Result<PruneMask> {
    let p = cfg.ssm_sparsity();
    match cfg.method {
        Method::Magnitude => magnitude_mask(&layer.a_log, cfg.pattern, p),
        Method::SparseSsm => {
            let field = match cfg.score {
                ScoreMode::Simplified => importance_simplified(&layer.a_log, &cal.stats)?,
                ScoreMode::Full => importance_full_field(&layer.a_log, &cal.full)?,
            };
            select_mask(&field, cfg.pattern, p)
        }
    }
}

fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::arg("no tensors to stack"))?;
    let (_, l, d) = first.dims3()?;
    let mut data = Vec::new();
    let mut b = 0;
    for p in parts {
        let (pb, pl, pd) = p.dims3()?;
        if (pl, pd) != (l, d) {
            return Err(Error::dim("cannot stack tensors of different shapes"));
        }
        data.extend_from_slice(p.data());
        b += pb;
    }
    Tensor::new("batch", &[b, l, d], data)
}

/// Finite-difference and exhaustive-free cross-checks of one layer's scores.
pub fn verify_layer(
    index: usize,
    layer: &MambaLayer,
    cal: &LayerCalibration,
    mask: &PruneMask,
    cfg: &RunConfig,
) -> Result<LayerVerify> {
    let k = cal.ssm_inputs.len().min(VERIFY_SAMPLES);
    let x = concat_batch(&cal.ssm_inputs[..k])?;
    let (y, trace) = selective_scan(layer, &x, true)?;
    let trace = trace.expect("record mode returns a trace");
    let fd = fd_hessian_diag(layer, &x, &y, FdConfig::default())?;
    let saliency = diagonal_saliency(&fd, &layer.a_log)?;
    let full = importance_full(&layer.a_log, std::slice::from_ref(&trace))?;
    let (_, l, d, n) = trace.hidden.dims4()?;
    let mut stats = HiddenStats::new(l, d, n)?;
    stats.accumulate(&trace)?;
    let simplified = importance_simplified(&layer.a_log, &stats)?.time_summed();
    let magnitude = magnitude_mask(&layer.a_log, cfg.pattern, cfg.ssm_sparsity())?;
    Ok(LayerVerify {
        layer: index,
        spearman_full_vs_fd: spearman(full.data(), saliency.data())?,
        spearman_simplified_vs_full: spearman(simplified.data(), full.data())?,
        mask_error: mask_error(layer, &x, &mask.zeros())?,
        magnitude_mask_error: mask_error(layer, &x, &magnitude.zeros())?,
    })
}

/// Prunes an in-memory model. The input model is expected to hold
/// f32-representable values; the result is rounded to f32 like a saved checkpoint.
pub fn prune_model(
    model: &MambaModel,
    calib: &CalibrationSet,
    eval_corpus: &[Vec<u32>],
    cfg: &RunConfig,
) -> PipelineResult<(MambaModel, PruneReport)> {
    cfg.validate().at(Stage::Config)?;
    let ppl_before = perplexity(model, eval_corpus).at(Stage::Evaluation)?;
    let alpha = cfg.effective_alpha();
    let plan = if cfg.target.ffn() && cfg.method == Method::SparseSsm {
        match plan_sparsity(model, calib, cfg.sparsity, alpha) {
            Ok(plan) => plan,
            Err(e @ Error::Argument(_)) => return Err(e).at(Stage::FfnPrune),
            Err(e) => return Err(e).at(Stage::Calibration),
        }
    } else {
        allocate_sparsity(Vec::new(), cfg.sparsity, 0.0).at(Stage::Config)?
    };

    let mut pruned = model.clone();
    let mut modules = Vec::new();
    let mut verify = Vec::new();
    let mut resid = embed_samples(&pruned, calib).at(Stage::Calibration)?;
    let mut removed_cols = None;
    for i in 0..pruned.layers.len() {
        let (cal, _) = calibrate_layer(&pruned, i, &resid).at(Stage::Calibration)?;
        if cfg.target.ffn() {
            let reports = prune_ffn_layer(&mut pruned.layers[i], i, &cal, &plan, cfg).at(Stage::FfnPrune)?;
            modules.extend(reports);
        }
        if cfg.target.ssm() {
            let layer = pruned.layers[i].clone();
            let mask = ssm_mask(&layer, &cal, cfg).at(Stage::SsmPrune)?;
            if cfg.verify {
                verify.push(verify_layer(i, &layer, &cal, &mask, cfg).at(Stage::SsmPrune)?);
            }
            let (d, n) = (layer.d_inner(), layer.d_state());
            let (new_layer, zeros) = if cfg.pattern == Pattern::Column {
                let cols = mask.zero_columns();
                removed_cols = Some(cols.len());
                if cols.is_empty() {
                    (layer.clone(), layer.a_log.count_zeros())
                } else {
                    let compact = remove_state_columns(&layer, &cols).at(Stage::SsmPrune)?;
                    let zeros = d * cols.len() + compact.a_log.count_zeros();
                    (compact, zeros)
                }
            } else {
                let masked = apply_mask(&layer, &mask).at(Stage::SsmPrune)?;
                let zeros = masked.a_log.count_zeros();
                (masked, zeros)
            };
            let recon = reconstruction_error(&layer, &new_layer, &cal.ssm_inputs).at(Stage::SsmPrune)?;
            modules.push(ModuleReport::new(ssm_name(i), cfg.ssm_sparsity(), zeros, d * n, recon));
            pruned.layers[i] = new_layer;
        }
        resid = resid
            .iter()
            .map(|r| pruned.apply_layer(i, r, false).map(|(next, _)| next))
            .collect::<Result<Vec<_>>>()
            .at(Stage::Calibration)?;
    }
    if let Some(k) = removed_cols {
        pruned.config.d_state -= k;
    }
    round_to_f32(&mut pruned);
    pruned.validate().at(Stage::SsmPrune)?;
    let ppl_after = perplexity(&pruned, eval_corpus).at(Stage::Evaluation)?;

    let mut notes = vec![
        "pruned A_log entries are exactly 0.0, i.e. A = -1 and a per-step decay of exp(-delta); the state entries remain active".to_string(),
    ];
    if cfg.target == Target::Ffn && cfg.pattern != Pattern::Unstructured {
        notes.push(format!("pattern {} applies to the SSM only; FFN modules were pruned unstructured", cfg.pattern));
    }
    if alpha != cfg.alpha {
        notes.push(format!("alpha {} clipped to {alpha} to keep module sparsities in [0, 1]", cfg.alpha));
    }
    let total_params = named_tensors(model).iter().map(|(_, t)| t.numel()).sum();
    let zeroed_params = modules.iter().map(|m| m.zeros).sum();
    let report = PruneReport {
        method: cfg.method.to_string(),
        score_mode: cfg.score.to_string(),
        pattern: cfg.pattern.to_string(),
        target: cfg.target.to_string(),
        seed: cfg.seed,
        alpha_effective: alpha,
        perplexity_before: ppl_before,
        perplexity_after: ppl_after,
        total_params,
        zeroed_params,
        d_state_out: pruned.config.d_state,
        modules,
        notes,
        config: cfg.clone(),
        verify: cfg.verify.then_some(verify),
    };
    report.validate().at(Stage::Evaluation)?;
    Ok((pruned, report))
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: MambaModel,
    pub report: PruneReport,
}

/// Full run from `cfg.checkpoint`, writing `cfg.out` and `cfg.report` when set.
pub fn run_pipeline(cfg: &RunConfig) -> PipelineResult<PipelineOutcome> {
    cfg.validate().at(Stage::Config)?;
    let model = load_checkpoint(&cfg.checkpoint).at(Stage::Load)?;
    let (calib, eval) = build_corpora(cfg, model.config.vocab_size).at(Stage::Calibration)?;
    let (pruned, report) = prune_model(&model, &calib, &eval, cfg)?;
    if let Some(out) = &cfg.out {
        save_checkpoint(&pruned, out).at(Stage::Emit)?;
    }
    if let Some(path) = &cfg.report {
        emit_report(&report, path).at(Stage::Emit)?;
    }
    Ok(PipelineOutcome { model: pruned, report })
}

/// The same run with every score replaced by weight magnitude.
pub fn run_baseline_magnitude(cfg: &RunConfig) -> PipelineResult<PipelineOutcome> {
    run_pipeline(&RunConfig {
        method: Method::Magnitude,
        ..cfg.clone()
    })
}

/// Convenience for callers holding a checkpoint path.
pub fn config_for(checkpoint: &Path) -> RunConfig {
    RunConfig {
        checkpoint: checkpoint.to_path_buf(),
        ..RunConfig::default()
    }
}
