//! Second-order importance of `A_log` entries, time-selective mask
//! aggregation, and the N:M / column-structured variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{sum_over_time, FullScoreStats, HiddenStats};
use crate::error::{Error, Result};
use crate::model::{decay, parameterize_a, MambaLayer, ScanTrace};
use crate::tensor::{arg_smallest_k, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Simplified,
    Full,
}

impl FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simplified" => Ok(Self::Simplified),
            "full" => Ok(Self::Full),
            _ => Err(Error::arg(format!("unknown score mode `{s}`"))),
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Simplified => "simplified",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Pattern {
    Unstructured,
    /// `n` zeros in every group of `m` consecutive state entries.
    NM { n: usize, m: usize },
    Column,
}

impl FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unstructured" => Ok(Self::Unstructured),
            "column" => Ok(Self::Column),
            _ => {
                let (n, m) = s
                    .split_once(':')
                    .ok_or_else(|| Error::arg(format!("unknown pattern `{s}`")))?;
                let parse = |v: &str| {
                    v.parse::<usize>()
                        .map_err(|_| Error::arg(format!("bad N:M pattern `{s}`")))
                };
                let (n, m) = (parse(n)?, parse(m)?);
                if m == 0 || n > m {
                    return Err(Error::arg(format!("bad N:M pattern `{s}`")));
                }
                Ok(Self::NM { n, m })
            }
        }
    }
}

impl From<Pattern> for String {
    fn from(p: Pattern) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for Pattern {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unstructured => f.write_str("unstructured"),
            Self::NM { n, m } => write!(f, "{n}:{m}"),
            Self::Column => f.write_str("column"),
        }
    }
}

/// Per-step importance `M_t = A_log² ⊙ S_t` and optionally the full score.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceField {
    /// `[L, D, N]`
    pub per_step: Tensor,
    /// `[D, N]`
    pub aggregate_full: Option<Tensor>,
}

impl ImportanceField {
    pub fn d_n(&self) -> (usize, usize) {
        let s = self.per_step.shape();
        (s[1], s[2])
    }

    pub fn seqlen(&self) -> usize {
        self.per_step.shape()[0]
    }

    /// `Σ_t M_t`, shape `[D, N]`.
    pub fn time_summed(&self) -> Tensor {
        sum_over_time(&self.per_step)
    }

    /// The score used for aggregate decisions: the full score if present,
    /// the time-summed simplified field otherwise.
    pub fn aggregate(&self) -> Tensor {
        self.aggregate_full.clone().unwrap_or_else(|| self.time_summed())
    }

    fn step(&self, t: usize) -> &[f64] {
        let (d, n) = self.d_n();
        &self.per_step.data()[t * d * n..(t + 1) * d * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    /// `[D, N]`, 1 = keep.
    pub mask: Tensor,
    pub k_pruned: usize,
    pub pattern: Pattern,
}

impl PruneMask {
    fn from_zeros(d: usize, n: usize, zeros: &[usize], pattern: Pattern) -> Result<Self> {
        let mut mask = Tensor::full("mask", &[d, n], 1.0)?;
        for &i in zeros {
            mask.data_mut()[i] = 0.0;
        }
        let k_pruned = mask.count_zeros();
        Ok(Self {
            mask,
            k_pruned,
            pattern,
        })
    }

    /// Flat indices of the pruned entries, ascending.
    pub fn zeros(&self) -> Vec<usize> {
        self.mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// State columns pruned in every channel.
    pub fn zero_columns(&self) -> Vec<usize> {
        let (d, n) = (self.mask.shape()[0], self.mask.shape()[1]);
        (0..n)
            .filter(|&c| (0..d).all(|r| self.mask.get2(r, c) == 0.0))
            .collect()
    }
}

/// `½ · h · w²`.
pub fn obs_saliency_diag(w: f64, h_diag: f64) -> f64 {
    0.5 * h_diag * w * w
}

fn check_a_log(a_log: &Tensor, d: usize, n: usize) -> Result<()> {
    if a_log.shape() != [d, n] {
        return Err(Error::dim(format!(
            "A_log is {:?}, statistics are D={d}, N={n}",
            a_log.shape()
        )));
    }
    Ok(())
}

pub fn importance_simplified(a_log: &Tensor, stats: &HiddenStats) -> Result<ImportanceField> {
    let (l, d, n) = stats.s.dims3()?;
    check_a_log(a_log, d, n)?;
    let sq: Vec<f64> = a_log.data().iter().map(|v| v * v).collect();
    let mut per_step = stats.s.clone().with_name("importance");
    for t in 0..l {
        for (v, w) in per_step.data_mut()[t * d * n..(t + 1) * d * n].iter_mut().zip(&sq) {
            *v *= w;
        }
    }
    Ok(ImportanceField {
        per_step,
        aggregate_full: None,
    })
}

/// `A² · A_log² · Σ_{b,t} δ_{b,t}² · exp(2 δ_{b,t} A) · h_{b,t-1}²` from recorded traces.
pub fn importance_full(a_log: &Tensor, traces: &[ScanTrace]) -> Result<Tensor> {
    if traces.is_empty() {
        return Err(Error::State("full importance needs recorded traces".into()));
    }
    let (d, n) = a_log.dims2()?;
    let a = parameterize_a(a_log);
    let mut acc = vec![0.0; d * n];
    for tr in traces {
        let (bsz, l, d2, n2) = tr.hidden.dims4()?;
        if (d2, n2) != (d, n) {
            return Err(Error::dim("trace shape differs from A_log"));
        }
        let h = tr.hidden.data();
        let dl = tr.deltas.data();
        for b in 0..bsz {
            for t in 1..l {
                let prev = &h[(b * l + t - 1) * d * n..(b * l + t) * d * n];
                for ch in 0..d {
                    let dt = dl[(b * l + t) * d + ch];
                    for s in 0..n {
                        let i = ch * n + s;
                        let w = decay(dt, a.data()[i]);
                        acc[i] += dt * dt * w * w * prev[i] * prev[i];
                    }
                }
            }
        }
    }
    finish_full(a_log, &a, acc)
}

/// Same score from streamed statistics (a per-sample mean instead of a sum,
/// which rescales every entry by one common constant).
pub fn importance_full_streamed(a_log: &Tensor, full: &FullScoreStats) -> Result<Tensor> {
    if full.n_seen == 0 {
        return Err(Error::State("full-score statistics are empty".into()));
    }
    let (_, d, n) = full.s.dims3()?;
    check_a_log(a_log, d, n)?;
    if full.a != parameterize_a(a_log) {
        return Err(Error::State(
            "full-score statistics were gathered under a different A_log".into(),
        ));
    }
    finish_full(a_log, &full.a, sum_over_time(&full.s).into_data())
}

/// Per-step form of the full score, `M_t = A² · A_log² · S_full[t]`, for the
/// same time-selective aggregation the simplified field uses.
pub fn importance_full_field(a_log: &Tensor, full: &FullScoreStats) -> Result<ImportanceField> {
    let aggregate = importance_full_streamed(a_log, full)?;
    let (l, d, n) = full.s.dims3()?;
    let w: Vec<f64> = a_log
        .data()
        .iter()
        .zip(full.a.data())
        .map(|(al, a)| a * a * al * al)
        .collect();
    let mut per_step = full.s.clone().with_name("importance");
    for t in 0..l {
        for (v, c) in per_step.data_mut()[t * d * n..(t + 1) * d * n].iter_mut().zip(&w) {
            *v *= c;
        }
    }
    Ok(ImportanceField {
        per_step,
        aggregate_full: Some(aggregate),
    })
}

fn finish_full(a_log: &Tensor, a: &Tensor, mut acc: Vec<f64>) -> Result<Tensor> {
    for ((v, &al), &av) in acc.iter_mut().zip(a_log.data()).zip(a.data()) {
        *v *= av * av * al * al;
    }
    Tensor::new("importance_full", a_log.shape(), acc)
}

/// `⌈p · total⌉`, immune to representation noise such as `0.1 · 30`.
pub fn ceil_count(p: f64, total: usize) -> usize {
    let x = p * total as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) { r } else { x.ceil() };
    (k as usize).min(total)
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(format!("sparsity {p} outside [0, 1]")));
    }
    Ok(())
}

/// Deferred-commitment selection over a set of candidate positions.
///
/// For every time step whose values are not all equal, the `k` smallest
/// candidates (lower position first on ties) each earn one vote. The `k`
/// positions with most votes win; equal votes go to the smaller aggregate
/// score, then the lower position. Constant steps carry no ranking
/// information and cast no votes.
fn frequency_select(
    field: &ImportanceField,
    aggregate: &[f64],
    positions: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut votes = vec![0usize; positions.len()];
    let mut vals = vec![0.0; positions.len()];
    for t in 0..field.seqlen() {
        let step = field.step(t);
        for (v, &p) in vals.iter_mut().zip(positions) {
            *v = step[p];
        }
        if vals.iter().all(|&v| v == vals[0]) {
            continue;
        }
        for i in arg_smallest_k(&vals, k)? {
            votes[i] += 1;
        }
    }
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| {
        votes[b]
            .cmp(&votes[a])
            .then(aggregate[positions[a]].total_cmp(&aggregate[positions[b]]))
            .then(positions[a].cmp(&positions[b]))
    });
    Ok(order[..k].iter().map(|&i| positions[i]).collect())
}

/// Unstructured mask with exactly `⌈p · D · N⌉` zeros.
pub fn select_mask_time_frequency(field: &ImportanceField, p: f64) -> Result<PruneMask> {
    check_p(p)?;
    let (d, n) = field.d_n();
    let k = ceil_count(p, d * n);
    let all: Vec<usize> = (0..d * n).collect();
    let zeros = frequency_select(field, field.time_summed().data(), &all, k)?;
    PruneMask::from_zeros(d, n, &zeros, Pattern::Unstructured)
}

/// `n_zeros` per group of `m_group` consecutive state entries, voting within each group.
pub fn select_mask_nm(field: &ImportanceField, n_zeros: usize, m_group: usize) -> Result<PruneMask> {
    let (d, n) = field.d_n();
    check_nm(n, n_zeros, m_group)?;
    let agg = field.time_summed();
    let mut zeros = Vec::new();
    for ch in 0..d {
        for g in (0..n).step_by(m_group) {
            let group: Vec<usize> = (g..g + m_group).map(|s| ch * n + s).collect();
            zeros.extend(frequency_select(field, agg.data(), &group, n_zeros)?);
        }
    }
    PruneMask::from_zeros(d, n, &zeros, Pattern::NM { n: n_zeros, m: m_group })
}

fn check_nm(n: usize, n_zeros: usize, m_group: usize) -> Result<()> {
    if m_group == 0 || n % m_group != 0 {
        return Err(Error::arg(format!(
            "group size {m_group} does not divide the state size {n}"
        )));
    }
    if n_zeros > m_group {
        return Err(Error::arg(format!("{n_zeros} zeros per group of {m_group}")));
    }
    Ok(())
}

/// L1 norm over channels of a non-negative `[D, N]` score.
pub fn column_scores(score: &Tensor) -> Result<Vec<f64>> {
    let (d, n) = score.dims2()?;
    Ok((0..n).map(|c| (0..d).map(|r| score.get2(r, c).abs()).sum()).collect())
}

/// The `⌊p · N⌋` state columns with the lowest column score, ascending.
pub fn select_columns(score: &Tensor, p: f64) -> Result<Vec<usize>> {
    check_p(p)?;
    let n = score.shape()[1];
    let k = (p * n as f64 + 1e-9).floor() as usize;
    if k >= n {
        return Err(Error::arg(format!(
            "column sparsity {p} would remove all {n} state columns"
        )));
    }
    let mut cols = arg_smallest_k(&column_scores(score)?, k)?;
    cols.sort_unstable();
    Ok(cols)
}

fn column_mask(d: usize, n: usize, cols: &[usize]) -> Result<PruneMask> {
    let zeros: Vec<usize> = (0..d).flat_map(|r| cols.iter().map(move |&c| r * n + c)).collect();
    PruneMask::from_zeros(d, n, &zeros, Pattern::Column)
}

pub fn select_mask_column(field: &ImportanceField, p: f64) -> Result<PruneMask> {
    let (d, n) = field.d_n();
    column_mask(d, n, &select_columns(&field.aggregate(), p)?)
}

/// Dispatches on the pattern. N:M patterns fix their own ratio and ignore `p`.
pub fn select_mask(field: &ImportanceField, pattern: Pattern, p: f64) -> Result<PruneMask> {
    match pattern {
        Pattern::Unstructured => select_mask_time_frequency(field, p),
        Pattern::NM { n, m } => select_mask_nm(field, n, m),
        Pattern::Column => select_mask_column(field, p),
    }
}

/// `⌈p · D · N⌉` zeros at the smallest entries of a `[D, N]` score.
pub fn select_mask_by_score(score: &Tensor, p: f64) -> Result<PruneMask> {
    check_p(p)?;
    let (d, n) = score.dims2()?;
    let zeros = arg_smallest_k(score.data(), ceil_count(p, d * n))?;
    PruneMask::from_zeros(d, n, &zeros, Pattern::Unstructured)
}

/// Magnitude baseline: the same pattern decided by `|A_log|`.
pub fn magnitude_mask(a_log: &Tensor, pattern: Pattern, p: f64) -> Result<PruneMask> {
    let (d, n) = a_log.dims2()?;
    let mags = a_log.map(f64::abs);
    match pattern {
        Pattern::Unstructured => select_mask_by_score(&mags, p),
        Pattern::NM { n: nz, m } => {
            check_nm(n, nz, m)?;
            let mut zeros = Vec::new();
            for ch in 0..d {
                for g in (0..n).step_by(m) {
                    let base = ch * n + g;
                    for i in arg_smallest_k(&mags.data()[base..base + m], nz)? {
                        zeros.push(base + i);
                    }
                }
            }
            PruneMask::from_zeros(d, n, &zeros, pattern)
        }
        Pattern::Column => column_mask(d, n, &select_columns(&mags, p)?),
    }
}

/// `A_log ← A_log ⊙ mask`; pruned entries become exactly `+0.0`.
pub fn apply_mask(layer: &MambaLayer, mask: &PruneMask) -> Result<MambaLayer> {
    layer.a_log.dims2()?;
    mask.mask.expect_shape(layer.a_log.shape())?;
    let mut out = layer.clone();
    for (v, &m) in out.a_log.data_mut().iter_mut().zip(mask.mask.data()) {
        if m == 0.0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Removes whole state columns: column n of `A_log` plus the matching B and C
/// rows of `x_proj`. The step-size block is left alone.
pub fn remove_state_columns(layer: &MambaLayer, cols: &[usize]) -> Result<MambaLayer> {
    let (d, n) = layer.a_log.dims2()?;
    let r = layer.dt_rank();
    if cols.iter().any(|&c| c >= n) {
        return Err(Error::arg("state column out of range"));
    }
    let keep: Vec<usize> = (0..n).filter(|c| !cols.contains(c)).collect();
    if keep.is_empty() {
        return Err(Error::arg("cannot remove every state column"));
    }
    let n2 = keep.len();
    let mut a_log = Vec::with_capacity(d * n2);
    for row in 0..d {
        a_log.extend(keep.iter().map(|&c| layer.a_log.get2(row, c)));
    }
    let mut x_rows: Vec<usize> = (0..r).collect();
    x_rows.extend(keep.iter().map(|&c| r + c));
    x_rows.extend(keep.iter().map(|&c| r + n + c));
    let width = layer.x_proj.shape()[1];
    let x_proj: Vec<f64> = x_rows.iter().flat_map(|&i| layer.x_proj.row(i).to_vec()).collect();
    let mut out = layer.clone();
    out.a_log = Tensor::new(layer.a_log.name(), &[d, n2], a_log)?;
    out.x_proj = Tensor::new(layer.x_proj.name(), &[x_rows.len(), width], x_proj)?;
    Ok(out)
}

/// Column-structured prune producing a shape-reduced layer with
/// `N' = N − ⌊p · N⌋`. Returns the layer and the removed columns.
pub fn prune_columns_structured(
    layer: &MambaLayer,
    field: &ImportanceField,
    p: f64,
) -> Result<(MambaLayer, Vec<usize>)> {
    let cols = select_columns(&field.aggregate(), p)?;
    if cols.is_empty() {
        return Ok((layer.clone(), cols));
    }
    Ok((remove_state_columns(layer, &cols)?, cols))
}
