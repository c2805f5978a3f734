//! Seeded desk-scale models: a random-init one and a "trained-ish" one whose
//! output head and `A_log` are fit to the synthetic corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::make_synthetic_corpus;
use crate::checkpoint::round_to_f32;
use crate::error::{Error, Result};
use crate::eval::token_nll;
use crate::fit::a_log_nll_grad;
use crate::model::{inverse_softplus, rms_norm, MambaConfig, MambaModel};
use crate::tensor::{matmul, spd_factor_solve, Tensor};

pub const FIT_SAMPLES: usize = 64;
pub const FIT_SEQLEN: usize = 64;
pub const A_LOG_JITTER: f64 = 0.5;
/// Step sizes of the trained fixture, drawn log-uniformly. Fresh-init steps
/// (1e-3..1e-1) leave `exp(δA) ≈ 1`, so `A_log` would barely reach the output.
pub const TRAINED_DT_RANGE: (f64, f64) = (1e-2, 1.0);
/// Adam schedule for the `A_log` fit, run on the leading sequences of the fit corpus.
pub const FIT_STEPS: usize = 40;
pub const FIT_LR: f64 = 0.05;
pub const A_LOG_FIT_SAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureKind {
    Random,
    Trained,
}

impl std::str::FromStr for FixtureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "trained" => Ok(Self::Trained),
            _ => Err(Error::arg(format!("unknown fixture kind `{s}`"))),
        }
    }
}

pub fn random_tiny_model(seed: u64) -> Result<MambaModel> {
    let mut model = MambaModel::init(MambaConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    round_to_f32(&mut model);
    Ok(model)
}

/// Final normalized hidden states `[B·L, d_model]`.
pub fn final_features(model: &MambaModel, tokens: &[Vec<u32>]) -> Result<Tensor> {
    let mut resid = model.embed_batch(tokens)?;
    for i in 0..model.layers.len() {
        resid = model.apply_layer(i, &resid, false)?.0;
    }
    let (b, l, dm) = resid.dims3()?;
    let normed = rms_norm(resid.data(), b * l, model.norms[model.config.n_layers].data());
    Tensor::new("features", &[b * l, dm], normed)
}

/// Random init with jittered `A_log` and wider step sizes, then a ridge
/// least-squares fit of the head onto next-token one-hots of the synthetic
/// corpus for `seed`, a scalar temperature minimizing corpus NLL, and a short
/// gradient fit of `A_log` with the head fixed.
pub fn trained_fixture(seed: u64) -> Result<MambaModel> {
    let cfg = MambaConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MambaModel::init(cfg.clone(), &mut rng)?;
    let jitter = Normal::new(0.0, A_LOG_JITTER).expect("valid normal");
    let (dt_lo, dt_hi) = TRAINED_DT_RANGE;
    for layer in &mut model.layers {
        for v in layer.a_log.data_mut() {
            *v += jitter.sample(&mut rng);
        }
        for v in layer.dt_bias.data_mut() {
            *v = inverse_softplus(rng.random_range(dt_lo.ln()..dt_hi.ln()).exp());
        }
    }
    round_to_f32(&mut model);

    let corpus = make_synthetic_corpus(seed, cfg.vocab_size, FIT_SAMPLES, FIT_SEQLEN)?;
    let feats = final_features(&model, &corpus.sequences)?;
    let (rows, dm) = feats.dims2()?;
    let v = cfg.vocab_size;
    // Gram over positions that have a next token
    let mut zz = Tensor::zeros("ZtZ", &[dm, dm])?;
    let mut zy = Tensor::zeros("ZtY", &[dm, v])?;
    for (s, seq) in corpus.sequences.iter().enumerate() {
        for t in 0..seq.len() - 1 {
            let z = feats.row(s * FIT_SEQLEN + t);
            let target = seq[t + 1] as usize;
            for i in 0..dm {
                for j in 0..dm {
                    zz.data_mut()[i * dm + j] += z[i] * z[j];
                }
                zy.data_mut()[i * v + target] += z[i];
            }
        }
    }
    debug_assert_eq!(rows, FIT_SAMPLES * FIT_SEQLEN);
    let ridge = 1e-3 * (0..dm).map(|i| zz.get2(i, i)).sum::<f64>() / dm as f64;
    for i in 0..dm {
        let d = zz.get2(i, i);
        zz.set2(i, i, d + ridge);
    }
    let w = spd_factor_solve(&zz, &zy)?;
    model.lm_head = w.transpose()?.with_name("lm_head");

    // Logits are linear in the head, so the temperature search reuses them
    let raw = matmul(&feats, &w)?;
    let nll = |tau: f64| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        let mut scaled = vec![0.0; v];
        for (s, seq) in corpus.sequences.iter().enumerate() {
            for t in 0..seq.len() - 1 {
                for (o, &r) in scaled.iter_mut().zip(raw.row(s * FIT_SEQLEN + t)) {
                    *o = tau * r;
                }
                total += token_nll(&scaled, seq[t + 1] as usize);
                count += 1;
            }
        }
        Ok(total / count as f64)
    };
    let tau = golden_section_min(nll, (-3.0f64).exp(), 6.0f64.exp(), 40)?;
    model.lm_head = model.lm_head.scale(tau).with_name("lm_head");
    fit_a_log(&mut model, &corpus.sequences)?;
    round_to_f32(&mut model);
    Ok(model)
}

/// Adam on every layer's `A_log` against the corpus NLL, head held fixed, so
/// the transitions sit near a minimum of the loss they are later pruned under.
fn fit_a_log(model: &mut MambaModel, corpus: &[Vec<u32>]) -> Result<()> {
    let corpus = &corpus[..A_LOG_FIT_SAMPLES.min(corpus.len())];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.a_log.numel()]).collect();
    let mut v = m.clone();
    for step in 1..=FIT_STEPS {
        let (_, grads) = a_log_nll_grad(model, corpus)?;
        for (i, g) in grads.iter().enumerate() {
            let a = model.layers[i].a_log.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[i][j] = b1 * m[i][j] + (1.0 - b1) * gj;
                v[i][j] = b2 * v[i][j] + (1.0 - b2) * gj * gj;
                let mh = m[i][j] / (1.0 - b1.powi(step as i32));
                let vh = v[i][j] / (1.0 - b2.powi(step as i32));
                a[j] -= FIT_LR * mh / (vh.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Golden-section search in log space for the minimizer of a unimodal function.
fn golden_section_min(f: impl Fn(f64) -> Result<f64>, lo: f64, hi: f64, iters: usize) -> Result<f64> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c.exp())?, f(d.exp())?);
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d.exp())?;
        }
    }
    Ok(((a + b) / 2.0).exp())
}

pub fn make_fixture(kind: FixtureKind, seed: u64) -> Result<MambaModel> {
    match kind {
        FixtureKind::Random => random_tiny_model(seed),
        FixtureKind::Trained => trained_fixture(seed),
    }
}
