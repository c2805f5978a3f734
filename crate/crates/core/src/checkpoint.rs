//! Checkpoint directories: `manifest.json` plus one raw little-endian f32 blob.
//!
//! Tensors are named `embedding.weight`, `lm_head.weight`, `norm.{i}.weight`
//! and `layers.{i}.{module}.{param}`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MambaConfig, MambaLayer, MambaModel};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "model.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: MambaConfig,
    pub tensors: Vec<TensorEntry>,
}

fn layer_tensors(i: usize, layer: &MambaLayer) -> [(String, &Tensor); 9] {
    let p = |s: &str| format!("layers.{i}.{s}");
    [
        (p("in_proj.weight"), &layer.in_proj),
        (p("conv1d.weight"), &layer.conv_weight),
        (p("conv1d.bias"), &layer.conv_bias),
        (p("x_proj.weight"), &layer.x_proj),
        (p("dt_proj.weight"), &layer.dt_proj),
        (p("dt_proj.bias"), &layer.dt_bias),
        (p("out_proj.weight"), &layer.out_proj),
        (p("ssm.A_log"), &layer.a_log),
        (p("ssm.D"), &layer.d_skip),
    ]
}

/// Every tensor of `model` under its checkpoint name, in serialization order.
pub fn named_tensors(model: &MambaModel) -> Vec<(String, &Tensor)> {
    let mut out = vec![("embedding.weight".to_string(), &model.embedding)];
    for (i, layer) in model.layers.iter().enumerate() {
        out.extend(layer_tensors(i, layer));
    }
    for (i, n) in model.norms.iter().enumerate() {
        out.push((format!("norm.{i}.weight"), n));
    }
    out.push(("lm_head.weight".to_string(), &model.lm_head));
    out
}

/// Rounds every parameter to f32 precision, i.e. what a save/load cycle yields.
pub fn round_to_f32(model: &mut MambaModel) {
    let round = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    round(&mut model.embedding);
    round(&mut model.lm_head);
    model.norms.iter_mut().for_each(round);
    for l in &mut model.layers {
        for t in [
            &mut l.a_log,
            &mut l.conv_weight,
            &mut l.conv_bias,
            &mut l.in_proj,
            &mut l.x_proj,
            &mut l.dt_proj,
            &mut l.dt_bias,
            &mut l.out_proj,
            &mut l.d_skip,
        ] {
            round(t);
        }
    }
}

pub fn save_checkpoint(model: &MambaModel, dir: &Path) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in named_tensors(model) {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            file: BLOB.into(),
            byte_offset: blob.len() as u64,
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: model.config.clone(),
        tensors: entries,
    };
    fs::write(dir.join(BLOB), &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST), json)?;
    Ok(())
}

/// Expected shape of every tensor name for a config.
fn expected_shapes(c: &MambaConfig) -> BTreeMap<String, Vec<usize>> {
    let (dm, di, ds, r) = (c.d_model, c.d_inner, c.d_state, c.dt_rank);
    let mut m = BTreeMap::new();
    m.insert("embedding.weight".into(), vec![c.vocab_size, dm]);
    m.insert("lm_head.weight".into(), vec![c.vocab_size, dm]);
    for i in 0..=c.n_layers {
        m.insert(format!("norm.{i}.weight"), vec![dm]);
    }
    for i in 0..c.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        m.insert(p("in_proj.weight"), vec![2 * di, dm]);
        m.insert(p("conv1d.weight"), vec![di, c.d_conv]);
        m.insert(p("conv1d.bias"), vec![di]);
        m.insert(p("x_proj.weight"), vec![r + 2 * ds, di]);
        m.insert(p("dt_proj.weight"), vec![di, r]);
        m.insert(p("dt_proj.bias"), vec![di]);
        m.insert(p("out_proj.weight"), vec![dm, di]);
        m.insert(p("ssm.A_log"), vec![di, ds]);
        m.insert(p("ssm.D"), vec![di]);
    }
    m
}

pub fn load_checkpoint(dir: &Path) -> Result<MambaModel> {
    let manifest_bytes = fs::read(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    manifest
        .config
        .validate()
        .map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    let expected = expected_shapes(&manifest.config);

    let mut blobs: HashMap<String, Vec<u8>> = HashMap::new();
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for entry in &manifest.tensors {
        let Some(shape) = expected.get(&entry.name) else {
            return Err(Error::format(&entry.name, "unknown tensor name"));
        };
        if &entry.shape != shape {
            return Err(Error::format(
                &entry.name,
                format!("manifest shape {:?}, config implies {shape:?}", entry.shape),
            ));
        }
        if entry.dtype != "f32" {
            return Err(Error::format(&entry.name, format!("unsupported dtype {}", entry.dtype)));
        }
        if entry.file.is_empty() || entry.file.contains(['/', '\\']) || entry.file == ".." {
            return Err(Error::format(&entry.name, format!("invalid blob file {:?}", entry.file)));
        }
        if tensors.contains_key(&entry.name) {
            return Err(Error::format(&entry.name, "duplicate tensor entry"));
        }
        if !blobs.contains_key(&entry.file) {
            let bytes = fs::read(dir.join(&entry.file))
                .map_err(|e| Error::format(&entry.name, format!("reading {}: {e}", entry.file)))?;
            blobs.insert(entry.file.clone(), bytes);
        }
        let blob = &blobs[&entry.file];
        let numel: usize = shape.iter().product();
        let start = usize::try_from(entry.byte_offset)
            .map_err(|_| Error::format(&entry.name, "byte offset overflow"))?;
        let end = start + 4 * numel;
        if end > blob.len() {
            return Err(Error::format(
                &entry.name,
                format!("truncated blob: need bytes {start}..{end}, file has {}", blob.len()),
            ));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(entry.name.clone(), Tensor::new(entry.name.clone(), shape, data)?);
    }
    if let Some(missing) = expected.keys().find(|k| !tensors.contains_key(*k)) {
        return Err(Error::format(missing, "tensor missing from manifest"));
    }

    let mut take = |name: String, short: &str| {
        tensors
            .remove(&name)
            .map(|t| t.with_name(short))
            .ok_or_else(|| Error::format(name, "tensor missing from manifest"))
    };
    let c = manifest.config.clone();
    let embedding = take("embedding.weight".into(), "embedding")?;
    let lm_head = take("lm_head.weight".into(), "lm_head")?;
    let norms = (0..=c.n_layers)
        .map(|i| take(format!("norm.{i}.weight"), "norm"))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for i in 0..c.n_layers {
        let mut t = |s: &str, short: &str| take(format!("layers.{i}.{s}"), short);
        layers.push(MambaLayer {
            in_proj: t("in_proj.weight", "in_proj")?,
            conv_weight: t("conv1d.weight", "conv1d")?,
            conv_bias: t("conv1d.bias", "conv1d.bias")?,
            x_proj: t("x_proj.weight", "x_proj")?,
            dt_proj: t("dt_proj.weight", "dt_proj")?,
            dt_bias: t("dt_proj.bias", "dt_bias")?,
            out_proj: t("out_proj.weight", "out_proj")?,
            a_log: t("ssm.A_log", "A_log")?,
            d_skip: t("ssm.D", "D")?,
        });
    }
    let model = MambaModel {
        config: c,
        embedding,
        layers,
        norms,
        lm_head,
    };
    model.validate()?;
    Ok(model)
}
