//! Model checkpoints: a `key=value` text manifest next to a raw
//! little-endian `f32` blob.
//!
//! For a checkpoint stem `run/model` the files are `run/model.manifest` and
//! `run/model.bin`. The manifest lists the architecture, the seed and one
//! `block=<name>:<d0>x<d1>...` line per tensor; the blob stores the tensors
//! back to back in manifest order. Class centers, when present, are the last
//! block, named `centers`, followed by `center_lr` / `center_weight` keys.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbones::{ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::objectives::ClassCenters;
use crate::tensor::Tensor;

const FORMAT_TAG: &str = "ssml-checkpoint-v1";
const CENTERS_BLOCK: &str = "centers";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub centers: Option<ClassCenters>,
    pub seed: u64,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, "manifest")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    with_suffix(stem, "bin")
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Renders the manifest text for a checkpoint.
pub fn manifest(ckpt: &Checkpoint) -> String {
    let spec = ckpt.params.spec();
    let mut out = String::new();
    let _ = writeln!(out, "format={FORMAT_TAG}");
    let _ = writeln!(out, "kind={}", spec.kind);
    let _ = writeln!(out, "channels={}", spec.channels);
    let _ = writeln!(out, "time_len={}", spec.time_len);
    let _ = writeln!(out, "n_classes={}", spec.n_classes);
    let _ = writeln!(out, "mlp_hidden={}", spec.mlp_hidden);
    let _ = writeln!(out, "stnn_spatial={}", spec.stnn_spatial);
    let _ = writeln!(out, "stnn_temporal={}", spec.stnn_temporal);
    let _ = writeln!(out, "cnn_filters={}", dims(&spec.cnn_filters));
    let _ = writeln!(out, "cnn_first_kernel={}", spec.cnn_first_kernel);
    let _ = writeln!(out, "cnn_kernel={}", spec.cnn_kernel);
    let _ = writeln!(out, "cnn_spatial={}", spec.cnn_spatial);
    let _ = writeln!(out, "seed={}", ckpt.seed);
    if let Some(c) = &ckpt.centers {
        let _ = writeln!(out, "center_lr={}", c.lr);
        let _ = writeln!(out, "center_weight={}", c.lambda);
    }
    for (name, t) in ckpt.params.names().iter().zip(ckpt.params.tensors()) {
        let _ = writeln!(out, "block={name}:{}", dims(t.shape()));
    }
    if let Some(c) = &ckpt.centers {
        let _ = writeln!(out, "block={CENTERS_BLOCK}:{}", dims(c.tensor().shape()));
    }
    out
}

pub fn save(stem: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut blob = Vec::with_capacity(4 * (ckpt.params.param_count() + ckpt.centers.as_ref().map_or(0, |c| c.tensor().numel())));
    let centers = ckpt.centers.as_ref().map(|c| c.tensor());
    for t in ckpt.params.tensors().iter().chain(centers) {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mpath = manifest_path(stem);
    fs::write(&mpath, manifest(ckpt)).map_err(|e| Error::io(&mpath, e))?;
    let bpath = blob_path(stem);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn load(stem: &Path) -> Result<Checkpoint> {
    let mpath = manifest_path(stem);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let bpath = blob_path(stem);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    parse(&text, &blob)
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.trim().parse::<usize>().map_err(|_| Error::Format(format!("bad dimension list `{s}`"))))
        .collect()
}

/// Rebuilds a checkpoint from manifest text and blob bytes.
pub fn parse(text: &str, blob: &[u8]) -> Result<Checkpoint> {
    let mut kv: Vec<(&str, &str)> = Vec::new();
    let mut blocks: Vec<(String, Vec<usize>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {}: expected key=value", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "block" {
            let (name, shape) = v
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("manifest line {}: expected block=name:shape", lineno + 1)))?;
            blocks.push((name.to_string(), parse_dims(shape)?));
        } else {
            kv.push((k, v));
        }
    }
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("manifest key `{key}` is not an integer")))
    };
    if get("format")? != FORMAT_TAG {
        return Err(Error::Format(format!("unsupported checkpoint format `{}`", get("format")?)));
    }
    let mut spec = ModelSpec::new(get("kind")?.parse()?, num("channels")?, num("time_len")?, num("n_classes")?);
    spec.mlp_hidden = num("mlp_hidden")?;
    spec.stnn_spatial = num("stnn_spatial")?;
    spec.stnn_temporal = num("stnn_temporal")?;
    let filters = parse_dims(get("cnn_filters")?)?;
    spec.cnn_filters = filters
        .try_into()
        .map_err(|_| Error::Format("cnn_filters needs four entries".into()))?;
    spec.cnn_first_kernel = num("cnn_first_kernel")?;
    spec.cnn_kernel = num("cnn_kernel")?;
    spec.cnn_spatial = num("cnn_spatial")?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| Error::Format("manifest key `seed` is not an integer".into()))?;

    let total: usize = blocks.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if blob.len() != 4 * total {
        return Err(Error::Format(format!(
            "blob holds {} bytes, manifest describes {}",
            blob.len(),
            4 * total
        )));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(blocks.len());
    let mut centers = None;
    for (name, shape) in blocks {
        let n: usize = shape.iter().product();
        let data = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += 4 * n;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("block {name}: {e}")))?;
        if name == CENTERS_BLOCK {
            let lr = get("center_lr")?.parse().map_err(|_| Error::Format("bad center_lr".into()))?;
            let lambda = get("center_weight")?.parse().map_err(|_| Error::Format("bad center_weight".into()))?;
            centers = Some(ClassCenters::from_tensor(t, lr, lambda)?);
        } else {
            tensors.push(t);
        }
    }
    let params = ModelParams::from_parts(spec, tensors)?;
    if let Some(c) = &centers {
        if c.width() != params.feature_width() || c.n_classes() != params.n_classes() {
            return Err(Error::Format("centers do not match the model's feature width or class count".into()));
        }
    }
    Ok(Checkpoint { params, centers, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{build, BackboneKind};

    #[test]
    fn manifest_lists_blocks_in_order() {
        let params = build(&ModelSpec::new(BackboneKind::Mlp, 32, 128, 2), 3).unwrap();
        let centers = Some(params.zero_centers());
        let text = manifest(&Checkpoint { params, centers, seed: 3 });
        let blocks: Vec<&str> = text.lines().filter(|l| l.starts_with("block=")).collect();
        assert_eq!(
            blocks,
            [
                "block=hidden.weight:4096x300",
                "block=hidden.bias:300",
                "block=output.weight:300x2",
                "block=output.bias:2",
                "block=centers:2x300"
            ]
        );
        assert!(text.contains("kind=MLP\n"));
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let params = build(&ModelSpec::new(BackboneKind::Stnn, 4, 16, 2), 3).unwrap();
        let ckpt = Checkpoint { params, centers: None, seed: 3 };
        let text = manifest(&ckpt);
        assert!(matches!(parse(&text, &[0u8; 12]), Err(Error::Format(_))));
    }
}
